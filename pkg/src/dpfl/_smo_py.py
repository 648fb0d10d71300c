"""Pure-Python dual coordinate solver for epsilon-insensitive SVR (fallback for the compiled kernel)."""

import numpy as np


def _objectives(a, y, r, eps, omega):
    aKa = a @ (y - r)
    primal = 0.5 * aKa + omega * np.maximum(np.abs(r) - eps, 0.0).sum()
    dual = a @ y - eps * np.abs(a).sum() - 0.5 * aKa
    return primal, dual


def _violations(a, r, eps, omega):
    up = r - eps   # dual gradient for a > 0
    dn = r + eps   # dual gradient for a < 0
    v = np.where(
        a > 0,
        np.where(a < omega, np.abs(up), np.maximum(-up, 0.0)),
        np.where(a < 0, np.where(a > -omega, np.abs(dn), np.maximum(dn, 0.0)), np.maximum(np.abs(r) - eps, 0.0)),
    )
    return v


def smo_solve(K, y, eps, omega, tol=1e-6, gap_tol=1e-6, max_updates=100000, a0=None):
    """Maximize ``y^T a - eps |a|_1 - a^T K a / 2`` over ``-omega <= a_i <= omega``.

    Starts from ``a0`` (default zero). Each step re-optimizes the pair ``(alpha_i, alpha*_i)`` of the sample with
    the largest KKT violation in closed form. Returns
    ``(a, updates, max_violation, gap, converged, stalled)``.
    """
    K = np.ascontiguousarray(K, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n = len(y)
    if a0 is None:
        a = np.zeros(n)
        r = y.copy()
    else:
        a = np.array(a0, dtype=np.float64)
        r = y - K @ a
    diag = np.diag(K).copy()
    updates = 0
    idle = 0
    gap = np.inf
    vmax = np.inf
    while True:
        v = _violations(a, r, eps, omega)
        i = int(np.argmax(v))
        vmax = v[i]
        if vmax < tol:
            primal, dual = _objectives(a, y, r, eps, omega)
            gap = primal - dual
            if gap <= gap_tol * (1.0 + abs(primal)) or vmax < 1e-15:
                return a, updates, vmax, gap, True, False
        if updates >= max_updates:
            primal, dual = _objectives(a, y, r, eps, omega)
            return a, updates, vmax, primal - dual, False, False
        g = r[i] + diag[i] * a[i]
        if g > eps:
            new = (g - eps) / diag[i]
        elif g < -eps:
            new = (g + eps) / diag[i]
        else:
            new = 0.0
        new = min(max(new, -omega), omega)
        delta = new - a[i]
        updates += 1
        if delta == 0.0:
            idle += 1
            if idle >= n:
                primal, dual = _objectives(a, y, r, eps, omega)
                return a, updates, vmax, primal - dual, False, True
            continue
        idle = 0
        a[i] = new
        r -= delta * K[:, i]
