"""Dense convex QP solver (Mehrotra predictor-corrector interior point).

    min  z^T H z / 2 + c^T z   s.t.  A z <= b,  E z = d

Sized for the desk-scale constrained regressions in ``dpfl.tailored``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import ConvergenceError, InfeasibleError


@dataclass
class QPResult:
    z: np.ndarray
    objective: float
    iterations: int
    kkt_residual: float
    lam: np.ndarray = field(default_factory=lambda: np.zeros(0))
    nu: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _empty(n):
    return np.zeros((0, n)), np.zeros(0)


def check_feasible(A, b, E, d, n) -> bool:
    """Phase-one feasibility of the constraint polyhedron by linear programming."""
    if len(b) == 0 and len(d) == 0:
        return True
    res = linprog(np.zeros(n), A_ub=A if len(b) else None, b_ub=b if len(b) else None,
                  A_eq=E if len(d) else None, b_eq=d if len(d) else None,
                  bounds=[(None, None)] * n, method="highs")
    return res.status == 0


def _solve_kkt(M, E, r1, r2):
    m = len(r2)
    if m == 0:
        try:
            return np.linalg.solve(M, r1), np.zeros(0)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(M, r1, rcond=None)[0], np.zeros(0)
    n = M.shape[0]
    K = np.block([[M, E.T], [E, np.zeros((m, m))]])
    rhs = np.concatenate([r1, r2])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _step_to_boundary(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def solve_qp(H, c, A=None, b=None, E=None, d=None, *, tol: float = 1e-9, max_iter: int = 200,
             check: bool = True) -> QPResult:
    """Solve the QP; ``kkt_residual`` is the scaled max of stationarity, feasibility and complementarity.

    Raises ``InfeasibleError`` when the constraints admit no point and
    ``ConvergenceError`` when the iteration cap is hit first.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    c = np.asarray(c, dtype=float).reshape(-1)
    n = len(c)
    A, b = (_empty(n) if A is None or len(A) == 0 else (np.asarray(A, float).reshape(-1, n), np.asarray(b, float).reshape(-1)))
    E, d = (_empty(n) if E is None or len(E) == 0 else (np.asarray(E, float).reshape(-1, n), np.asarray(d, float).reshape(-1)))
    if check and not check_feasible(A, b, E, d, n):
        raise InfeasibleError("constraint set is empty")
    m = len(b)
    scale_d = 1.0 + max(np.abs(c).max(initial=0.0), np.abs(H).max(initial=0.0))
    scale_p = 1.0 + max(np.abs(b).max(initial=0.0), np.abs(d).max(initial=0.0))

    if m == 0:
        z, nu = _solve_kkt(H, E, -c, d)
        rd = H @ z + c + E.T @ nu
        res = max(np.abs(rd).max(initial=0.0) / scale_d, np.abs(E @ z - d).max(initial=0.0) / scale_p)
        return QPResult(z, float(0.5 * z @ H @ z + c @ z), 1, float(res), np.zeros(0), nu)

    # start from the equality-constrained minimizer with a shifted interior slack
    reg = 1e-8 * np.eye(n)
    z, _ = _solve_kkt(H + A.T @ A + reg, E, -c + A.T @ b, d)
    s = b - A @ z
    s = np.maximum(s, 1.0)
    lam = np.ones(m)
    nu = np.zeros(len(d))
    res = np.inf
    for it in range(1, max_iter + 1):
        rd = H @ z + c + A.T @ lam + E.T @ nu
        rp = A @ z + s - b
        re = E @ z - d
        mu = lam @ s / m
        res = max(np.abs(rd).max() / scale_d,
                  max(np.abs(rp).max(), np.abs(re).max(initial=0.0)) / scale_p, mu)
        if res < tol:
            break
        D = lam / s
        M = H + A.T @ (A * D[:, None])

        def newton(r1, r2, r3, r4):
            # H dz + A^T dlam + E^T dnu = r1, A dz + ds = r2, E dz = r3, lam ds + s dlam = r4
            dz, dnu = _solve_kkt(M, E, r1 + A.T @ (D * r2 - r4 / s), r3)
            dlam = D * (A @ dz - r2) + r4 / s
            ds = (r4 - s * dlam) / lam
            return dz, ds, dlam, dnu

        def direction(rc):
            r = (-rd, -rp, -re, -rc)
            step = newton(*r)
            # iterative refinement against the unreduced Newton system; D spans many decades near the end
            for _ in range(2):
                dz, ds, dlam, dnu = step
                e = (r[0] - (H @ dz + A.T @ dlam + E.T @ dnu), r[1] - (A @ dz + ds),
                     r[2] - E @ dz, r[3] - (lam * ds + s * dlam))
                corr = newton(*e)
                step = tuple(x + y for x, y in zip(step, corr))
            return step

        # predictor
        dz, ds, dlam, dnu = direction(lam * s)
        a_p = _step_to_boundary(s, ds)
        a_d = _step_to_boundary(lam, dlam)
        mu_aff = (s + a_p * ds) @ (lam + a_d * dlam) / m
        sigma = (mu_aff / mu) ** 3
        # corrector
        dz, ds, dlam, dnu = direction(lam * s + ds * dlam - sigma * mu)
        a_p = 0.99 * _step_to_boundary(s, ds)
        a_d = 0.99 * _step_to_boundary(lam, dlam)
        alpha = min(a_p, a_d)
        z = z + alpha * dz
        s = s + alpha * ds
        lam = lam + alpha * dlam
        nu = nu + alpha * dnu
    else:
        raise ConvergenceError(f"interior point stopped at the iteration cap with KKT residual {res:.3e}")
    return QPResult(z, float(0.5 * z @ H @ z + c @ z), it, float(res), lam, nu)
