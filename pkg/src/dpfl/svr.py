"""Support vector regression trainers (epsilon-insensitive, solved in the dual).

The intercept is the first predictor column and is regularized together
with the other coefficients, so the dual has box constraints only:

    max  y^T a - eps |a|_1 - a^T K a / 2,   -omega <= a_i <= omega

with ``a_i = alpha_i - alpha*_i``. The linear model is ``beta = X^T a``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataset import Dataset
from .errors import StallError
from .models import Kernel, KernelModel, LinearModel

if os.environ.get("DPFL_PURE_PYTHON"):
    from ._smo_py import smo_solve
    BACKEND = "python"
else:
    try:
        from ._smo import smo_solve
        BACKEND = "cython"
    except ImportError:
        from ._smo_py import smo_solve
        BACKEND = "python"


@dataclass(frozen=True)
class SVRSpec:
    omega: float = 1.0
    epsilon: float = 1e-3
    extra_lambda: float = 0.0
    epsilon_per_response: Optional[tuple] = None
    tol: float = 1e-6
    max_updates: int = 100000

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError("omega must be positive")
        if self.epsilon < 0 or (self.epsilon_per_response and min(self.epsilon_per_response) < 0):
            raise ValueError("epsilon must be non-negative")
        if self.extra_lambda < 0:
            raise ValueError("extra_lambda must be non-negative")

    @property
    def effective_omega(self) -> float:
        """``(1/2 + lambda) |beta|^2 + omega sum xi`` has the same minimizer as ``|beta|^2 / 2 + omega / (1 + 2 lambda) sum xi``."""
        return self.omega / (1.0 + 2.0 * self.extra_lambda)

    def eps_for(self, j: int) -> float:
        if self.epsilon_per_response is not None:
            return float(self.epsilon_per_response[j])
        return self.epsilon


def svr_objectives(K, y, a, eps, omega):
    """Primal and dual objective values for dual point ``a`` (primal evaluated at ``beta = X^T a``)."""
    Ka = K @ a
    r = y - Ka
    aKa = a @ Ka
    primal = 0.5 * aKa + omega * np.maximum(np.abs(r) - eps, 0.0).sum()
    dual = a @ y - eps * np.abs(a).sum() - 0.5 * aKa
    return float(primal), float(dual)


def _solve_all(K, Y, spec):
    omega = spec.effective_omega
    A = np.zeros_like(Y)
    info = []
    for j in range(Y.shape[1]):
        eps = spec.eps_for(j)
        a, updates, vmax, gap, converged, stalled = smo_solve(K, Y[:, j], eps, omega, spec.tol, spec.tol, spec.max_updates)
        if stalled:
            raise StallError(f"SMO made no progress over a full pass on response {j}", vmax)
        A[:, j] = a
        primal, dual = svr_objectives(K, Y[:, j], a, eps, omega)
        info.append({"updates": int(updates), "kkt": float(vmax), "gap": primal - dual,
                     "primal": primal, "dual": dual, "converged": bool(converged)})
    return A, info


def fit_svr(ds: Dataset, spec: SVRSpec = SVRSpec()) -> LinearModel:
    X = ds.X
    A, info = _solve_all(X @ X.T, ds.Y, spec)
    beta = X.T @ A
    return LinearModel(beta, ds.schema, ds.normalization, {
        "trainer": "svr_l2" if spec.extra_lambda else "svr", "omega": spec.omega, "epsilon": spec.epsilon,
        "extra_lambda": spec.extra_lambda, "backend": BACKEND, "solver": info})


def fit_kernel_svr(ds: Dataset, spec: SVRSpec = SVRSpec(), kernel: Kernel = Kernel()) -> KernelModel:
    """Dual SVR over ``k(x_i, x_j) + 1``; the constant accounts for the regularized intercept."""
    Xt = ds.X[:, 1:]
    K = kernel.gram(Xt, Xt) + 1.0
    A, info = _solve_all(K, ds.Y, spec)
    support = np.flatnonzero(np.any(A != 0, axis=1))
    return KernelModel(kernel, A[support], Xt[support], A.sum(axis=0), ds.schema, {
        "trainer": "svr_kernel", "omega": spec.omega, "epsilon": spec.epsilon,
        "extra_lambda": spec.extra_lambda, "backend": BACKEND, "solver": info})
