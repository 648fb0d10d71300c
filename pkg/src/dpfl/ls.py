"""Least-squares trainers: OLS and its decompositions, Huber, GLS, TLS, WTLS, clustered LS and recursive LS."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .clustering import assign_clusters
from .dataset import Dataset
from .errors import ClusterError, ConvergenceError, RankDeficientError, SingularMatrixError
from .models import LinearModel, PiecewiseLinearModel

RANK_TOL = 1e-10


def numerical_rank(A, tol: float = RANK_TOL) -> int:
    if A.size == 0:
        return 0
    s = np.linalg.svd(A, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))


def require_full_rank(X, what: str = "X") -> None:
    r = numerical_rank(X)
    if r < X.shape[1]:
        raise RankDeficientError(f"{what} has rank {r} < {X.shape[1]} columns (multicollinearity)", r, X.shape[1])


def _weighted(X, Y, weights):
    if weights is None:
        return X, Y
    w = np.asarray(weights, dtype=float)
    if w.shape != (X.shape[0],) or np.any(w < 0):
        raise ValueError("weights must be a non-negative vector with one entry per sample")
    s = np.sqrt(w)[:, None]
    return X * s, Y * s


def _model(ds, beta, trainer, **meta):
    return LinearModel(beta, ds.schema, ds.normalization, {"trainer": trainer, **meta})


def ols_solve(X, Y) -> np.ndarray:
    """``(X^T X)^{-1} X^T Y`` via a thin QR factorization; X must have full column rank."""
    require_full_rank(X)
    Q, R = np.linalg.qr(X)
    return sla.solve_triangular(R, Q.T @ Y)


def fit_ols(ds: Dataset, weights=None) -> LinearModel:
    """Ordinary least squares; ``weights`` scales each row's squared residual."""
    X, Y = _weighted(ds.X, ds.Y, weights)
    return _model(ds, ols_solve(X, Y), "ols")


def _svd_solve(X, Y, tol=RANK_TOL):
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((X.shape[1], Y.shape[1])), 0
    keep = s > tol * s[0]
    beta = Vt[keep].T @ ((U[:, keep].T @ Y) / s[keep, None])
    return beta, int(keep.sum())


def _cod_solve(X, Y, tol=RANK_TOL):
    """Complete orthogonal decomposition ``X P = Q [R 0; 0 0] Z^T`` giving the minimum-norm solution."""
    n = X.shape[1]
    Q, R, piv = sla.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d.size == 0 or d[0] == 0:
        return np.zeros((n, Y.shape[1])), 0
    r = int(np.count_nonzero(d > tol * d[0]))
    # second orthogonal factorization squeezes the trailing columns into an r x r triangle
    Z, T = np.linalg.qr(R[:r].T)
    w = sla.solve_triangular(T.T, Q[:, :r].T @ Y, lower=True)
    beta = np.zeros((n, Y.shape[1]))
    beta[piv] = Z @ w
    return beta, r


def fit_ols_decomposed(ds: Dataset, method: str = "cod", weights=None) -> LinearModel:
    """Least squares through a rank-revealing factorization; tolerates rank deficiency."""
    X, Y = _weighted(ds.X, ds.Y, weights)
    if method == "svd":
        beta, r = _svd_solve(X, Y)
    elif method == "cod":
        beta, r = _cod_solve(X, Y)
    else:
        raise ValueError(f"unknown decomposition {method!r}")
    return _model(ds, beta, f"ols_{method}", rank=r)


# ---------------------------------------------------------------------------
# Huber

@dataclass(frozen=True)
class HuberSpec:
    delta: Optional[float] = None  # None: 1.345 x MAD scale of OLS residuals, per response
    tol: float = 1e-8
    max_iter: int = 200
    scale_rounds: int = 10  # MAD re-estimates when delta is None

    def __post_init__(self):
        if self.delta is not None and not self.delta > 0:
            raise ValueError("delta must be positive")


def huber_loss(r, delta) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * a - 0.5 * delta * delta)


def default_huber_delta(residuals) -> float:
    mad = np.median(np.abs(residuals - np.median(residuals)))
    return max(1.345 * 1.4826 * mad, 1e-12)


def huber_irls(X, y, delta, tol=1e-8, max_iter=200, weights=None):
    """Minimize ``sum w_i rho(y_i - x_i b)`` by reweighted least squares.

    Returns ``(b, objective history)``. Each step is a majorize-minimize step,
    so the history is non-increasing.
    """
    w0 = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    b = ols_solve(X * np.sqrt(w0)[:, None], (y * np.sqrt(w0))[:, None])[:, 0]
    hist = [float(w0 @ huber_loss(y - X @ b, delta))]
    for _ in range(max_iter):
        r = y - X @ b
        a = np.abs(r)
        w = w0 * np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))
        s = np.sqrt(w)
        Xw = X * s[:, None]
        require_full_rank(Xw, "reweighted X")
        b_new = ols_solve(Xw, (y * s)[:, None])[:, 0]
        hist.append(float(w0 @ huber_loss(y - X @ b_new, delta)))
        step = np.max(np.abs(b_new - b))
        b = b_new
        if step < tol * (1.0 + np.max(np.abs(b))):
            return b, hist
    raise ConvergenceError(f"Huber IRLS did not converge in {max_iter} iterations")


def fit_huber(ds: Dataset, spec: HuberSpec = HuberSpec(), weights=None) -> LinearModel:
    X, Y = ds.X, ds.Y
    require_full_rank(X)
    beta = np.zeros((X.shape[1], Y.shape[1]))
    deltas, hists = [], []
    pre = ols_solve(*_weighted(X, Y, weights))
    for j in range(Y.shape[1]):
        if spec.delta is not None:
            delta = spec.delta
            beta[:, j], h = huber_irls(X, Y[:, j], delta, spec.tol, spec.max_iter, weights)
        else:
            # OLS residuals are smeared by the very outliers being guarded against, so the
            # scale is re-read from the Huber residuals until it settles
            delta = default_huber_delta(Y[:, j] - X @ pre[:, j])
            for _ in range(spec.scale_rounds):
                beta[:, j], h = huber_irls(X, Y[:, j], delta, spec.tol, spec.max_iter, weights)
                new = default_huber_delta(Y[:, j] - X @ beta[:, j])
                settled = abs(new - delta) <= 1e-3 * delta
                delta = new
                if settled:
                    break
            beta[:, j], h = huber_irls(X, Y[:, j], delta, spec.tol, spec.max_iter, weights)
        deltas.append(delta)
        hists.append(h)
    return _model(ds, beta, "huber", delta=deltas, objective=hists)


# ---------------------------------------------------------------------------
# GLS

@dataclass(frozen=True, eq=False)
class GLSSpec:
    Omega: np.ndarray


def ar1_covariance(n: int, rho: float) -> np.ndarray:
    """``rho^|i-j|``, the residual correlation of a stationary AR(1) sequence."""
    i = np.arange(n)
    return rho ** np.abs(i[:, None] - i[None, :])


def fit_gls(ds: Dataset, spec: GLSSpec) -> LinearModel:
    """Generalized least squares by Cholesky whitening: with ``Omega = L L^T`` regress ``L^-1 Y`` on ``L^-1 X``."""
    Om = np.asarray(spec.Omega, dtype=float)
    n = ds.n_samples
    if Om.shape != (n, n) or not np.allclose(Om, Om.T, rtol=0, atol=1e-12 * np.max(np.abs(Om))):
        raise ValueError("Omega must be a symmetric N_s x N_s matrix")
    try:
        L = np.linalg.cholesky(Om)
    except np.linalg.LinAlgError:
        raise ValueError("Omega is not positive definite") from None
    Xw = sla.solve_triangular(L, ds.X, lower=True)
    Yw = sla.solve_triangular(L, ds.Y, lower=True)
    require_full_rank(Xw, "whitened X")
    return _model(ds, ols_solve(Xw, Yw), "gls")


# ---------------------------------------------------------------------------
# TLS / WTLS

def tls_solve(X, Y):
    """``-V_xy V_yy^-1`` from the right singular vectors of ``[X Y]``."""
    nx = X.shape[1]
    _, s, Vt = np.linalg.svd(np.hstack([X, Y]), full_matrices=False)
    V = Vt.T
    Vxy, Vyy = V[:nx, nx:], V[nx:, nx:]
    if np.linalg.cond(Vyy) > 1e12:
        raise SingularMatrixError("V_yy is singular; the total least squares solution does not exist")
    return -Vxy @ np.linalg.inv(Vyy), s


def fit_tls(ds: Dataset, weights=None) -> LinearModel:
    X, Y = _weighted(ds.X, ds.Y, weights)
    beta, s = tls_solve(X, Y)
    nx = X.shape[1]
    return _model(ds, beta, "tls", objective=float(np.sum(s[nx:] ** 2)))


@dataclass(frozen=True, eq=False)
class WTLSSpec:
    """Noise variances for every X column and every Y column (``N_x + N_y`` entries).

    A zero variance marks a column as exact (it receives no correction).
    """

    Sigma: np.ndarray
    tol: float = 1e-8
    max_iter: int = 500

    def __post_init__(self):
        s = np.asarray(self.Sigma, dtype=float)
        if s.ndim == 2:
            if np.any(s != np.diag(np.diag(s))):
                raise ValueError("Sigma must be diagonal")
            s = np.diag(s)
        if np.any(s < 0):
            raise ValueError("Sigma entries must be non-negative")
        object.__setattr__(self, "Sigma", s)


def wtls_objective(X, Y, beta, dX, Dx, Dy) -> float:
    R = Y - (X + dX) @ beta
    return float(np.sum(dX * dX * Dx) + np.sum(R * R * Dy))


def fit_wtls(ds: Dataset, spec: WTLSSpec) -> LinearModel:
    """Weighted orthogonal-distance regression by alternating minimization.

    With ``beta`` fixed each row's optimal correction is
    ``dx = (Dx + beta Dy beta^T)^-1 beta Dy r`` (restricted to noisy X columns);
    with the corrections fixed, ``beta`` is the least-squares fit on ``X + dX``.
    The objective is recorded per iteration and never increases.
    """
    X, Y = ds.X, ds.Y
    nx, ny = X.shape[1], Y.shape[1]
    sig = spec.Sigma
    if sig.shape != (nx + ny,):
        raise ValueError(f"Sigma needs {nx + ny} entries, got {sig.shape}")
    sx, sy = sig[:nx], sig[nx:]
    if np.any(sy <= 0):
        raise ValueError("response noise variances must be positive")
    noisy = np.flatnonzero(sx > 0)
    Dx = np.zeros(nx)
    Dx[noisy] = 1.0 / sx[noisy]
    Dy = 1.0 / sy

    def correction(beta):
        bn = beta[noisy]
        M = np.diag(Dx[noisy]) + (bn * Dy) @ bn.T
        dX = np.zeros_like(X)
        dX[:, noisy] = np.linalg.solve(M, (bn * Dy) @ (Y - X @ beta).T).T
        return dX

    beta = ols_solve(X, Y)
    hist = [wtls_objective(X, Y, beta, np.zeros_like(X), Dx, Dy)]
    for it in range(spec.max_iter):
        dX = correction(beta)
        hist.append(wtls_objective(X, Y, beta, dX, Dx, Dy))
        Xc = X + dX
        require_full_rank(Xc, "corrected X")
        beta_new = ols_solve(Xc, Y)
        hist.append(wtls_objective(X, Y, beta_new, dX, Dx, Dy))
        step = np.max(np.abs(beta_new - beta))
        beta = beta_new
        if step < spec.tol * (1.0 + np.max(np.abs(beta))):
            hist.append(wtls_objective(X, Y, beta, correction(beta), Dx, Dy))
            return _model(ds, beta, "wtls", objective=hist, iterations=it + 1)
    raise ConvergenceError(f"WTLS alternating minimization did not converge in {spec.max_iter} iterations")


# ---------------------------------------------------------------------------
# clustered LS

def fit_clustered_ls(ds: Dataset, K: int, clusterer: str = "kmeans", seed: int = 0, weights=None) -> PiecewiseLinearModel:
    """Cluster the predictor space, then fit OLS separately inside each cluster."""
    if K < 1:
        raise ValueError("K must be at least 1")
    X, Y = ds.X, ds.Y
    nx = X.shape[1]
    if K * nx > len(X):
        raise ClusterError(f"{K} clusters of at least {nx} samples need more than {len(X)} rows")
    labels = assign_clusters(X[:, 1:], K, clusterer, seed)
    betas, cents = [], []
    w = None if weights is None else np.asarray(weights, dtype=float)
    for k in range(K):
        idx = np.flatnonzero(labels == k)
        if len(idx) < nx:
            raise ClusterError(f"cluster {k} has {len(idx)} samples, fewer than N_x = {nx}")
        Xk, Yk = _weighted(X[idx], Y[idx], None if w is None else w[idx])
        try:
            betas.append(ols_solve(Xk, Yk))
        except RankDeficientError as exc:
            raise ClusterError(f"cluster {k} is underdetermined: {exc}") from None
        cents.append(X[idx].mean(axis=0))
    return PiecewiseLinearModel(
        np.array(betas), np.array(cents), ds.schema, ds.normalization,
        {"trainer": "cls_ls", "clusterer": clusterer, "K": K, "sizes": np.bincount(labels, minlength=K).tolist()},
    )


# ---------------------------------------------------------------------------
# recursive LS

@dataclass
class RLSState:
    """Recursive least-squares state. Single owner; updates return a new state."""

    beta: np.ndarray
    P: np.ndarray
    kappa: float
    t: int
    schema: object = None
    history: list = field(default_factory=list)

    def model(self) -> LinearModel:
        return LinearModel(self.beta, self.schema, metadata={"trainer": "rls", "kappa": self.kappa, "t": self.t})


def forgetting_weights(n: int, varpi: float) -> np.ndarray:
    """``w_i = varpi^(n - i)`` for ``i = 1..n``: the newest sample has weight 1."""
    if not 0 < varpi <= 1:
        raise ValueError("forgetting factor must lie in (0, 1]")
    return varpi ** np.arange(n - 1, -1, -1, dtype=float)


def rls_init(ds: Dataset, kappa: float = 1.0) -> RLSState:
    """Start from the batch solution on ``ds`` with the same exponential weighting the updates apply."""
    if not 0 < kappa <= 1:
        raise ValueError("kappa must lie in (0, 1]")
    X, Y = _weighted(ds.X, ds.Y, forgetting_weights(ds.n_samples, kappa))
    require_full_rank(X)
    P = np.linalg.inv(X.T @ X)
    P = 0.5 * (P + P.T)
    beta = ols_solve(X, Y)
    return RLSState(beta, P, kappa, ds.n_samples, ds.schema)


def rls_update(state: RLSState, x_new, y_new) -> RLSState:
    x = np.asarray(x_new, dtype=float).reshape(-1)
    y = np.asarray(y_new, dtype=float).reshape(-1)
    P, k = state.P, state.kappa
    Px = P @ x
    gain = Px / (k + x @ Px)
    beta = state.beta + np.outer(gain, y - state.beta.T @ x)
    P_new = (P - np.outer(gain, Px)) / k
    P_new = 0.5 * (P_new + P_new.T)
    return RLSState(beta, P_new, k, state.t + 1, state.schema, state.history)


def rls_stream(state: RLSState, X, Y) -> RLSState:
    for x, y in zip(np.atleast_2d(X), np.atleast_2d(Y)):
        state = rls_update(state, x, y)
    return state
