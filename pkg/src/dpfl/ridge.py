"""Ridge trainers: ordinary, locally weighted around a query point, and K-plane clustering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import kmeans
from .dataset import Dataset
from .errors import ClusterError, DegenerateDataError, OscillationError, RankDeficientError
from .ls import require_full_rank
from .models import LinearModel, PiecewiseLinearModel


@dataclass(frozen=True)
class RidgeSpec:
    lam: float = 0.0
    tau: float = 1.0
    eta: float = 0.0
    K: int = 1
    seed: int = 0
    max_iter: int = 100

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.K < 1:
            raise ValueError("K must be at least 1")


def ridge_solve(X, Y, lam: float, weights=None) -> np.ndarray:
    """Ridge on the intercept-free centered block; the intercept comes back from the (weighted) means.

    ``X`` carries the intercept in column 0, which is never penalized.
    """
    Xt = X[:, 1:]
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=float)
    sw = w.sum()
    if not sw > 0:
        raise DegenerateDataError("all sample weights are zero")
    xm = (w @ Xt) / sw
    ym = (w @ Y) / sw
    Xc = Xt - xm
    Yc = Y - ym
    A = Xc.T @ (Xc * w[:, None]) + lam * np.eye(Xt.shape[1])
    if lam == 0:
        require_full_rank(Xc * np.sqrt(w)[:, None], "centered X")
    try:
        b = np.linalg.solve(A, Xc.T @ (Yc * w[:, None]))
    except np.linalg.LinAlgError:
        raise RankDeficientError("ridge system is singular") from None
    return np.vstack([ym - xm @ b, b])


def fit_ridge(ds: Dataset, spec: RidgeSpec = RidgeSpec(), weights=None) -> LinearModel:
    beta = ridge_solve(ds.X, ds.Y, spec.lam, weights)
    return LinearModel(beta, ds.schema, ds.normalization, {"trainer": "ridge", "lambda": spec.lam})


def locality_weights(X, x_t, tau: float) -> np.ndarray:
    """``exp(-d_i^2 / (2 tau^2))`` with ``d_i`` the Euclidean distance between non-intercept predictors."""
    X = np.atleast_2d(X)
    x_t = np.asarray(x_t, dtype=float).reshape(-1)
    if x_t.shape[0] == X.shape[1]:
        x_t = x_t[1:]
    d2 = ((X[:, 1:] - x_t) ** 2).sum(axis=1)
    return np.exp(-d2 / (2.0 * tau * tau))


def fit_locally_weighted_ridge(ds: Dataset, spec: RidgeSpec, x_t) -> LinearModel:
    """Ridge fit whose samples are weighted by closeness to the query point ``x_t``."""
    w = locality_weights(ds.X, x_t, spec.tau)
    if not np.any(w > 0):
        raise DegenerateDataError("every locality weight underflowed to zero; increase tau")
    beta = ridge_solve(ds.X, ds.Y, spec.lam, w)
    return LinearModel(beta, ds.schema, ds.normalization,
                       {"trainer": "lw_ridge", "lambda": spec.lam, "tau": spec.tau})


def kplane_cost(X, Y, betas, centroids, labels, eta, lam) -> float:
    """``sum_i |y_i - x_i beta(l_i)|^2 + eta |x_i - mu(l_i)|^2`` plus the ridge penalties of all planes."""
    R = Y - np.einsum("nx,nxy->ny", X, betas[labels])
    D = X - centroids[labels]
    return float((R * R).sum() + eta * (D * D).sum() + lam * (betas[:, 1:, :] ** 2).sum())


def _reassign(X, Y, betas, centroids, eta):
    cost = np.empty((len(X), len(betas)))
    for k in range(len(betas)):
        r = Y - X @ betas[k]
        d = X - centroids[k]
        cost[:, k] = (r * r).sum(axis=1) + eta * (d * d).sum(axis=1)
    return np.argmin(cost, axis=1)


def fit_kplane_ridge(ds: Dataset, spec: RidgeSpec) -> PiecewiseLinearModel:
    """Alternate per-cluster ridge fits, centroid updates and joint-cost reassignment until assignments settle."""
    X, Y = ds.X, ds.Y
    K, nx = spec.K, X.shape[1]
    labels = np.zeros(len(X), dtype=int) if K == 1 else kmeans(X[:, 1:], K, spec.seed)[0]
    seen = {labels.tobytes()}
    history = []
    for it in range(spec.max_iter):
        sizes = np.bincount(labels, minlength=K)
        if np.any(sizes < nx):
            k = int(np.argmin(sizes))
            raise ClusterError(f"cluster {k} has {sizes[k]} members, fewer than N_x = {nx}")
        betas = np.array([ridge_solve(X[labels == k], Y[labels == k], spec.lam) for k in range(K)])
        centroids = np.array([X[labels == k].mean(axis=0) for k in range(K)])
        history.append(kplane_cost(X, Y, betas, centroids, labels, spec.eta, spec.lam))
        new = _reassign(X, Y, betas, centroids, spec.eta)
        if np.array_equal(new, labels):
            return _kplane_model(ds, spec, betas, centroids, history, sizes, it + 1, True)
        history.append(kplane_cost(X, Y, betas, centroids, new, spec.eta, spec.lam))
        key = new.tobytes()
        if key in seen:
            raise OscillationError(f"K-plane assignments cycle after {it + 1} iterations")
        seen.add(key)
        labels = new
    # iteration cap: keep the planes of the last completed pass
    sizes = np.bincount(labels, minlength=K)
    if np.any(sizes < nx):
        raise ClusterError("a cluster became underdetermined at the iteration cap")
    betas = np.array([ridge_solve(X[labels == k], Y[labels == k], spec.lam) for k in range(K)])
    centroids = np.array([X[labels == k].mean(axis=0) for k in range(K)])
    history.append(kplane_cost(X, Y, betas, centroids, labels, spec.eta, spec.lam))
    return _kplane_model(ds, spec, betas, centroids, history, sizes, spec.max_iter, False)


def _kplane_model(ds, spec, betas, centroids, history, sizes, iterations, converged):
    meta = {"trainer": "kplane_ridge", "lambda": spec.lam, "eta": spec.eta, "K": spec.K,
            "iterations": iterations, "converged": converged, "cost": history, "sizes": sizes.tolist()}
    return PiecewiseLinearModel(betas, centroids, ds.schema, ds.normalization, meta)
