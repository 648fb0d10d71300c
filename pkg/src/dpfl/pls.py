"""Partial least squares: NIPALS and SIMPLS decompositions, batch regression and recursive updating."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .dataset import Dataset
from .errors import ConvergenceError, DegenerateDataError, SingularMatrixError
from .models import LinearModel

INNER_TOL = 1e-10
INNER_MAX = 500


@dataclass(frozen=True, eq=False)
class PLSFactorization:
    """``X = T C^T + E`` and ``Y = U R^T + F`` on the (optionally centered) data.

    Scores in ``T`` have unit norm, so ``gamma_i = u_i^T t_i``. ``W`` holds
    the weights that map deflated X blocks to scores.
    """

    T: np.ndarray
    U: np.ndarray
    C: np.ndarray
    R: np.ndarray
    W: np.ndarray
    E: np.ndarray
    F: np.ndarray
    gamma: np.ndarray
    algo: str
    x_mean: np.ndarray
    y_mean: np.ndarray

    @property
    def n_components(self) -> int:
        return self.T.shape[1]

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (v if k == "algo" else np.asarray(v, dtype=float)) for k, v in d.items()})


def _nipals(X, Y, n_components, tol=INNER_TOL, max_iter=INNER_MAX):
    n, nx = X.shape
    ny = Y.shape[1]
    E, F = X.copy(), Y.copy()
    scale = max(np.linalg.norm(X), 1e-300)
    T, U, C, R, W, g = (np.zeros((n, n_components)), np.zeros((n, n_components)), np.zeros((nx, n_components)),
                        np.zeros((ny, n_components)), np.zeros((nx, n_components)), np.zeros(n_components))
    for h in range(n_components):
        if np.linalg.norm(E) <= 1e-12 * scale:
            raise DegenerateDataError(f"X has no variance left after {h} components")
        u = F[:, np.argmax((F * F).sum(axis=0))].copy()
        if np.linalg.norm(E.T @ u) <= 1e-12 * scale * max(np.linalg.norm(u), 1e-300):
            # Y carries nothing more that X can explain; continue along the dominant X direction
            u = E[:, np.argmax((E * E).sum(axis=0))].copy()
        t_old = None
        for _ in range(max_iter):
            w = E.T @ u
            t = E @ w
            tn = np.linalg.norm(t)
            w, t = w / tn, t / tn
            q = F.T @ t
            qn = np.linalg.norm(q)
            q = q / qn if qn > 0 else q
            u_new = F @ q
            if t_old is not None and np.linalg.norm(t - t_old) < tol:
                break
            t_old = t
            if np.linalg.norm(u_new) > 1e-14 * max(np.linalg.norm(F), 1e-300):
                u = u_new
            else:
                break
        else:
            # the loop is a power iteration on E^T F F^T E; a near-tied top eigenvalue stalls it,
            # so finish with the eigenvector it is converging to
            vecs = np.linalg.eigh(E.T @ F @ (F.T @ E))[1]
            w_eig = vecs[:, -1] * (1.0 if vecs[:, -1] @ w >= 0 else -1.0)
            t = E @ w_eig
            tn = np.linalg.norm(t)
            if not (np.isfinite(tn) and tn > 0):
                raise ConvergenceError(f"NIPALS inner loop did not converge for component {h + 1}")
            w, t = w_eig / tn, t / tn
            q = F.T @ t
            qn = np.linalg.norm(q)
            q = q / qn if qn > 0 else q
        u = F @ q if qn > 0 else u
        c = E.T @ t
        gamma = u @ t
        E = E - np.outer(t, c)
        F = F - gamma * np.outer(t, q)
        T[:, h], U[:, h], C[:, h], R[:, h], W[:, h], g[h] = t, u, c, q, w, gamma
    return T, U, C, R, W, E, F, g


def _simpls(X, Y, n_components):
    """de Jong's recursion: weights from the dominant direction of the deflated cross-product ``S = X^T Y``."""
    n, nx = X.shape
    ny = Y.shape[1]
    S = X.T @ Y
    T, U, C, R, W, g = (np.zeros((n, n_components)), np.zeros((n, n_components)), np.zeros((nx, n_components)),
                        np.zeros((ny, n_components)), np.zeros((nx, n_components)), np.zeros(n_components))
    V = np.zeros((nx, n_components))
    for h in range(n_components):
        if np.linalg.norm(S) > 1e-12 * max(np.linalg.norm(X.T @ Y), 1e-300):
            left, _, _ = np.linalg.svd(S, full_matrices=False)
            r = left[:, 0]
        else:
            # cross-products exhausted: pick the dominant X direction orthogonal to earlier loadings
            Vh = V[:, :h]
            Xp = X - X @ Vh @ Vh.T if h else X
            r = np.linalg.svd(Xp, full_matrices=False)[2][0]
        t = X @ r
        tn = np.linalg.norm(t)
        if tn <= 1e-12 * max(np.linalg.norm(X), 1e-300):
            raise DegenerateDataError(f"X has no variance left after {h} components")
        t, r = t / tn, r / tn
        c = X.T @ t
        q = Y.T @ t
        u = Y @ q
        v = c.copy()
        if h:
            v -= V[:, :h] @ (V[:, :h].T @ c)
        v /= np.linalg.norm(v)
        S = S - np.outer(v, v @ S)
        T[:, h], U[:, h], C[:, h], W[:, h], V[:, h] = t, u, c, r, v
        qn = np.linalg.norm(q)
        R[:, h] = q / qn if qn > 0 else q
        g[h] = u @ t
    E = X - T @ C.T
    F = Y - T @ (T.T @ Y)
    return T, U, C, R, W, E, F, g


def pls_decompose(ds: Dataset, n_components: int, algo: str = "nipals", center: bool = True) -> PLSFactorization:
    """Decompose ``ds``. With ``center`` the intercept column is dropped and the rest mean-centered."""
    X, Y, xm, ym = _prepared(ds.X, ds.Y, center)
    return _decompose(X, Y, n_components, algo, xm, ym)


def _prepared(X, Y, center):
    if center:
        Xt = X[:, 1:]
        xm, ym = Xt.mean(axis=0), Y.mean(axis=0)
        return Xt - xm, Y - ym, xm, ym
    return X.copy(), Y.copy(), np.zeros(X.shape[1]), np.zeros(Y.shape[1])


def _decompose(X, Y, n_components, algo, xm, ym):
    if not 1 <= n_components <= X.shape[1]:
        raise ValueError(f"n_components must lie in [1, {X.shape[1]}], got {n_components}")
    if not np.any(X):
        raise DegenerateDataError("X has zero variance")
    if algo == "nipals":
        parts = _nipals(X, Y, n_components)
    elif algo == "simpls":
        parts = _simpls(X, Y, n_components)
    else:
        raise ValueError(f"unknown PLS algorithm {algo!r}")
    return PLSFactorization(*parts, algo, xm, ym)


def pls_coefficients(X, Y, T, U) -> np.ndarray:
    """``X^T U (T^T X X^T U)^{-1} T^T Y``."""
    XtU = X.T @ U
    M = T.T @ X @ XtU
    if np.linalg.cond(M) > 1e14:
        raise SingularMatrixError("T^T X X^T U is singular")
    return XtU @ np.linalg.solve(M, T.T @ Y)


def max_components(ds: Dataset, center: bool = True) -> int:
    return ds.schema.n_x - 1 if center else ds.schema.n_x


def fit_pls(ds: Dataset, n_components: Optional[int] = None, algo: str = "nipals", center: bool = True,
            weights=None) -> LinearModel:
    """PLS regression folded back into intercept-plus-slopes form.

    ``n_components=None`` uses every available component (``N_x - 1`` when
    centering, since the intercept column is removed).
    """
    X, Y = ds.X, ds.Y
    if weights is not None:
        s = np.sqrt(np.asarray(weights, dtype=float))[:, None]
        if center:
            # weighted centering keeps the weighted normal equations intact
            w = s[:, 0] ** 2
            xm = (w @ X[:, 1:]) / w.sum()
            ym = (w @ Y) / w.sum()
            Xc, Yc = (X[:, 1:] - xm) * s, (Y - ym) * s
        else:
            Xc, Yc, xm, ym = X * s, Y * s, np.zeros(X.shape[1]), np.zeros(Y.shape[1])
    else:
        Xc, Yc, xm, ym = _prepared(X, Y, center)
    n_components = Xc.shape[1] if n_components is None else n_components
    fac = _decompose(Xc, Yc, n_components, algo, xm, ym)
    if algo == "nipals":
        b = pls_coefficients(Xc, Yc, fac.T, fac.U)
    else:
        # SIMPLS scores are T = X W directly, so the regression is W T^T Y
        b = fac.W @ (fac.T.T @ Yc)
    beta = _fold(b, fac.x_mean, fac.y_mean, center)
    return LinearModel(beta, ds.schema, ds.normalization,
                       {"trainer": f"pls_{algo}", "n_components": n_components, "centered": center})


def _fold(b, xm, ym, center):
    if not center:
        return b
    return np.vstack([ym - xm @ b, b])


# ---------------------------------------------------------------------------
# recursive PLS

@dataclass(frozen=True, eq=False)
class RPLSState:
    """Compressed history ``(C, gamma, R)`` of an uncentered NIPALS factorization.

    The intercept column stays in X (no centering) so that the stacked update
    rows carry the constant term too.
    """

    factorization: PLSFactorization
    beta: np.ndarray
    forgetting: float
    t: int
    n_components: int
    schema: object = None
    timings: list = field(default_factory=list)

    def model(self) -> LinearModel:
        return LinearModel(self.beta, self.schema, metadata={
            "trainer": "rpls", "forgetting": self.forgetting, "n_components": self.n_components, "t": self.t})


def rpls_init(ds: Dataset, n_components: Optional[int] = None, forgetting: float = 1.0) -> RPLSState:
    if not 0 < forgetting <= 1:
        raise ValueError("forgetting factor must lie in (0, 1]")
    n_components = ds.schema.n_x if n_components is None else n_components
    X, Y = ds.X.copy(), ds.Y.copy()
    fac = _decompose(X, Y, n_components, "nipals", np.zeros(X.shape[1]), np.zeros(Y.shape[1]))
    beta = pls_coefficients(X, Y, fac.T, fac.U)
    return RPLSState(fac, beta, forgetting, ds.n_samples, n_components, ds.schema)


def rpls_update(state: RPLSState, x_new, y_new) -> RPLSState:
    """Decompose ``[w C^T; x]`` and ``[w Gamma R^T; y]`` (``N_p + 1`` rows) and refresh the coefficients."""
    fac = state.factorization
    x = np.asarray(x_new, dtype=float).reshape(1, -1)
    y = np.asarray(y_new, dtype=float).reshape(1, -1)
    w = state.forgetting
    Xs = np.vstack([w * fac.C.T, x])
    Ys = np.vstack([w * (fac.gamma[:, None] * fac.R.T), y])
    k = min(state.n_components, np.linalg.matrix_rank(Xs))
    new = _decompose(Xs, Ys, k, "nipals", fac.x_mean, fac.y_mean)
    beta = pls_coefficients(Xs, Ys, new.T, new.U)
    return replace(state, factorization=new, beta=beta, t=state.t + 1)


def rpls_stream(state: RPLSState, X, Y) -> RPLSState:
    for x, y in zip(np.atleast_2d(X), np.atleast_2d(Y)):
        state = rpls_update(state, x, y)
    return state
