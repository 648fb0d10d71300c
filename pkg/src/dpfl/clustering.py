"""Partitioning of the predictor space for the piecewise trainers."""

import numpy as np

from .errors import ClusterError


def farthest_point_init(Z, K: int, seed: int = 0) -> np.ndarray:
    """First center drawn with ``seed``; each next one is the point farthest from all chosen centers."""
    rng = np.random.default_rng(seed)
    idx = [int(rng.integers(len(Z)))]
    d = ((Z - Z[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        nxt = int(np.argmax(d))
        idx.append(nxt)
        d = np.minimum(d, ((Z - Z[nxt]) ** 2).sum(axis=1))
    return Z[idx].copy()


def nearest(Z, centers) -> np.ndarray:
    d = ((Z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def kmeans(Z, K: int, seed: int = 0, max_iter: int = 300):
    """Lloyd iterations from a farthest-point start. Returns ``(labels, centers)``."""
    Z = np.asarray(Z, dtype=float)
    if K > len(Z):
        raise ClusterError(f"cannot form {K} clusters from {len(Z)} points")
    centers = farthest_point_init(Z, K, seed)
    labels = nearest(Z, centers)
    for _ in range(max_iter):
        for k in range(K):
            members = Z[labels == k]
            if len(members):
                centers[k] = members.mean(axis=0)
        new = nearest(Z, centers)
        if np.array_equal(new, labels):
            break
        labels = new
    return labels, centers


def assign_clusters(Z, K: int, method: str = "kmeans", seed: int = 0) -> np.ndarray:
    if K == 1:
        return np.zeros(len(Z), dtype=int)
    if method == "kmeans":
        return kmeans(Z, K, seed)[0]
    if method == "gmm":
        from sklearn.mixture import GaussianMixture

        gm = GaussianMixture(n_components=K, covariance_type="full", random_state=seed, reg_covar=1e-9)
        return gm.fit_predict(np.asarray(Z, dtype=float))
    raise ValueError(f"unknown clusterer {method!r}")
