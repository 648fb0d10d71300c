import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpfl.dataset import Dataset
from dpfl.errors import ClusterError, DegenerateDataError
from dpfl.ls import fit_ols
from dpfl.ridge import (RidgeSpec, fit_kplane_ridge, fit_locally_weighted_ridge, fit_ridge, kplane_cost,
                        locality_weights, ridge_solve)

from conftest import linear_dataset


def ridge_oracle(X, Y, lam):
    """Intercept-free centered closed form, written out independently."""
    Z = X[:, 1:]
    zm, ym = Z.mean(axis=0), Y.mean(axis=0)
    b = np.linalg.inv((Z - zm).T @ (Z - zm) + lam * np.eye(Z.shape[1])) @ (Z - zm).T @ (Y - ym)
    return np.vstack([ym - zm @ b, b])


def test_zero_lambda_is_ols():
    ds, _ = linear_dataset(noise=0.2)
    np.testing.assert_allclose(fit_ridge(ds).predict(ds.X), fit_ols(ds).predict(ds.X), atol=1e-8)


def test_matches_closed_form():
    ds, _ = linear_dataset(noise=0.2)
    np.testing.assert_allclose(fit_ridge(ds, RidgeSpec(lam=0.7)).beta, ridge_oracle(ds.X, ds.Y, 0.7), atol=1e-10)


def test_duplicate_column_finite():
    ds, _ = linear_dataset(n=30, d=3, noise=0.1)
    X = np.column_stack([ds.X, ds.X[:, 1]])
    m = fit_ridge(Dataset.from_arrays(X, ds.Y), RidgeSpec(lam=1e-3))
    assert np.all(np.isfinite(m.beta))


def test_strong_shrinkage():
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(100, 3))
    Z = (Z - Z.mean(axis=0)) / Z.std(axis=0)
    X = np.column_stack([np.ones(100), Z])
    ds = Dataset.from_arrays(X, X @ np.array([[1.0], [2.0], [-1.0], [0.5]]) + 0.1 * rng.normal(size=(100, 1)))
    b0 = fit_ridge(ds).beta[1:]
    b6 = fit_ridge(ds, RidgeSpec(lam=1e6)).beta[1:]
    assert np.all(np.abs(b6) < 1e-3 * np.abs(b0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_norm_monotone_in_lambda(seed):
    ds, _ = linear_dataset(n=30, d=4, m=2, noise=0.5, seed=seed)
    norms = [np.linalg.norm(fit_ridge(ds, RidgeSpec(lam=lam)).beta[1:]) for lam in (0, 1e-4, 1e-2, 1, 100)]
    assert np.all(np.diff(norms) <= 1e-12 * norms[0])


def test_negative_lambda_rejected():
    with pytest.raises(ValueError):
        RidgeSpec(lam=-1.0)


def test_locality_weights_formula():
    ds, _ = linear_dataset(n=20, d=3)
    xt = np.array([1.0, 0.2, -0.4])
    d2 = np.array([np.sum((x[1:] - xt[1:]) ** 2) for x in ds.X])
    np.testing.assert_allclose(locality_weights(ds.X, xt, 0.8), np.exp(-d2 / (2 * 0.8 ** 2)), rtol=1e-12)


def test_wide_bandwidth_is_ridge():
    ds, _ = linear_dataset(noise=0.3)
    m = fit_locally_weighted_ridge(ds, RidgeSpec(lam=0.1, tau=1e6), ds.X[0])
    np.testing.assert_allclose(m.beta, fit_ridge(ds, RidgeSpec(lam=0.1)).beta, atol=1e-6)


def test_unit_weights_same_code_path():
    ds, _ = linear_dataset(noise=0.3)
    a = ridge_solve(ds.X, ds.Y, 0.3, np.ones(ds.n_samples))
    np.testing.assert_allclose(a, fit_ridge(ds, RidgeSpec(lam=0.3)).beta, atol=1e-12)


def test_narrow_bandwidth_interpolates():
    ds, _ = linear_dataset(n=50, d=3, m=1, noise=0.5, seed=2)
    scale = np.ptp(ds.X[:, 1:])
    i = 17
    m = fit_locally_weighted_ridge(ds, RidgeSpec(lam=1e-6, tau=1e-3 * scale), ds.X[i])
    assert abs(m.predict(ds.X[i])[0, 0] - ds.Y[i, 0]) < 1e-3


def test_all_weights_underflow():
    ds, _ = linear_dataset(n=20, d=3)
    with pytest.raises(DegenerateDataError):
        fit_locally_weighted_ridge(ds, RidgeSpec(lam=0.1, tau=1e-3), [1.0, 1e3, 1e3])


def test_kplane_k1_is_ridge():
    ds, _ = linear_dataset(noise=0.3)
    m = fit_kplane_ridge(ds, RidgeSpec(lam=0.2, K=1))
    np.testing.assert_allclose(m.betas[0], fit_ridge(ds, RidgeSpec(lam=0.2)).beta, atol=1e-12)


def _two_planes(seed=0):
    rng = np.random.default_rng(seed)
    xa = rng.uniform(-10, -4, (60, 2))
    xb = rng.uniform(4, 10, (60, 2))
    X = np.vstack([np.column_stack([np.ones(60), xa]), np.column_stack([np.ones(60), xb])])
    ba, bb = np.array([[1.0], [2.0], [-1.0]]), np.array([[-3.0], [-2.0], [4.0]])
    Y = np.vstack([X[:60] @ ba, X[60:] @ bb]) + 0.01 * rng.normal(size=(120, 1))
    return Dataset.from_arrays(X, Y)


def test_kplane_two_regimes():
    ds = _two_planes()
    m = fit_kplane_ridge(ds, RidgeSpec(lam=0.01, eta=0.0, K=2))
    ka = int(np.argmin(m.centroids[:, 1]))
    np.testing.assert_allclose(m.betas[ka], ridge_oracle(ds.X[:60], ds.Y[:60], 0.01), atol=1e-6)
    np.testing.assert_allclose(m.betas[1 - ka], ridge_oracle(ds.X[60:], ds.Y[60:], 0.01), atol=1e-6)
    assert m.metadata["converged"]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.0, 0.1, 1.0]), st.integers(2, 3))
def test_kplane_cost_non_increasing(seed, eta, K):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(150), rng.uniform(-3, 3, (150, 2))])
    Y = np.abs(X[:, 1:2]) + np.sin(X[:, 2:3]) + 0.05 * rng.normal(size=(150, 1))
    try:
        m = fit_kplane_ridge(Dataset.from_arrays(X, Y), RidgeSpec(lam=0.01, eta=eta, K=K, seed=seed))
    except ClusterError:
        return  # an emptied cluster is reported, not hidden
    cost = np.array(m.metadata["cost"])
    assert np.all(np.diff(cost) <= 1e-9 * cost[0])
    assert m.metadata["iterations"] <= 100


def test_kplane_cost_function():
    ds = _two_planes()
    betas = np.zeros((2, 3, 1))
    cents = np.zeros((2, 3))
    labels = np.zeros(120, dtype=int)
    assert kplane_cost(ds.X, ds.Y, betas, cents, labels, 0.0, 1.0) == pytest.approx(np.sum(ds.Y ** 2))


def test_kplane_underdetermined():
    ds, _ = linear_dataset(n=8, d=3)
    with pytest.raises(ClusterError):
        fit_kplane_ridge(ds, RidgeSpec(K=4))
