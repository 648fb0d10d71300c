import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpfl.dataset import Dataset
from dpfl.errors import ClusterError, RankDeficientError
from dpfl.ls import (GLSSpec, HuberSpec, WTLSSpec, ar1_covariance, fit_clustered_ls, fit_gls, fit_huber, fit_ols,
                     fit_ols_decomposed, fit_tls, fit_wtls, forgetting_weights, huber_loss, rls_init, rls_stream,
                     rls_update)
from dpfl.models import PiecewiseLinearModel, predict_piecewise

from conftest import linear_dataset


def pinv_oracle(X, Y, w=None):
    if w is not None:
        s = np.sqrt(w)[:, None]
        X, Y = X * s, Y * s
    return np.linalg.pinv(X.T @ X) @ X.T @ Y


def zoom_grid_min(f, center, half, rounds=7, pts=81):
    """Coarse-to-fine exhaustive grid search for a 2-parameter objective."""
    c = np.asarray(center, dtype=float)
    best = None
    for _ in range(rounds):
        g0 = np.linspace(c[0] - half, c[0] + half, pts)
        g1 = np.linspace(c[1] - half, c[1] + half, pts)
        vals = np.array([[f(np.array([a, b])) for b in g1] for a in g0])
        i, j = np.unravel_index(np.argmin(vals), vals.shape)
        c = np.array([g0[i], g1[j]])
        best = vals[i, j]
        half *= 4.0 / pts * 2
    return c, best


def test_ols_exact_toy():
    ds = Dataset.from_arrays([[1, 1], [1, 2], [1, 3]], [[2], [4], [6]])
    np.testing.assert_allclose(fit_ols(ds).beta, [[0.0], [2.0]], atol=1e-12)


def test_ols_rank_error():
    ds, _ = linear_dataset(n=20, d=3)
    X = np.column_stack([ds.X, ds.X[:, 2]])
    with pytest.raises(RankDeficientError):
        fit_ols(Dataset.from_arrays(X, ds.Y))


def test_ols_matches_pinv():
    rng = np.random.default_rng(5)
    X = np.column_stack([np.ones(10), rng.normal(size=(10, 2))])
    Y = rng.normal(size=(10, 2))
    np.testing.assert_allclose(fit_ols(Dataset.from_arrays(X, Y)).beta, pinv_oracle(X, Y), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_ols_residual_orthogonal(seed, d):
    ds, _ = linear_dataset(n=40, d=d, m=2, noise=0.3, seed=seed)
    m = fit_ols(ds)
    g = ds.X.T @ (ds.Y - m.predict(ds.X))
    assert np.abs(g).max() < 1e-8 * max(np.abs(ds.X.T @ ds.Y).max(), 1.0)


@pytest.mark.parametrize("method", ["cod", "svd"])
def test_decomposed_full_rank(method):
    ds, _ = linear_dataset(noise=0.1)
    np.testing.assert_allclose(fit_ols_decomposed(ds, method).beta, fit_ols(ds).beta, atol=1e-10)


@pytest.mark.parametrize("method", ["cod", "svd"])
def test_decomposed_duplicate_column(method):
    ds, _ = linear_dataset(n=30, d=3, noise=0.1)
    X = np.column_stack([ds.X, ds.X[:, 1]])
    dup = Dataset.from_arrays(X, ds.Y)
    m = fit_ols_decomposed(dup, method)
    assert np.all(np.isfinite(m.beta))
    np.testing.assert_allclose(m.predict(X), X @ np.linalg.pinv(X) @ ds.Y, atol=1e-8)


def test_cod_and_svd_agree_rank_deficient():
    ds, _ = linear_dataset(n=30, d=4, noise=0.1)
    X = np.column_stack([ds.X, ds.X[:, 1] - 2 * ds.X[:, 3]])
    dup = Dataset.from_arrays(X, ds.Y)
    a = fit_ols_decomposed(dup, "cod").predict(X)
    b = fit_ols_decomposed(dup, "svd").predict(X)
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_decomposed_zero_matrix():
    X = np.column_stack([np.ones(5), np.zeros(5)])
    m = fit_ols_decomposed(Dataset.from_arrays(X, np.zeros((5, 1))), "svd")
    np.testing.assert_array_equal(m.beta, 0.0)


# -- Huber -----------------------------------------------------------------------

def test_huber_large_delta_is_ols():
    ds, _ = linear_dataset(noise=0.1)
    np.testing.assert_allclose(fit_huber(ds, HuberSpec(delta=1e6)).beta, fit_ols(ds).beta, atol=1e-8)


def test_huber_grid_search_toy():
    X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
    y = np.array([0.0, 1.0, 10.0])
    m = fit_huber(Dataset.from_arrays(X, y[:, None]), HuberSpec(delta=0.5))
    obj = lambda b: huber_loss(y - X @ b, 0.5).sum()
    _, best = zoom_grid_min(obj, [0.0, 0.0], 20.0)
    assert abs(obj(m.beta[:, 0]) - best) < 1e-3
    assert obj(m.beta[:, 0]) <= best + 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_huber_objective_monotone(seed):
    ds, _ = linear_dataset(n=50, d=3, m=1, noise=0.5, seed=seed)
    Y = ds.Y.copy()
    Y[::7] += 8.0
    m = fit_huber(ds.with_data(Y=Y))
    hist = np.array(m.metadata["objective"][0])
    assert np.all(np.diff(hist) <= 1e-10 * (1 + hist[:-1]))


def test_huber_rejects_nonpositive_delta():
    with pytest.raises(ValueError):
        HuberSpec(delta=0.0)


# -- GLS -----------------------------------------------------------------------------

@pytest.mark.parametrize("c", [1.0, 0.01, 37.0])
def test_gls_scaled_identity_is_ols(c):
    ds, _ = linear_dataset(noise=0.2)
    m = fit_gls(ds, GLSSpec(c * np.eye(ds.n_samples)))
    np.testing.assert_allclose(m.beta, fit_ols(ds).beta, atol=1e-8)


def test_gls_diagonal_is_weighted_ols():
    ds, _ = linear_dataset(n=40, noise=0.2)
    om = np.random.default_rng(1).uniform(0.2, 3.0, 40)
    m = fit_gls(ds, GLSSpec(np.diag(om)))
    np.testing.assert_allclose(m.beta, pinv_oracle(ds.X, ds.Y, 1.0 / om), atol=1e-10)


def test_gls_ar1_matches_explicit_formula():
    ds, _ = linear_dataset(n=30, noise=0.2)
    Om = ar1_covariance(30, 0.6)
    Oi = np.linalg.inv(Om)
    want = np.linalg.solve(ds.X.T @ Oi @ ds.X, ds.X.T @ Oi @ ds.Y)
    np.testing.assert_allclose(fit_gls(ds, GLSSpec(Om)).beta, want, atol=1e-10)


def test_gls_rejects_indefinite():
    ds, _ = linear_dataset(n=10)
    Om = np.eye(10)
    Om[0, 0] = -1
    with pytest.raises(ValueError):
        fit_gls(ds, GLSSpec(Om))


# -- TLS / WTLS ----------------------------------------------------------------------

def test_tls_exact_recovery():
    ds, beta = linear_dataset()
    np.testing.assert_allclose(fit_tls(ds).beta, beta, atol=1e-10)


def test_tls_closed_form_single_response():
    ds, _ = linear_dataset(n=50, d=3, m=1, noise=0.2)
    lam = np.linalg.svd(np.hstack([ds.X, ds.Y]), compute_uv=False)[-1]
    want = np.linalg.solve(ds.X.T @ ds.X - lam ** 2 * np.eye(3), ds.X.T @ ds.Y)
    np.testing.assert_allclose(fit_tls(ds).beta, want, atol=1e-8)


def test_wtls_isotropic_matches_tls_objective():
    ds, _ = linear_dataset(n=60, d=3, m=2, noise=0.05, seed=3)
    s2 = 0.05 ** 2
    m = fit_wtls(ds, WTLSSpec(np.full(5, s2), tol=1e-12, max_iter=5000))
    tls = fit_tls(ds).metadata["objective"]
    assert abs(m.metadata["objective"][-1] * s2 - tls) <= 1e-6 * max(tls, 1.0)


def test_wtls_zero_noise():
    ds, beta = linear_dataset()
    m = fit_wtls(ds, WTLSSpec(np.r_[0.0, np.full(3 + 2, 1e-4)]))
    np.testing.assert_allclose(m.beta, beta, atol=1e-8)
    assert m.metadata["objective"][-1] < 1e-16


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_wtls_objective_non_increasing(seed):
    ds, _ = linear_dataset(n=40, d=3, m=2, noise=0.1, seed=seed)
    sig = np.random.default_rng(seed).uniform(0.001, 0.01, 5)
    sig[0] = 0.0
    hist = np.array(fit_wtls(ds, WTLSSpec(sig)).metadata["objective"])
    assert np.all(np.diff(hist) <= 1e-12 * hist[:-1])


# -- clustered LS and piecewise prediction -------------------------------------------

def test_clustered_k1_is_ols():
    ds, _ = linear_dataset(noise=0.2)
    m = fit_clustered_ls(ds, 1)
    np.testing.assert_allclose(m.betas[0], fit_ols(ds).beta, atol=1e-10)


@pytest.mark.parametrize("clusterer", ["kmeans", "gmm"])
def test_clustered_two_regimes(clusterer):
    rng = np.random.default_rng(2)
    xa = rng.uniform(-10, -5, (40, 2))
    xb = rng.uniform(5, 10, (40, 2))
    X = np.vstack([np.column_stack([np.ones(40), xa]), np.column_stack([np.ones(40), xb])])
    ba, bb = np.array([[1.0], [2.0], [-1.0]]), np.array([[-3.0], [0.5], [4.0]])
    Y = np.vstack([X[:40] @ ba, X[40:] @ bb]) + 0.01 * rng.normal(size=(80, 1))
    m = fit_clustered_ls(Dataset.from_arrays(X, Y), 2, clusterer=clusterer)
    ka = int(np.argmin(m.centroids[:, 1]))
    np.testing.assert_allclose(m.betas[ka], pinv_oracle(X[:40], Y[:40]), atol=1e-8)
    np.testing.assert_allclose(m.betas[1 - ka], pinv_oracle(X[40:], Y[40:]), atol=1e-8)


def test_clustered_underdetermined():
    ds, _ = linear_dataset(n=12, d=3)
    with pytest.raises(ClusterError):
        fit_clustered_ls(ds, 12)


def _pw_model():
    ds, _ = linear_dataset(n=5, d=3, m=1)
    betas = np.array([[[1.0], [0.0], [0.0]], [[2.0], [0.0], [0.0]], [[3.0], [1.0], [1.0]]])
    cents = np.array([[1.0, 0.0, 0.0], [1.0, 2.0, 0.0], [1.0, 5.0, 5.0]])
    return PiecewiseLinearModel(betas, cents, ds.schema)


def test_piecewise_centroid_uses_own_segment():
    m = _pw_model()
    np.testing.assert_allclose(m.predict(m.centroids[1]), [[2.0]])


def test_piecewise_tie_goes_to_lowest_index():
    m = _pw_model()
    assert m.segment([[1.0, 1.0, 0.0]])[0] == 0
    np.testing.assert_allclose(predict_piecewise(m, [[1.0, 1.0, 0.0]]), [[1.0]])


def test_piecewise_matches_distance_scan():
    m = _pw_model()
    X = np.column_stack([np.ones(50), np.random.default_rng(0).uniform(-2, 7, (50, 2))])
    want = []
    for x in X:
        d = [np.sum((x - c) ** 2) for c in m.centroids]
        want.append(x @ m.betas[int(np.argmin(d))])
    np.testing.assert_allclose(predict_piecewise(m, X), np.array(want), atol=1e-14)


# -- RLS -----------------------------------------------------------------------------

def test_rls_unit_forgetting_is_ols():
    ds, _ = linear_dataset(n=80, d=4, m=2, noise=0.3)
    state = rls_stream(rls_init(ds.rows(np.arange(10)), 1.0), ds.X[10:], ds.Y[10:])
    np.testing.assert_allclose(state.beta, fit_ols(ds).beta, atol=1e-8)
    np.testing.assert_allclose(state.P, state.P.T, atol=0)
    assert np.all(np.linalg.eigvalsh(state.P) > 0)


def test_rls_zero_innovation():
    ds, _ = linear_dataset(n=30, d=3, m=2, noise=0.3)
    s = rls_init(ds, 0.9)
    x = np.array([1.0, 0.3, -2.0])
    s2 = rls_update(s, x, s.beta.T @ x)
    np.testing.assert_allclose(s2.beta, s.beta, atol=1e-12)


def test_rls_forgetting_matches_weighted_oracle():
    ds, _ = linear_dataset(n=40, d=3, m=2, noise=0.3, seed=4)
    state = rls_stream(rls_init(ds.rows(np.arange(20)), 0.5), ds.X[20:], ds.Y[20:])
    w = forgetting_weights(40, 0.5)
    np.testing.assert_allclose(state.beta, pinv_oracle(ds.X, ds.Y, w), atol=1e-6)


def test_rls_init_rank_deficient():
    ds, _ = linear_dataset(n=2, d=3)
    with pytest.raises(RankDeficientError):
        rls_init(ds)


def test_forgetting_weights():
    np.testing.assert_allclose(forgetting_weights(3, 0.5), [0.25, 0.5, 1.0])
    with pytest.raises(ValueError):
        forgetting_weights(3, 0.0)
