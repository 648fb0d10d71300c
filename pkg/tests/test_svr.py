import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpfl import _smo_py, svr
from dpfl.dataset import Dataset
from dpfl.models import Kernel, KernelModel, kernel_eval, load_model, predict_kernel, save_model
from dpfl.svr import SVRSpec, fit_kernel_svr, fit_svr, svr_objectives

from conftest import linear_dataset

try:
    from dpfl import _smo
except ImportError:
    _smo = None

cp = pytest.importorskip("cvxpy")


def small_problem(n=30, seed=0, noise=0.05):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.uniform(-1, 1, (n, 2))])
    y = X @ np.array([0.5, 1.0, -0.7]) + noise * rng.normal(size=n)
    return Dataset.from_arrays(X, y[:, None])


def converged(m):
    return all(i["converged"] for i in m.metadata["solver"])


def test_exact_data_inside_tube():
    ds, _ = linear_dataset(n=30, d=3, m=2)
    m = fit_svr(ds, SVRSpec(omega=10.0, epsilon=0.1))
    assert converged(m)
    assert np.abs(m.predict(ds.X) - ds.Y).max() <= 0.1 + 1e-6


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.1, 1.0]), st.sampled_from([0.0, 0.01, 0.1]))
def test_duality_gap(seed, omega, eps):
    ds = small_problem(seed=seed)
    m = fit_svr(ds, SVRSpec(omega=omega, epsilon=eps))
    for info in m.metadata["solver"]:
        assert info["converged"]
        assert info["gap"] < 1e-6 * (1 + abs(info["primal"]))
        assert info["kkt"] < 1e-6


def test_three_point_dual_matches_grid_search():
    X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
    y = np.array([0.0, 1.5, 1.0])
    eps, omega = 0.1, 1.0
    K = X @ X.T
    m = fit_svr(Dataset.from_arrays(X, y[:, None]), SVRSpec(omega=omega, epsilon=eps))
    got = m.metadata["solver"][0]["dual"]

    def dual(a):
        return a @ y - eps * np.abs(a).sum() - 0.5 * a @ K @ a

    center, half, best = np.zeros(3), omega, -np.inf
    for _ in range(8):
        axis = [np.clip(np.linspace(c - half, c + half, 41), -omega, omega) for c in center]
        cands = np.array(list(itertools.product(*axis)))
        vals = [dual(a) for a in cands]
        k = int(np.argmax(vals))
        best, center = vals[k], cands[k]
        half /= 5.0
    assert abs(got - best) < 1e-4
    assert got >= best - 1e-9


def test_primal_oracle_with_extra_lambda():
    ds = small_problem(n=25, seed=4, noise=0.2)
    X, y = ds.X, ds.Y[:, 0]
    lam, omega, eps = 0.5, 2.0, 0.05
    m = fit_svr(ds, SVRSpec(omega=omega, epsilon=eps, extra_lambda=lam, tol=1e-9))
    assert converged(m) and m.metadata["trainer"] == "svr_l2"
    b = cp.Variable(3)
    obj = (0.5 + lam) * cp.sum_squares(b) + omega * cp.sum(cp.pos(cp.abs(y - X @ b) - eps))
    prob = cp.Problem(cp.Minimize(obj))
    prob.solve(solver="CLARABEL", tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    np.testing.assert_allclose(m.beta[:, 0], b.value, atol=1e-6)


def test_extra_lambda_is_rescaled_omega():
    ds = small_problem(seed=2)
    a = fit_svr(ds, SVRSpec(omega=3.0, extra_lambda=1.0))
    b = fit_svr(ds, SVRSpec(omega=1.0))
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-12)


def test_omega_monotone_training_loss():
    ds = small_problem(n=40, seed=8, noise=0.3)
    eps = 0.05
    losses = []
    for omega in (0.1, 1.0, 10.0, 100.0):
        m = fit_svr(ds, SVRSpec(omega=omega, epsilon=eps, max_updates=10**6))
        assert converged(m)
        losses.append(np.maximum(np.abs(m.predict(ds.X) - ds.Y) - eps, 0).sum())
    assert np.all(np.diff(losses) <= 1e-8)


def test_per_response_epsilon():
    ds, _ = linear_dataset(n=30, d=3, m=2, noise=0.2)
    m = fit_svr(ds, SVRSpec(omega=1.0, epsilon_per_response=(0.0, 0.5)))
    K = ds.X @ ds.X.T
    A = np.linalg.lstsq(ds.X.T, m.beta, rcond=None)[0]
    p0, _ = svr_objectives(K, ds.Y[:, 0], A[:, 0], 0.0, 1.0)
    assert p0 == pytest.approx(m.metadata["solver"][0]["primal"], rel=1e-6)


def test_spec_validation():
    with pytest.raises(ValueError):
        SVRSpec(omega=0.0)
    with pytest.raises(ValueError):
        SVRSpec(epsilon=-1.0)


# -- kernels ---------------------------------------------------------------------------

def test_kernel_values():
    assert kernel_eval(Kernel("linear"), [1.0, 0.0], [1.0, 0.0]) == 1.0
    assert kernel_eval(Kernel("rbf", gamma=3.0), [0.3, -2.0], [0.3, -2.0]) == 1.0
    assert kernel_eval(Kernel("polynomial", degree=2, coef=0.0), [1.0, 0.0], [1.0, 1.0]) == 1.0
    assert kernel_eval(Kernel("sigmoid", gamma=0.5, coef=0.1), [1.0], [2.0]) == pytest.approx(np.tanh(1.1))


def test_kernel_dimension_mismatch():
    with pytest.raises(ValueError):
        kernel_eval(Kernel(), [1.0, 2.0], [1.0])


def test_sigmoid_overflow_reported():
    with pytest.raises(OverflowError):
        Kernel("polynomial", degree=9, coef=0.0).gram(np.full((2, 2), 1e40), np.full((2, 2), 1e40))


def test_rbf_gram_psd():
    X = np.random.default_rng(0).normal(size=(50, 3))
    assert np.linalg.eigvalsh(Kernel("rbf", gamma=0.7).gram(X, X)).min() > -1e-8


def test_linear_kernel_matches_primal():
    ds = small_problem(seed=5, noise=0.2)
    spec = SVRSpec(omega=1.0, epsilon=0.01)
    lin = fit_svr(ds, spec)
    ker = fit_kernel_svr(ds, spec, Kernel("linear"))
    Xq = np.column_stack([np.ones(20), np.random.default_rng(1).uniform(-2, 2, (20, 2))])
    np.testing.assert_allclose(ker.predict(Xq), lin.predict(Xq), atol=1e-4)
    # representer check: sum_i a_i (x_i^T x + 1) equals beta^T x
    expansion = ker.dual_coefs.T @ (ker.support_x @ Xq[:, 1:].T + 1.0)
    np.testing.assert_allclose(expansion.T, Xq @ lin.beta, atol=1e-4)


def test_rbf_beats_linear_on_nonlinear_target():
    rng = np.random.default_rng(3)
    Z = rng.uniform(-2, 2, (160, 1))
    X = np.column_stack([np.ones(160), Z])
    y = np.sin(2 * Z[:, 0]) + 0.02 * rng.normal(size=160)
    tr, te = Dataset.from_arrays(X[:120], y[:120, None]), Dataset.from_arrays(X[120:], y[120:, None])
    spec = SVRSpec(omega=10.0, epsilon=0.01)
    rmse = lambda m: np.sqrt(np.mean((m.predict(te.X) - te.Y) ** 2))
    assert rmse(fit_kernel_svr(tr, spec, Kernel("rbf", gamma=2.0))) < rmse(fit_kernel_svr(tr, spec, Kernel("linear")))


def test_zero_duals_predict_intercept():
    ds = small_problem()
    m = KernelModel(Kernel("rbf"), np.zeros((3, 1)), ds.X[:3, 1:], np.array([0.42]), ds.schema)
    np.testing.assert_allclose(predict_kernel(m, ds.X[:5]), 0.42)


def test_interpolating_fit_stays_in_tube():
    rng = np.random.default_rng(6)
    Z = rng.uniform(-1, 1, (20, 1))
    X = np.column_stack([np.ones(20), Z])
    y = np.cos(3 * Z[:, 0])
    eps = 0.01
    m = fit_kernel_svr(Dataset.from_arrays(X, y[:, None]), SVRSpec(omega=1e3, epsilon=eps), Kernel("rbf", gamma=5.0))
    assert m.metadata["solver"][0]["converged"]
    assert np.abs(m.predict(X)[:, 0] - y).max() <= eps + 1e-6
    assert np.abs(m.dual_coefs).max() <= 1e3


def test_kernel_model_round_trip(tmp_path):
    ds = small_problem()
    m = fit_kernel_svr(ds, SVRSpec(omega=1.0), Kernel("polynomial", degree=2, coef=1.0))
    save_model(m, tmp_path / "k.json")
    back = load_model(tmp_path / "k.json")
    np.testing.assert_array_equal(back.predict(ds.X), m.predict(ds.X))


# -- solver backends ---------------------------------------------------------------------

@pytest.mark.skipif(_smo is None, reason="compiled solver not built")
def test_backends_agree():
    ds = small_problem(n=60, seed=1, noise=0.3)
    K = ds.X @ ds.X.T
    y = ds.Y[:, 0]
    a = _smo_py.smo_solve(K, y, 0.02, 0.5)
    b = _smo.smo_solve(K, y, 0.02, 0.5)
    np.testing.assert_array_equal(a[0], b[0])
    assert a[1:] == pytest.approx(b[1:])


@pytest.mark.parametrize("backend", ["python", "cython"])
def test_warm_start_at_optimum_returns_immediately(backend):
    mod = _smo_py if backend == "python" else _smo
    if mod is None:
        pytest.skip("compiled solver not built")
    ds = small_problem(seed=3)
    K, y = ds.X @ ds.X.T, ds.Y[:, 0]
    a, *_ = mod.smo_solve(K, y, 0.01, 1.0)
    a2, updates, _, _, ok, _ = mod.smo_solve(K, y, 0.01, 1.0, a0=a)
    assert ok and updates == 0
    np.testing.assert_array_equal(a2, a)


def test_backend_flag():
    assert svr.BACKEND in ("python", "cython")
