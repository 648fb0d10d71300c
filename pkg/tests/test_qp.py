import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpfl.errors import ConvergenceError, InfeasibleError
from dpfl.qp import check_feasible, solve_qp

cp = pytest.importorskip("cvxpy")


def cvx_solve(H, c, A, b, E=None, d=None):
    z = cp.Variable(len(c))
    cons = [A @ z <= b]
    if E is not None:
        cons.append(E @ z == d)
    prob = cp.Problem(cp.Minimize(0.5 * cp.quad_form(z, cp.psd_wrap(H)) + c @ z), cons)
    prob.solve(solver="CLARABEL", tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return z.value, prob.value


def random_qp(seed, n=6, m=10, p=2, rank=None):
    rng = np.random.default_rng(seed)
    R = rng.normal(size=(rank or n, n))
    H = R.T @ R + (1e-3 * np.eye(n) if rank else 0)
    c = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    z0 = rng.normal(size=n)
    b = A @ z0 + rng.uniform(0, 1, m)
    E = rng.normal(size=(p, n))
    return H, c, A, b, E, E @ z0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([None, 2]))
def test_matches_conic_solver(seed, rank):
    H, c, A, b, E, d = random_qp(seed, rank=rank)
    res = solve_qp(H, c, A, b, E, d)
    z, obj = cvx_solve(H, c, A, b, E, d)
    assert res.kkt_residual < 1e-8
    assert res.objective == pytest.approx(obj, rel=1e-6, abs=1e-6)
    assert np.all(A @ res.z <= b + 1e-7)
    np.testing.assert_allclose(E @ res.z, d, atol=1e-7)


def test_unconstrained_is_linear_solve():
    H = np.array([[2.0, 0.5], [0.5, 1.0]])
    c = np.array([1.0, -1.0])
    res = solve_qp(H, c)
    np.testing.assert_allclose(res.z, np.linalg.solve(H, -c), atol=1e-12)


def test_single_active_bound():
    # min (z - 3)^2 / 2 with z <= 1
    res = solve_qp([[1.0]], [-3.0], [[1.0]], [1.0])
    assert res.z[0] == pytest.approx(1.0, abs=1e-8)
    assert res.lam[0] == pytest.approx(2.0, abs=1e-6)


def test_infeasible():
    A = np.array([[1.0], [-1.0]])
    b = np.array([-1.0, -1.0])  # z <= -1 and z >= 1
    assert not check_feasible(A, b, np.zeros((0, 1)), np.zeros(0), 1)
    with pytest.raises(InfeasibleError):
        solve_qp([[1.0]], [0.0], A, b)


def test_iteration_cap():
    H, c, A, b, E, d = random_qp(1)
    with pytest.raises(ConvergenceError):
        solve_qp(H, c, A, b, E, d, max_iter=2)
