import warnings

import numpy as np
import pytest

from dpfl.acpf import FluctuationSpec, compute_dc_model, compute_taylor_model, dc_schema, sample_operating_points
from dpfl.dataset import CONST, Dataset, Role, VariableSchema, assemble_xy, measurement_schema, split, standard_schema
from dpfl.errors import DegenerateDataError, IllConditionedError, SchemaError
from dpfl.ls import fit_ols
from dpfl.models import LinearModel
from dpfl.supportive import (TransformSpec, apply_transform, fit_bundled, fit_dc_optimized, fit_error_correction,
                             invert_transform, lift_features, optimize_dc_coefficients, retype, solve_bundled,
                             split_by_topology, transform_predictors)

from conftest import linear_dataset, two_bus


def mae(A, B):
    return float(np.mean(np.abs(A - B)))


# -- transforms -----------------------------------------------------------------------------

def test_voltage_square_values():
    case = two_bus(pd=50, qd=10)
    schema = standard_schema(case)
    X = np.array([[1.0, -0.5, -0.1], [1.0, -0.4, -0.1]])
    Y = np.array([[-0.1, 1.0, 0.5, 0.1], [-0.1, 1.1, 0.4, 0.1]])
    out = apply_transform(Dataset(X, Y, schema), TransformSpec("voltage_square"))
    j = out.schema.response_names.index("Vsq@2")
    np.testing.assert_allclose(out.Y[:, j], [1.0, 1.21])
    np.testing.assert_allclose(invert_transform([[0.0, 1.21, 0.0, 0.0]], out.schema)[0, 1], 1.1)


def test_coupling_flat_values():
    case = two_bus(pd=50, qd=10)
    schema = standard_schema(case)
    X = np.array([[1.0, -0.5, -0.1]])
    Y = np.array([[0.0, 1.0, 0.5, 0.1]])
    out = apply_transform(Dataset(X, Y, schema), TransformSpec("va_coupling"), case)
    names = out.schema.response_names
    got = {n.split("@")[0]: out.Y[0, j] for j, n in enumerate(names) if n.split("@")[0] in ("Vsq", "R", "C")}
    assert got == {"Vsq": 1.0, "R": 1.0, "C": 0.0}
    np.testing.assert_allclose(invert_transform(out.Y, out.schema), Y, atol=1e-15)


@pytest.mark.parametrize("kind", ["voltage_square", "va_coupling"])
def test_round_trip_on_grid_data(case9, case9_data, kind):
    out = apply_transform(case9_data, TransformSpec(kind), case9)
    np.testing.assert_allclose(invert_transform(out.Y, out.schema), case9_data.Y, atol=1e-12)
    assert out.schema.transform["kind"] == kind


def test_coupling_branch_columns_cover_in_service_only(case9):
    case = case9.with_branch_status(1, 0)  # 4-5 sits on the ring, so the grid stays connected
    states = sample_operating_points(case, FluctuationSpec(seed=3), 5)
    ds = assemble_xy(states, standard_schema(case))
    out = apply_transform(ds, TransformSpec("va_coupling"), case)
    assert sum(r.quantity == "R" for r in out.schema.responses) == int(np.count_nonzero(case.in_service)) == 8
    np.testing.assert_allclose(invert_transform(out.Y, out.schema), ds.Y, atol=1e-12)


def test_coupling_needs_angles(case9):
    ds = assemble_xy(sample_operating_points(case9, FluctuationSpec(seed=3), 5), dc_schema(case9))
    with pytest.raises(SchemaError):
        apply_transform(ds, TransformSpec("va_coupling"), case9)


def test_negative_squared_voltage_clamped():
    case = two_bus(pd=50, qd=10)
    ds = Dataset(np.array([[1.0, -0.5, -0.1]]), np.array([[0.0, 1.0, 0.5, 0.1]]), standard_schema(case))
    out = apply_transform(ds, TransformSpec("voltage_square"))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        inv, flags = invert_transform([[0.0, -0.01, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]], out.schema, return_flags=True)
    assert inv[0, 1] == 0.0 and list(flags) == [True, False]
    assert any(issubclass(x.category, RuntimeWarning) for x in w)


def test_lift_basis_coincidence():
    ds, _ = linear_dataset(n=10, d=3, m=1)
    for fn, at_zero in (("radial_exponential", 1.0), ("log_radial", 0.0)):
        psi = lift_features(ds.X, ds.X[4:5, 1:], fn, gamma=2.0)
        assert psi[4, 0] == at_zero


def test_lift_dimension_mismatch():
    ds, _ = linear_dataset(n=10, d=3, m=1)
    with pytest.raises(SchemaError):
        apply_transform(ds, TransformSpec("dimension_lift", bases=np.zeros((2, 5))))


def test_lift_bases_inside_observed_range():
    ds, _ = linear_dataset(n=30, d=4, m=1)
    out = apply_transform(ds, TransformSpec("dimension_lift", n_lift=25, seed=7))
    B = np.array(out.schema.transform["bases"])
    Z = ds.X[:, 1:]
    assert np.all(B >= Z.min(axis=0)) and np.all(B <= Z.max(axis=0))
    np.testing.assert_array_equal(transform_predictors(ds.X, out.schema), out.X)


def test_lifting_never_worsens_training_error(case9_data):
    ds = case9_data
    base = fit_ols(ds)
    for fn in ("radial_exponential", "log_radial"):
        lifted = apply_transform(ds, TransformSpec("dimension_lift", lift_fn=fn, n_lift=8, gamma=0.5))
        m = fit_ols(lifted)
        sse_l = np.sum((lifted.Y - lifted.X @ m.beta) ** 2)
        sse_b = np.sum((ds.Y - ds.X @ base.beta) ** 2)
        assert sse_l <= sse_b + 1e-10


# -- bus-type bundles ------------------------------------------------------------------------

BUSES = {"slack": "1", "pv": ("2", "3"), "pq": "4"}
X1 = (CONST, Role("P_inj", "2"), Role("P_inj", "3"), Role("P_inj", "4"), Role("Q_inj", "4"))
X2 = (Role("Vm", "1"), Role("Vm", "2"), Role("Vm", "3"))
Y1 = (Role("Va", "2"), Role("Va", "3"), Role("Va", "4"), Role("Vm", "4"), Role("P_slack", "1"))
Y2 = (Role("Q_slack", "1"), Role("Q_inj", "2"), Role("Q_inj", "3"))


def bundle_world(n=40, seed=0):
    """Samples from one fixed set of exact linear relations among all variables: (names, values)."""
    g = np.random.default_rng(99)
    B11, B12, B21 = g.normal(size=(5, 5)), g.normal(size=(5, 3)), g.normal(size=(3, 5))
    B22 = np.eye(3) + 0.3 * g.normal(size=(3, 3))
    rng = np.random.default_rng(seed)
    x1 = np.column_stack([np.ones(n), rng.normal(size=(n, 4))])
    y2 = rng.normal(size=(n, 3))
    y1 = x1 @ B11 + y2 @ B21
    x2 = x1 @ B12 + y2 @ B22
    names = [r.name for r in X1 + X2 + Y1 + Y2]
    return names, np.hstack([x1, x2, y1, y2])


def bundle_dataset(names, V):
    col = {n: j for j, n in enumerate(names)}
    pick = lambda roles: V[:, [col[r.name] for r in roles]]
    schema = VariableSchema(X1 + X2, Y1 + Y2)
    return Dataset(pick(X1 + X2), pick(Y1 + Y2), schema)


def test_bundle_matches_direct_fit():
    names, V = bundle_world()
    ds = bundle_dataset(names, V)
    m = fit_bundled(ds)
    assert m.beta22.shape == (3, 3) and np.isfinite(m.metadata["condition_number"])
    _, Vt = bundle_world(n=15, seed=1)
    test = bundle_dataset(names, Vt)
    direct = fit_ols(ds).predict(test.X)
    np.testing.assert_allclose(m.predict(test.X, ds.schema.predictor_names), direct, atol=1e-6)
    np.testing.assert_allclose(m.predict(test.X, ds.schema.predictor_names), test.Y, atol=1e-6)


def test_bundle_retype_pv_to_pq_stays_exact():
    names, V = bundle_world()
    m = fit_bundled(bundle_dataset(names, V))
    r = retype(m, "3", "PQ")
    assert Role("Q_inj", "3") in r.x1_roles and Role("Vm", "3") in r.y1_roles
    _, Vt = bundle_world(n=15, seed=2)
    got = r.predict(Vt, names)
    col = {n: j for j, n in enumerate(names)}
    np.testing.assert_allclose(got, Vt[:, [col[n] for n in r.response_order]], atol=1e-6)
    back = retype(r, "3", "PV")
    np.testing.assert_allclose(back.predict(Vt, names), m.predict(Vt, names), atol=1e-9)


def test_retype_rejects_wrong_bus():
    names, V = bundle_world()
    m = fit_bundled(bundle_dataset(names, V))
    with pytest.raises(SchemaError):
        retype(m, "4", "PQ")


def test_bundle_on_grid_data_with_varying_setpoints(case9):
    spec = FluctuationSpec(relative_range=0.1, vset_range=0.03, seed=4)
    ds = assemble_xy(sample_operating_points(case9, spec, 200), standard_schema(case9, voltage_predictors=True))
    tr, te = split(ds, 0.75, seed=0)
    m = fit_bundled(tr)
    pred = m.predict(te.X, te.schema.predictor_names)
    assert mae(pred, te.Y) < 0.05


def test_bundle_fixed_setpoints_ill_conditioned(case9):
    ds = assemble_xy(sample_operating_points(case9, FluctuationSpec(seed=4), 60),
                     standard_schema(case9, voltage_predictors=True))
    m = fit_bundled(ds, trainer=lambda d: LinearModel(np.linalg.lstsq(d.X, d.Y, rcond=None)[0], d.schema))
    with pytest.raises(IllConditionedError):
        solve_bundled(m, ds.X[:1, :m.n1], ds.X[:1, m.n1:])


# -- topology decomposition ---------------------------------------------------------------

def two_bus_measurements(n=30, seed=0):
    case = two_bus(pd=50, qd=10, r=0.01)
    schema = measurement_schema(case)
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, schema.n_x - 1))])
    Y = rng.normal(size=(n, schema.n_y))
    pcol = {n: j for j, n in enumerate(schema.predictor_names)}
    fwd = Role("P_flow", case.flow_element(0)).name
    Y[:, schema.response_names.index(fwd)] = (X[:, pcol["Va@1"]] - X[:, pcol["Va@2"]]) / case.x[0]
    return case, Dataset(X, Y, schema), fwd


def test_topology_two_bus():
    case, ds, fwd = two_bus_measurements()
    subs = split_by_topology(case, ds)
    assert len(subs) == 4  # (P, Q) x two directions
    sub = next(s for s in subs if s.meta["parent_response"] == fwd)
    assert sub.schema.n_x == 7
    assert sub.n_samples == ds.n_samples
    np.testing.assert_array_equal(sub.Y[:, 0], ds.Y[:, ds.schema.response_names.index(fwd)])
    beta = fit_ols(sub).beta[:, 0]
    names = sub.schema.predictor_names
    np.testing.assert_allclose(beta[names.index("Va@1")], 1 / case.x[0], atol=1e-8)
    np.testing.assert_allclose(beta[names.index("Va@2")], -1 / case.x[0], atol=1e-8)
    others = [i for i, n in enumerate(names) if not n.startswith("Va@")]
    np.testing.assert_allclose(beta[others], 0, atol=1e-8)


def test_topology_requires_flows(case9_data, case9):
    with pytest.raises(SchemaError):
        split_by_topology(case9, case9_data)


# -- DC coefficient optimization ------------------------------------------------------------

def dc_exact(case, scale=1.0, n=50, seed=0):
    schema = dc_schema(case)
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), 0.1 * rng.normal(size=(n, schema.n_x - 1))])
    return Dataset(X, scale * (X @ compute_dc_model(case, schema).beta), schema)


def test_dc_exact_gives_unit_coefficients(case9):
    np.testing.assert_allclose(optimize_dc_coefficients(case9, dc_exact(case9)), 1.0, atol=1e-10)


def test_dc_scaled_identified(case9):
    np.testing.assert_allclose(optimize_dc_coefficients(case9, dc_exact(case9, 2.0)), 2.0, atol=1e-10)


def test_dc_zero_variance(case9):
    ds = dc_exact(case9)
    flat = ds.with_data(X=np.column_stack([ds.X[:, :1], np.zeros((ds.n_samples, ds.schema.n_x - 1))]))
    with pytest.raises(DegenerateDataError):
        optimize_dc_coefficients(case9, flat)


def test_dc_optimized_not_worse_on_ac_data(case9):
    ds = assemble_xy(sample_operating_points(case9, FluctuationSpec(seed=5), 200), dc_schema(case9))
    tr, te = split(ds, 0.5, seed=1)
    plain = compute_dc_model(case9, ds.schema)
    tuned = fit_dc_optimized(case9, tr)
    assert mae(tuned.predict(te.X), te.Y) <= mae(plain.predict(te.X), te.Y)


# -- error correction -------------------------------------------------------------------------

def test_error_correction_of_true_model_is_zero():
    ds, beta = linear_dataset(n=40, d=4, m=2)
    m = fit_error_correction(LinearModel(beta, ds.schema), ds)
    np.testing.assert_allclose(m.beta - beta, 0, atol=1e-10)


def test_error_correction_from_zero_equals_direct_fit():
    ds, _ = linear_dataset(n=40, d=4, m=2, noise=0.3)
    m = fit_error_correction(LinearModel(np.zeros((4, 2)), ds.schema), ds)
    np.testing.assert_array_equal(m.beta, fit_ols(ds).beta)


def test_error_correction_improves_taylor(case9, case9_base, case9_data):
    tr, te = split(case9_data, 0.5, seed=2)
    taylor = compute_taylor_model(case9, case9_base, tr.schema)
    corrected = fit_error_correction(taylor, tr)
    assert mae(corrected.predict(te.X), te.Y) <= mae(taylor.predict(te.X), te.Y)


def test_error_correction_schema_mismatch():
    ds, beta = linear_dataset(n=20, d=3, m=1)
    other, _ = linear_dataset(n=20, d=4, m=1)
    with pytest.raises(SchemaError):
        fit_error_correction(LinearModel(np.zeros((4, 1)), other.schema), ds)
