"""Helpers around the trainers: coordinate transforms, bus-type bundle solving,
per-branch topology subproblems, DC coefficient tuning and error correction."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .acpf import compute_dc_model
from .dataset import CONST, Dataset, Role, VariableSchema, bundle_partition
from .errors import DegenerateDataError, IllConditionedError, SchemaError
from .grid import GridCase, PQ
from .ls import fit_ols, forgetting_weights  # noqa: F401  re-exported
from .models import LinearModel

TRANSFORMS = ("voltage_square", "va_coupling", "dimension_lift")
LIFT_FUNCTIONS = ("radial_exponential", "log_radial")


# ---------------------------------------------------------------------------
# coordinate transforms

@dataclass(frozen=True, eq=False)
class TransformSpec:
    """``bases`` fixes the lifting centres (rows over the non-intercept predictors);
    when omitted they are drawn uniformly inside the observed predictor ranges."""

    kind: str
    lift_fn: str = "radial_exponential"
    gamma: float = 1.0
    n_lift: int = 10
    seed: int = 0
    bases: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.kind!r}")
        if self.kind == "dimension_lift":
            if self.lift_fn not in LIFT_FUNCTIONS:
                raise ValueError(f"unknown lift function {self.lift_fn!r}")
            if self.n_lift < 1:
                raise ValueError("at least one lifting base is required")
            if not self.gamma > 0:
                raise ValueError("gamma must be positive")
        if self.bases is not None:
            object.__setattr__(self, "bases", np.atleast_2d(np.asarray(self.bases, dtype=float)))


def lift_function(name: str, gamma: float = 1.0):
    if name == "radial_exponential":
        return lambda d: np.exp(-gamma * d)
    if name == "log_radial":
        return lambda d: np.log1p(d * d)
    raise ValueError(f"unknown lift function {name!r}")


def lift_features(X, bases, fn: str, gamma: float = 1.0) -> np.ndarray:
    """``psi_k(x) = f(||x - base_k||)`` over the non-intercept predictors."""
    Z = np.atleast_2d(X)[:, 1:]
    bases = np.atleast_2d(bases)
    if bases.shape[1] != Z.shape[1]:
        raise SchemaError(f"lifting bases have dimension {bases.shape[1]}, predictors {Z.shape[1]}")
    D = np.sqrt(((Z[:, None, :] - bases[None, :, :]) ** 2).sum(axis=2))
    return lift_function(fn, gamma)(D)


def transform_spec_from_schema(schema: VariableSchema) -> TransformSpec:
    """Rebuild the (fully determined) spec a transformed schema was produced with."""
    t = schema.transform
    if not t:
        raise SchemaError("schema carries no transform")
    if t["kind"] == "dimension_lift":
        return TransformSpec("dimension_lift", t["lift_fn"], t["gamma"], len(t["bases"]), bases=np.array(t["bases"]))
    return TransformSpec(t["kind"])


def _column_source(ds: Dataset, case: GridCase):
    """Row-wise getter for a bus's Vm or Va from responses, predictors or fixed case values."""
    cols = {}
    for j, r in enumerate(ds.schema.predictors):
        cols[(r.quantity, r.element)] = ds.X[:, j]
    for j, r in enumerate(ds.schema.responses):
        cols[(r.quantity, r.element)] = ds.Y[:, j]
    setpoints = case.voltage_setpoints()
    n = ds.n_samples

    def get(q, bus):
        bus_id = str(case.bus_ids[bus])
        if (q, bus_id) in cols:
            return cols[(q, bus_id)]
        if q == "Va" and bus == case.slack:
            return np.full(n, case.Va[bus])
        if q == "Vm" and case.bus_types[bus] != PQ:
            # unmeasured generator voltages sit at their set point
            return np.full(n, setpoints[bus])
        raise SchemaError(f"{q} at bus {bus_id} is needed by the coupling transform but is not in the dataset")

    return get


def _parse_label(label: str):
    ends = label.partition("#")[0]
    f, t = ends.split("-")
    return f, t


def apply_transform(ds: Dataset, spec: TransformSpec, case: Optional[GridCase] = None) -> Dataset:
    """Return ``ds`` in transformed coordinates; the schema's ``transform`` records how to undo it."""
    if ds.normalization is not None:
        raise SchemaError("apply transforms before normalizing")
    schema = ds.schema
    if schema.transform:
        raise SchemaError(f"dataset already carries the {schema.transform['kind']} transform")
    original = schema.response_names
    if spec.kind == "voltage_square":
        if not any(r.quantity == "Vm" for r in schema.responses):
            raise SchemaError("voltage squaring needs Vm responses")
        resp = tuple(Role("Vsq", r.element) if r.quantity == "Vm" else r for r in schema.responses)
        Y = np.where([r.quantity == "Vm" for r in schema.responses], ds.Y ** 2, ds.Y)
        tag = {"kind": "voltage_square", "responses": original}
        return replace(ds, Y=Y, schema=VariableSchema(schema.predictors, resp, schema.kind, tag))

    if spec.kind == "va_coupling":
        if case is None:
            raise ValueError("the coupling transform needs the grid case for its branch list")
        if not any(r.quantity == "Va" for r in schema.responses):
            raise SchemaError("the coupling transform needs Va responses")
        get = _column_source(ds, case)
        keep = [j for j, r in enumerate(schema.responses) if r.quantity != "Va"]
        resp = [Role("Vsq", r.element) if r.quantity == "Vm" else r for r in (schema.responses[j] for j in keep)]
        cols = [ds.Y[:, j] ** 2 if schema.responses[j].quantity == "Vm" else ds.Y[:, j] for j in keep]
        labels = case.branch_labels
        for k in np.flatnonzero(case.in_service):
            f, t = case.f[k], case.t[k]
            vv = get("Vm", f) * get("Vm", t)
            th = get("Va", f) - get("Va", t)
            resp += [Role("R", labels[k]), Role("C", labels[k])]
            cols += [vv * np.cos(th), vv * np.sin(th)]
        tag = {"kind": "va_coupling", "responses": original,
               "slack": str(case.bus_ids[case.slack]), "slack_angle": float(case.Va[case.slack])}
        return replace(ds, Y=np.column_stack(cols), schema=VariableSchema(schema.predictors, tuple(resp), "measurement", tag))

    # dimension lifting
    Z = ds.X[:, 1:]
    if spec.bases is not None:
        bases = spec.bases
    else:
        rng = np.random.default_rng(spec.seed)
        bases = rng.uniform(Z.min(axis=0), Z.max(axis=0), size=(spec.n_lift, Z.shape[1]))
    psi = lift_features(ds.X, bases, spec.lift_fn, spec.gamma)
    preds = schema.predictors + tuple(Role("lift", f"psi{k + 1}") for k in range(len(bases)))
    tag = {"kind": "dimension_lift", "responses": original, "lift_fn": spec.lift_fn, "gamma": spec.gamma,
           "bases": bases.tolist(), "n_base_predictors": schema.n_x}
    return replace(ds, X=np.hstack([ds.X, psi]), schema=VariableSchema(preds, schema.responses, schema.kind, tag))


def transform_predictors(X, schema: VariableSchema) -> np.ndarray:
    """Map raw predictor rows into the coordinates of a transformed schema."""
    t = schema.transform
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not t or t["kind"] != "dimension_lift":
        return X
    if X.shape[1] != t["n_base_predictors"]:
        raise SchemaError(f"expected {t['n_base_predictors']} raw predictors, got {X.shape[1]}")
    return np.hstack([X, lift_features(X, np.array(t["bases"]), t["lift_fn"], t["gamma"])])


def invert_transform(Yt, schema: VariableSchema, *, return_flags: bool = False):
    """Map predictions of a transformed model back to the original responses.

    Negative squared voltages are clamped to zero; the returned flag mask marks them.
    """
    Yt = np.atleast_2d(np.asarray(Yt, dtype=float))
    t = schema.transform
    clamped = np.zeros(Yt.shape[0], dtype=bool)
    if not t or t["kind"] == "dimension_lift":
        return (Yt, clamped) if return_flags else Yt
    names = schema.response_names
    col = {n: j for j, n in enumerate(names)}

    def sqrt_col(j):
        v = Yt[:, j]
        neg = v < 0
        if np.any(neg):
            clamped[neg] = True
            warnings.warn(f"{int(neg.sum())} negative squared-voltage predictions clamped to zero", RuntimeWarning)
        return np.sqrt(np.maximum(v, 0.0))

    out = np.empty((Yt.shape[0], len(t["responses"])))
    angles = None
    if t["kind"] == "va_coupling":
        angles = _recover_angles(Yt, schema, t)
    for j, name in enumerate(t["responses"]):
        role = Role.parse(name)
        if role.quantity == "Vm":
            out[:, j] = sqrt_col(col[Role("Vsq", role.element).name])
        elif role.quantity == "Va" and angles is not None:
            out[:, j] = angles[role.element]
        else:
            out[:, j] = Yt[:, col[name]]
    return (out, clamped) if return_flags else out


def _recover_angles(Yt, schema, t) -> dict:
    """Bus angles from branch differences ``atan2(C, R)``, least squares against the slack reference."""
    branches = [(r.element, j) for j, r in enumerate(schema.responses) if r.quantity == "R"]
    cidx = {r.element: j for j, r in enumerate(schema.responses) if r.quantity == "C"}
    slack = t["slack"]
    buses = sorted({b for label, _ in branches for b in _parse_label(label)} - {slack}, key=lambda s: (len(s), s))
    pos = {b: i for i, b in enumerate(buses)}
    D = np.zeros((len(branches), len(buses)))
    ref = np.zeros(len(branches))
    for k, (label, _) in enumerate(branches):
        for b, s in zip(_parse_label(label), (1.0, -1.0)):
            if b == slack:
                ref[k] += s * t["slack_angle"]
            else:
                D[k, pos[b]] = s
    if np.linalg.matrix_rank(D) < len(buses):
        raise SchemaError("branch set does not connect every bus to the slack; angles are not recoverable")
    diff = np.column_stack([np.arctan2(Yt[:, cidx[label]], Yt[:, j]) for label, j in branches])
    theta = np.linalg.lstsq(D, (diff - ref).T, rcond=None)[0].T
    out = {b: theta[:, pos[b]] for b in buses}
    out[slack] = np.full(Yt.shape[0], t["slack_angle"])
    return out


# ---------------------------------------------------------------------------
# bus-type bundles

@dataclass(frozen=True, eq=False)
class BundledModel:
    """``[Y1 X2] = [X1 Y2] B`` with ``B`` split at ``n1`` rows and ``ny1`` columns.

    ``row_roles`` name the right-hand side columns (X1 then Y2),
    ``col_roles`` the left-hand side (Y1 then X2).
    """

    B: np.ndarray
    row_roles: tuple
    col_roles: tuple
    n1: int
    ny1: int
    response_order: tuple = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.B.shape[0] - self.n1 != self.B.shape[1] - self.ny1:
            raise SchemaError("beta_22 must be square")

    @property
    def beta11(self):
        return self.B[:self.n1, :self.ny1]

    @property
    def beta12(self):
        return self.B[:self.n1, self.ny1:]

    @property
    def beta21(self):
        return self.B[self.n1:, :self.ny1]

    @property
    def beta22(self):
        return self.B[self.n1:, self.ny1:]

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.beta22)) if self.beta22.size else 1.0

    @property
    def x1_roles(self):
        return self.row_roles[:self.n1]

    @property
    def y2_roles(self):
        return self.row_roles[self.n1:]

    @property
    def y1_roles(self):
        return self.col_roles[:self.ny1]

    @property
    def x2_roles(self):
        return self.col_roles[self.ny1:]

    def predict(self, X, predictor_names) -> np.ndarray:
        """Responses in ``response_order`` for raw predictor rows named by ``predictor_names``."""
        X = np.atleast_2d(X)
        pos = {n: j for j, n in enumerate(predictor_names)}
        try:
            x1 = X[:, [pos[r.name] for r in self.x1_roles]]
            x2 = X[:, [pos[r.name] for r in self.x2_roles]]
        except KeyError as e:
            raise SchemaError(f"predictor {e.args[0]} missing for the bundled model") from None
        y1, y2 = solve_bundled(self, x1, x2)
        got = {r.name: y1[:, j] for j, r in enumerate(self.y1_roles)}
        got.update({r.name: y2[:, j] for j, r in enumerate(self.y2_roles)})
        return np.column_stack([got[n] for n in self.response_order])


def fit_bundled(ds: Dataset, trainer: Callable = fit_ols) -> BundledModel:
    """Fit ``[Y1 X2]`` on ``[X1 Y2]`` with any dataset trainer returning a linear model."""
    part = bundle_partition(ds)
    rhs = np.hstack([part.X1, part.Y2])
    lhs = np.hstack([part.Y1, part.X2])
    rows = part.x1_roles + part.y2_roles
    cols = part.y1_roles + part.x2_roles
    inner = Dataset(rhs, lhs, VariableSchema(rows, cols, kind="measurement"), ds.chronological)
    B = np.array(trainer(inner).beta)
    m = BundledModel(B, rows, cols, len(part.x1_roles), len(part.y1_roles), tuple(ds.schema.response_names))
    return replace(m, metadata={"trainer": "bundled", "condition_number": m.condition_number})


def solve_bundled(m: BundledModel, x1, x2, *, max_condition: float = 1e12):
    """``y2 = (x2 - x1 B12) B22^-1``, then ``y1 = x1 B11 + y2 B21``."""
    cond = m.condition_number
    if not cond < max_condition:
        raise IllConditionedError("beta_22 is too close to singular for back-substitution", cond)
    x1 = np.atleast_2d(x1)
    x2 = np.atleast_2d(x2)
    y2 = np.linalg.solve(m.beta22.T, (x2 - x1 @ m.beta12).T).T
    y1 = x1 @ m.beta11 + y2 @ m.beta21
    return y1, y2


def retype(m: BundledModel, bus, to: str) -> BundledModel:
    """Re-block a bundled model after a PV bus becomes PQ (``to="PQ"``) or back (``to="PV"``).

    The coefficients are reused; only the known/unknown split moves.
    """
    q = Role("Q_inj", bus)
    v = Role("Vm", bus)
    rows, cols = list(m.row_roles), list(m.col_roles)
    order_r = list(range(len(rows)))
    order_c = list(range(len(cols)))
    if to == "PQ":
        if q not in m.y2_roles or v not in m.x2_roles:
            raise SchemaError(f"bus {bus} is not a PV bus of this bundle")
        ri, ci = rows.index(q), cols.index(v)
        order_r.remove(ri); order_r.insert(m.n1, ri)
        order_c.remove(ci); order_c.insert(m.ny1, ci)
        n1, ny1 = m.n1 + 1, m.ny1 + 1
    elif to == "PV":
        if q not in m.x1_roles or v not in m.y1_roles:
            raise SchemaError(f"bus {bus} is not a PQ bus of this bundle")
        ri, ci = rows.index(q), cols.index(v)
        order_r.remove(ri); order_r.insert(m.n1 - 1, ri)
        order_c.remove(ci); order_c.insert(m.ny1 - 1, ci)
        n1, ny1 = m.n1 - 1, m.ny1 - 1
    else:
        raise ValueError("to must be 'PQ' or 'PV'")
    B = m.B[np.ix_(order_r, order_c)]
    rows = tuple(rows[i] for i in order_r)
    cols = tuple(cols[i] for i in order_c)
    # the moved quantities swap sides of the response list
    resp = [n for n in m.response_order if n not in (q.name, v.name)] + [v.name if to == "PQ" else q.name]
    out = BundledModel(B, rows, cols, n1, ny1, tuple(resp), dict(m.metadata))
    return replace(out, metadata={**m.metadata, "condition_number": out.condition_number})


# ---------------------------------------------------------------------------
# topology decomposition

TERMINAL_QUANTITIES = (("Vm", 0), ("Vm", 1), ("Va", 0), ("Va", 1), ("P_inj", 0), ("Q_inj", 0))


def split_by_topology(case: GridCase, ds: Dataset) -> list:
    """One sub-dataset per branch-flow response, predictors cut to the terminal measurements.

    Terminal order: ``Vm`` at both ends, ``Va`` at both ends, then ``P`` and
    ``Q`` injected at the sending end.
    """
    pred = {(r.quantity, r.element): j for j, r in enumerate(ds.schema.predictors)}
    out = []
    for j, role in enumerate(ds.schema.responses):
        if role.quantity not in ("P_flow", "Q_flow"):
            continue
        try:
            k, rev = case.branch_of(role.element)
        except KeyError:
            raise SchemaError(f"unknown branch {role.element}") from None
        ends = (case.t[k], case.f[k]) if rev else (case.f[k], case.t[k])
        ids = [str(case.bus_ids[b]) for b in ends]
        roles, cols = [CONST], [0]
        for q, e in TERMINAL_QUANTITIES:
            key = (q, ids[e])
            if key not in pred:
                raise SchemaError(f"terminal measurement {q}@{ids[e]} missing for {role}")
            roles.append(Role(q, ids[e]))
            cols.append(pred[key])
        schema = VariableSchema(tuple(roles), (role,), kind="measurement")
        out.append(Dataset(ds.X[:, cols], ds.Y[:, [j]], schema, ds.chronological,
                           meta={"parent_response": role.name, "branch": case.branch_labels[k], "reverse": rev}))
    if not out:
        raise SchemaError("dataset has no branch-flow responses")
    return out


# ---------------------------------------------------------------------------
# coefficient optimization and error correction

def scalar_least_squares(u, p) -> float:
    """Slope of ``p ~ beta u`` through the origin."""
    return float(u @ p / (u @ u))


def optimize_dc_coefficients(case: GridCase, ds: Dataset, trainer: Callable = scalar_least_squares) -> np.ndarray:
    """Per-branch factor ``beta_ij`` in ``P_ij = beta_ij theta_ij / x_ij``, one per response of ``ds``.

    ``ds`` carries Va predictors and P_flow responses; an absent slack angle is zero.
    """
    col = {r.element: j for j, r in enumerate(ds.schema.predictors) if r.quantity == "Va"}
    out = np.empty(ds.schema.n_y)
    for j, role in enumerate(ds.schema.responses):
        if role.quantity != "P_flow":
            raise SchemaError(f"DC coefficients apply to active branch flows, not {role}")
        k, rev = case.branch_of(role.element)
        ends = (case.t[k], case.f[k]) if rev else (case.f[k], case.t[k])
        th = []
        for b in ends:
            bid = str(case.bus_ids[b])
            if bid in col:
                th.append(ds.X[:, col[bid]])
            elif b == case.slack:
                th.append(np.zeros(ds.n_samples))
            else:
                raise SchemaError(f"angle at bus {bid} missing from the predictors")
        theta = th[0] - th[1]
        if np.ptp(theta) == 0:
            raise DegenerateDataError(f"angle difference across {role.element} never varies")
        out[j] = trainer(theta / case.x[k], ds.Y[:, j])
    return out


def fit_dc_optimized(case: GridCase, ds: Dataset, trainer: Callable = scalar_least_squares) -> LinearModel:
    """DC model with per-branch coefficients tuned on ``ds``."""
    scale = optimize_dc_coefficients(case, ds, trainer)
    m = compute_dc_model(case, ds.schema, scale=scale)
    return replace(m, metadata={"trainer": "dc_opt", "scale": scale.tolist()})


def fit_error_correction(base: LinearModel, ds: Dataset, trainer: Callable = fit_ols) -> LinearModel:
    """Fit the residual ``Y - X A`` of ``base`` and return ``A`` plus the fitted correction."""
    if base.schema.predictor_names != ds.schema.predictor_names or \
            base.schema.response_names != ds.schema.response_names:
        raise SchemaError("base model and dataset have different schemas")
    if (base.normalization is None) != (ds.normalization is None):
        raise SchemaError("base model and dataset disagree on normalization")
    delta = ds.Y - ds.X @ base.beta
    err = trainer(ds.with_data(Y=delta))
    beta_err = np.array(err.beta)
    return LinearModel(base.beta + beta_err, ds.schema, ds.normalization, {
        "trainer": "error_corrected", "base": base.metadata.get("trainer"), "correction": err.metadata.get("trainer"),
        "correction_norm": float(np.abs(beta_err).max())})
