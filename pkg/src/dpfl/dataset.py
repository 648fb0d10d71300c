"""Predictor/response matrices with physical-role metadata."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateDataError, SchemaError
from .grid import PQ, PV, REF, GridCase

BUS_QUANTITIES = {"P_inj", "Q_inj", "Vm", "Va", "P_slack", "Q_slack", "Vsq"}
FLOW_QUANTITIES = {"P_flow", "Q_flow"}
BRANCH_QUANTITIES = {"loss", "R", "C"}
QUANTITIES = BUS_QUANTITIES | FLOW_QUANTITIES | BRANCH_QUANTITIES | {"const", "lift"}

# which quantities may act as predictors / responses at each bus type
_PREDICTOR_OK = {
    "P_inj": {PQ, PV},
    "Q_inj": {PQ},
    "Vm": {PV, REF},
    "Va": {REF},
}
_RESPONSE_OK = {
    "Vm": {PQ},
    "Vsq": {PQ},
    "Va": {PQ, PV},
    "P_slack": {REF},
    "Q_slack": {REF},
    "Q_inj": {PV},
}


@dataclass(frozen=True, order=True)
class Role:
    """A column's physical meaning: ``quantity`` measured at ``element``.

    Bus quantities use the bus id as element, flows use a directed branch
    label ``"f-t"``, losses and coupling terms the branch label.
    """

    quantity: str
    element: str

    def __post_init__(self):
        if self.quantity not in QUANTITIES:
            raise SchemaError(f"unknown quantity {self.quantity!r}")
        object.__setattr__(self, "element", str(self.element))

    @property
    def name(self) -> str:
        return f"{self.quantity}@{self.element}"

    @classmethod
    def parse(cls, name: str) -> "Role":
        quantity, sep, element = name.partition("@")
        if not sep:
            raise SchemaError(f"column name {name!r} is not of the form quantity@id")
        return cls(quantity, element)

    def __str__(self):
        return self.name


CONST = Role("const", "1")


def _roles(items) -> tuple:
    return tuple(r if isinstance(r, Role) else Role.parse(r) for r in items)


@dataclass(frozen=True)
class VariableSchema:
    """Ordered predictor and response roles.

    ``kind="standard"`` enforces the bus-type split of known and unknown
    quantities; ``kind="measurement"`` allows any measured quantity on either
    side (used by topology subproblems and the DC models).
    """

    predictors: tuple
    responses: tuple
    kind: str = "standard"
    transform: Optional[dict] = None

    def __post_init__(self):
        object.__setattr__(self, "predictors", _roles(self.predictors))
        object.__setattr__(self, "responses", _roles(self.responses))
        if not self.predictors or self.predictors[0] != CONST:
            raise SchemaError("first predictor must be the constant const@1")
        names = [r.name for r in self.predictors + self.responses]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate or shared roles: {', '.join(dup)}")
        if self.kind not in ("standard", "measurement"):
            raise SchemaError(f"unknown schema kind {self.kind!r}")

    @property
    def n_x(self) -> int:
        return len(self.predictors)

    @property
    def n_y(self) -> int:
        return len(self.responses)

    @property
    def predictor_names(self) -> list:
        return [r.name for r in self.predictors]

    @property
    def response_names(self) -> list:
        return [r.name for r in self.responses]

    def validate(self, case: GridCase) -> None:
        """Check every role resolves against ``case`` (and bus types, for standard schemas)."""
        for side, roles in (("predictor", self.predictors), ("response", self.responses)):
            for role in roles:
                _resolve(case, role)
                if self.kind != "standard":
                    continue
                allowed = _PREDICTOR_OK if side == "predictor" else _RESPONSE_OK
                q = role.quantity
                if q in ("const", "lift"):
                    if side == "response":
                        raise SchemaError(f"{role} cannot be a response")
                    continue
                if q in BUS_QUANTITIES:
                    if q not in allowed:
                        raise SchemaError(f"{q} cannot be a {side}")
                    btype = case.bus_types[case.index_of(role.element)]
                    if btype not in allowed[q]:
                        raise SchemaError(f"{role} is not a {side} at a bus of that type")
                elif side == "predictor":
                    raise SchemaError(f"{role} cannot be a predictor")

    def to_dict(self) -> dict:
        return {
            "predictors": self.predictor_names,
            "responses": self.response_names,
            "kind": self.kind,
            "transform": self.transform,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariableSchema":
        return cls(tuple(d["predictors"]), tuple(d["responses"]), d.get("kind", "standard"), d.get("transform"))


def _bus_index(case, element):
    try:
        return case.index_of(element)
    except KeyError:
        raise SchemaError(f"unknown bus {element}") from None


def _resolve(case: GridCase, role: Role):
    q = role.quantity
    if q in ("const", "lift"):
        return None
    if q in BUS_QUANTITIES:
        i = _bus_index(case, role.element)
        if q in ("P_slack", "Q_slack") and i != case.slack:
            raise SchemaError(f"{role}: bus {role.element} is not the slack bus")
        return i
    try:
        k, rev = case.branch_of(role.element)
    except KeyError:
        raise SchemaError(f"unknown branch {role.element}") from None
    if not case.in_service[k]:
        raise SchemaError(f"branch {role.element} is out of service")
    if q in BRANCH_QUANTITIES and rev:
        raise SchemaError(f"{role}: use the branch's own label, not the reversed one")
    return k, rev


# ---------------------------------------------------------------------------
# schema builders

def standard_schema(
    case: GridCase,
    *,
    voltage_predictors: bool = False,
    branch_responses: bool = False,
    drop_constant_injections: bool = True,
) -> VariableSchema:
    """Known injections (and optionally voltages) in, unknown voltages, angles, slack and PV reactive power out.

    The slack angle is left out because it never varies, and so are PQ-bus
    injections whose base load is zero (constant columns would duplicate the
    intercept).
    """
    ids = case.bus_ids
    Pg, Qg = case.generation()
    preds = [CONST]
    for i in range(case.n_bus):
        if case.bus_types[i] == REF:
            continue
        if case.bus_types[i] == PQ and drop_constant_injections and case.Pd[i] == 0 and Pg[i] == 0:
            continue
        preds.append(Role("P_inj", ids[i]))
    for i in case.pq:
        if drop_constant_injections and case.Qd[i] == 0 and Qg[i] == 0:
            continue
        preds.append(Role("Q_inj", ids[i]))
    if voltage_predictors:
        for i in range(case.n_bus):
            if case.bus_types[i] != PQ:
                preds.append(Role("Vm", ids[i]))

    resp = [Role("Va", ids[i]) for i in range(case.n_bus) if i != case.slack]
    resp += [Role("Vm", ids[i]) for i in case.pq]
    resp += [Role("P_slack", ids[case.slack]), Role("Q_slack", ids[case.slack])]
    resp += [Role("Q_inj", ids[i]) for i in case.pv]
    if branch_responses:
        for k in np.flatnonzero(case.in_service):
            label = case.flow_element(k)
            resp += [Role("P_flow", label), Role("Q_flow", label), Role("loss", label)]
    return VariableSchema(tuple(preds), tuple(resp))


def measurement_schema(case: GridCase, *, flows: bool = True) -> VariableSchema:
    """Every bus measurement as a predictor and every in-service branch flow as a response."""
    ids = case.bus_ids
    preds = [CONST]
    for q in ("Vm", "Va", "P_inj", "Q_inj"):
        preds += [Role(q, b) for b in ids]
    resp = []
    if flows:
        for k in np.flatnonzero(case.in_service):
            fwd, rev = case.flow_element(k), case.flow_element(k, reverse=True)
            resp += [Role("P_flow", fwd), Role("Q_flow", fwd), Role("P_flow", rev), Role("Q_flow", rev)]
            resp.append(Role("loss", fwd))
    return VariableSchema(tuple(preds), tuple(resp), kind="measurement")


# ---------------------------------------------------------------------------
# datasets

@dataclass(frozen=True, eq=False)
class Normalization:
    """Per-column affine maps ``z = (v - offset) / scale``; the intercept column has offset 0, scale 1."""

    mode: str
    x_offset: np.ndarray
    x_scale: np.ndarray
    y_offset: np.ndarray
    y_scale: np.ndarray

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "x_offset": self.x_offset.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_offset": self.y_offset.tolist(),
            "y_scale": self.y_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d is None:
            return None
        return cls(d["mode"], *(np.asarray(d[k], dtype=float) for k in ("x_offset", "x_scale", "y_offset", "y_scale")))

    def normalize_x(self, X):
        return (np.asarray(X, dtype=float) - self.x_offset) / self.x_scale

    def normalize_y(self, Y):
        return (np.asarray(Y, dtype=float) - self.y_offset) / self.y_scale

    def denormalize_x(self, Xn):
        return np.asarray(Xn) * self.x_scale + self.x_offset

    def denormalize_y(self, Yn):
        return np.asarray(Yn) * self.y_scale + self.y_offset


def _readonly(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    schema: VariableSchema
    chronological: bool = True
    normalization: Optional[Normalization] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.atleast_2d(_readonly(self.X))
        Y = _readonly(self.Y)
        if Y.ndim == 1:
            Y = _readonly(Y.reshape(-1, 1))
        if X.shape[0] != Y.shape[0]:
            raise SchemaError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
        if X.shape[1] != self.schema.n_x or Y.shape[1] != self.schema.n_y:
            raise SchemaError(
                f"matrix widths ({X.shape[1]}, {Y.shape[1]}) do not match schema ({self.schema.n_x}, {self.schema.n_y})"
            )
        if X.shape[0] and not np.all(X[:, 0] == 1.0):
            raise SchemaError("first predictor column must be all ones")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    def __len__(self):
        return self.n_samples

    def rows(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, X=self.X[idx], Y=self.Y[idx])

    def with_data(self, X=None, Y=None, schema=None) -> "Dataset":
        return replace(
            self,
            X=self.X if X is None else X,
            Y=self.Y if Y is None else Y,
            schema=self.schema if schema is None else schema,
        )

    @classmethod
    def from_arrays(cls, X, Y, *, predictors=None, responses=None, chronological=True) -> "Dataset":
        """Wrap raw matrices (X already carrying its intercept column) with generic role names."""
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y.reshape(-1, 1)
        preds = predictors or [CONST] + [Role("lift", f"x{j}") for j in range(1, X.shape[1])]
        resp = responses or [Role("P_flow", f"y{j}") for j in range(Y.shape[1])]
        return cls(X, Y, VariableSchema(tuple(preds), tuple(resp), kind="measurement"), chronological)


def state_value(state, role: Role) -> float:
    """Value of ``role`` in a solved operating point."""
    case = state.case
    q = role.quantity
    if q == "const":
        return 1.0
    where = _resolve(case, role)
    if q in ("P_inj", "P_slack"):
        return state.Pinj[where]
    if q in ("Q_inj", "Q_slack"):
        return state.Qinj[where]
    if q == "Vm":
        return state.Vm[where]
    if q == "Va":
        return state.Va[where]
    if q == "Vsq":
        return state.Vm[where] ** 2
    k, rev = where
    if q == "P_flow":
        return state.Pt[k] if rev else state.Pf[k]
    if q == "Q_flow":
        return state.Qt[k] if rev else state.Qf[k]
    if q == "loss":
        return state.Pf[k] + state.Pt[k]
    f, t = case.f[k], case.t[k]
    if q == "R":
        return state.Vm[f] * state.Vm[t] * np.cos(state.Va[f] - state.Va[t])
    if q == "C":
        return state.Vm[f] * state.Vm[t] * np.sin(state.Va[f] - state.Va[t])
    raise SchemaError(f"{role} cannot be read from a power flow state")


def assemble_xy(states: Sequence, schema: VariableSchema) -> Dataset:
    """Stack solved operating points into ``(X, Y)`` in the given order."""
    if len(states) == 0:
        raise SchemaError("no states to assemble")
    case = states[0].case
    schema.validate(case)
    X = np.array([[state_value(s, r) for r in schema.predictors] for s in states])
    Y = np.array([[state_value(s, r) for r in schema.responses] for s in states])
    return Dataset(X, Y, schema, chronological=True)


# ---------------------------------------------------------------------------
# normalization and splitting

def normalize(ds: Dataset, mode: str = "none") -> Dataset:
    """Scale every non-intercept column; parameters are kept on the result for inversion."""
    if mode == "none":
        return ds
    if ds.normalization is not None:
        raise SchemaError("dataset is already normalized")
    if mode == "zscore":
        x_off, x_sc = ds.X.mean(axis=0), ds.X.std(axis=0)
        y_off, y_sc = ds.Y.mean(axis=0), ds.Y.std(axis=0)
    elif mode == "minmax":
        x_off, x_sc = ds.X.min(axis=0), np.ptp(ds.X, axis=0)
        y_off, y_sc = ds.Y.min(axis=0), np.ptp(ds.Y, axis=0)
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    x_off[0], x_sc[0] = 0.0, 1.0
    names = ds.schema.predictor_names + ds.schema.response_names
    flat = np.concatenate([x_sc, y_sc])
    bad = [names[j] for j in np.flatnonzero(flat == 0)]
    if bad:
        raise DegenerateDataError(f"zero-variance columns cannot be normalized: {', '.join(bad)}")
    norm = Normalization(mode, _readonly(x_off), _readonly(x_sc), _readonly(y_off), _readonly(y_sc))
    return replace(ds, X=norm.normalize_x(ds.X), Y=norm.normalize_y(ds.Y), normalization=norm)


def denormalize(ds: Dataset) -> Dataset:
    if ds.normalization is None:
        return ds
    n = ds.normalization
    X = n.denormalize_x(ds.X)
    X[:, 0] = 1.0
    return replace(ds, X=X, Y=n.denormalize_y(ds.Y), normalization=None)


def split(ds: Dataset, train_fraction: float, seed: int = 0):
    """Chronological prefix split, or a seeded shuffle when the rows carry no time order."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = ds.n_samples
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} rows at {train_fraction} leaves one side empty")
    if ds.chronological:
        order = np.arange(n)
    else:
        order = np.random.default_rng(seed).permutation(n)
    return ds.rows(order[:n_train]), ds.rows(order[n_train:])


def concat(datasets: Sequence[Dataset]) -> Dataset:
    first = datasets[0]
    for d in datasets[1:]:
        if d.schema != first.schema:
            raise SchemaError("cannot concatenate datasets with different schemas")
    return replace(first, X=np.vstack([d.X for d in datasets]), Y=np.vstack([d.Y for d in datasets]))


# ---------------------------------------------------------------------------
# CSV export

def write_dataset(ds: Dataset, path) -> Path:
    """Write ``<path>.csv`` plus a ``<path>.schema.json`` sidecar; returns the CSV path."""
    path = Path(path)
    csv_path = path.with_suffix(".csv")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ds.schema.predictor_names + ds.schema.response_names)
        for xr, yr in zip(ds.X, ds.Y):
            w.writerow(["%.17g" % v for v in np.concatenate([xr, yr])])
    sidecar = {
        "schema": ds.schema.to_dict(),
        "chronological": ds.chronological,
        "normalization": ds.normalization.to_dict() if ds.normalization else None,
        "meta": ds.meta,
    }
    with open(path.with_suffix(".schema.json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return csv_path


def read_dataset(path) -> Dataset:
    path = Path(path)
    if path.suffix == ".csv":
        path = path.with_suffix("")
    with open(path.with_suffix(".schema.json")) as fh:
        side = json.load(fh)
    schema = VariableSchema.from_dict(side["schema"])
    with open(path.with_suffix(".csv"), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != schema.predictor_names + schema.response_names:
            raise SchemaError("CSV header does not match the schema sidecar")
        data = np.array([[float(v) for v in row] for row in reader], dtype=float)
    data = data.reshape(-1, len(header))
    return Dataset(
        data[:, : schema.n_x],
        data[:, schema.n_x :],
        schema,
        chronological=side.get("chronological", True),
        normalization=Normalization.from_dict(side.get("normalization")),
        meta=side.get("meta", {}),
    )


# ---------------------------------------------------------------------------
# bundle partition

@dataclass(frozen=True, eq=False)
class BundlePartition:
    """Regrouping of a dataset into known/unknown blocks that survive bus-type changes.

    ``x1_cols`` etc. index into the parent dataset's X (or Y) columns.
    """

    X1: np.ndarray
    X2: np.ndarray
    Y1: np.ndarray
    Y2: np.ndarray
    x1_cols: np.ndarray
    x2_cols: np.ndarray
    y1_cols: np.ndarray
    y2_cols: np.ndarray
    x1_roles: tuple
    x2_roles: tuple
    y1_roles: tuple
    y2_roles: tuple


def bundle_partition(ds: Dataset) -> BundlePartition:
    schema = ds.schema
    x1, x2, y1, q_by_bus = [], [], [], {}
    for j, r in enumerate(schema.predictors):
        if r.quantity in ("const", "P_inj", "Q_inj"):
            x1.append(j)
        elif r.quantity == "Vm":
            x2.append(j)
        else:
            raise SchemaError(f"{r} has no place in the bundle partition")
    for j, r in enumerate(schema.responses):
        if r.quantity in ("Va", "Vm", "P_slack"):
            y1.append(j)
        elif r.quantity in ("Q_slack", "Q_inj"):
            q_by_bus[r.element] = j
        else:
            raise SchemaError(f"{r} has no place in the bundle partition")
    if not x2:
        raise SchemaError("bundle partition needs slack/PV voltage magnitudes as predictors")
    if not any(schema.responses[j].quantity == "P_slack" for j in y1):
        raise SchemaError("bundle partition needs the slack active power as a response")
    if len(x2) != len(q_by_bus):
        raise SchemaError(f"N_x2 = {len(x2)} but N_y2 = {len(q_by_bus)}")
    y2 = []
    for j in x2:
        bus = schema.predictors[j].element
        if bus not in q_by_bus:
            raise SchemaError(f"voltage predictor at bus {bus} has no matching reactive power response")
        y2.append(q_by_bus[bus])
    x1, x2, y1, y2 = (np.array(v, dtype=int) for v in (x1, x2, y1, y2))
    P, R = schema.predictors, schema.responses
    return BundlePartition(
        ds.X[:, x1], ds.X[:, x2], ds.Y[:, y1], ds.Y[:, y2],
        x1, x2, y1, y2,
        tuple(P[j] for j in x1), tuple(P[j] for j in x2),
        tuple(R[j] for j in y1), tuple(R[j] for j in y2),
    )
