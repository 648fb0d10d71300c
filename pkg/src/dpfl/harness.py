"""Experiment pipeline: generate, corrupt, transform, train every configured method, evaluate, report."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import acpf, ls, pls, ridge, supportive, svr, tailored
from .dataset import (Dataset, Role, VariableSchema, assemble_xy, measurement_schema, normalize,
                      split, standard_schema, state_value)
from .errors import SchemaError
from .grid import GridCase, load_case
from .models import Kernel

REPORT_COLUMNS = ("method", "params", "variable_class", "n", "mae", "rmse", "mare", "max_error")
MARE_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class MethodConfig:
    name: str
    grid: dict = field(default_factory=dict)

    def cells(self) -> list:
        """Every hyperparameter combination of the grid, in a fixed order."""
        keys = sorted(self.grid)
        values = [v if isinstance(v, list) else [v] for v in (self.grid[k] for k in keys)]
        if any(len(v) == 0 for v in values):
            raise ValueError(f"empty hyperparameter grid for {self.name}")
        return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


@dataclass(frozen=True)
class ExperimentConfig:
    case: str
    methods: tuple
    n_samples: int = 1500
    train_fraction: float = 2.0 / 3.0
    seed: int = 0
    schema: str = "standard"
    normalization: str = "none"
    fluctuation: dict = field(default_factory=dict)
    noise: Optional[dict] = None
    outliers: Optional[dict] = None
    transform: Optional[dict] = None
    duplicate_predictor: Optional[int] = None
    output_dir: str = "dpfl-out"
    workers: int = 1

    def __post_init__(self):
        if not self.methods:
            raise ValueError("at least one method is required")
        unknown = [m.name for m in self.methods if m.name not in REGISTRY]
        if unknown:
            raise ValueError(f"unknown methods: {', '.join(unknown)}")
        for m in self.methods:
            m.cells()
        if self.schema not in SCHEMAS:
            raise ValueError(f"unknown schema {self.schema!r}; choose from {sorted(SCHEMAS)}")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "ExperimentConfig":
        d = dict(d)
        methods = []
        for m in d.pop("methods", []):
            m = dict(m)
            methods.append(MethodConfig(m.pop("name"), m.pop("grid", m)))
        case = str(d.pop("case"))
        if base_dir is not None and not case.startswith("case") and not Path(case).is_absolute():
            case = str(base_dir / case)
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {', '.join(sorted(extra))}")
        return cls(case=case, methods=tuple(methods), **d)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return ExperimentConfig.from_dict(raw, path.parent)


# ---------------------------------------------------------------------------
# data preparation

def _dc_schema(case):
    return acpf.dc_schema(case)


SCHEMAS = {
    "standard": lambda case: standard_schema(case),
    "standard_v": lambda case: standard_schema(case, voltage_predictors=True),
    "flows": lambda case: standard_schema(case, branch_responses=True),
    "measurement": lambda case: measurement_schema(case),
    "dc": _dc_schema,
}


@dataclass
class PreparedData:
    case: GridCase
    base: acpf.BusState
    fluctuation: acpf.FluctuationSpec
    raw_train: Dataset
    raw_test: Dataset
    train: Dataset
    outlier_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    case = load_case(cfg.case)
    fl = dict(cfg.fluctuation)
    fl.setdefault("seed", cfg.seed)
    spec = acpf.FluctuationSpec(**fl)
    states = acpf.sample_operating_points(case, spec, cfg.n_samples)
    schema = SCHEMAS[cfg.schema](case)
    ds = assemble_xy(states, schema)
    if cfg.duplicate_predictor is not None:
        j = int(cfg.duplicate_predictor)
        preds = schema.predictors + (Role("lift", f"dup{j}"),)
        schema = VariableSchema(preds, schema.responses, "measurement")
        ds = ds.with_data(X=np.hstack([ds.X, ds.X[:, [j]]]), schema=schema)
    train, test = split(ds, cfg.train_fraction, cfg.seed)
    outliers = np.zeros(0, dtype=int)
    if cfg.noise:
        nz = dict(cfg.noise)
        nz.setdefault("seed", cfg.seed + 1)
        train = acpf.inject_noise(train, acpf.NoiseSpec(**nz))
    if cfg.outliers:
        od = dict(cfg.outliers)
        od.setdefault("seed", cfg.seed + 2)
        train, outliers = acpf.inject_outliers(train, acpf.OutlierSpec(**od))
    raw_train = train
    if cfg.transform:
        train = supportive.apply_transform(train, supportive.TransformSpec(**cfg.transform), case)
    train = normalize(train, cfg.normalization)
    base = acpf.solve_power_flow(case)
    return PreparedData(case, base, spec, raw_train, test, train, outliers)


# ---------------------------------------------------------------------------
# method registry

class LocalRidgePredictor:
    """Refits a locally weighted ridge model around every query row."""

    def __init__(self, train: Dataset, spec: ridge.RidgeSpec):
        self.train = train
        self.spec = spec
        self.schema = train.schema
        self.metadata = {"trainer": "lw_ridge", "lambda": spec.lam, "tau": spec.tau}

    def predict(self, X):
        X = np.atleast_2d(X)
        return np.vstack([ridge.fit_locally_weighted_ridge(self.train, self.spec, x).predict(x[None, :]) for x in X])


def _physical_only(data: PreparedData, name: str):
    if data.train.normalization is not None or data.train.schema.transform:
        raise SchemaError(f"{name} is built from network parameters and needs untransformed, unnormalized data")


def _taylor(data, p):
    _physical_only(data, "the Taylor model")
    return acpf.compute_taylor_model(data.case, data.base, data.train.schema)


def _dc(data, p):
    _physical_only(data, "the DC model")
    return acpf.compute_dc_model(data.case, data.train.schema)


def _dc_opt(data, p):
    _physical_only(data, "the DC model")
    return supportive.fit_dc_optimized(data.case, data.train)


def _taylor_corrected(data, p):
    return supportive.fit_error_correction(_taylor(data, p), data.train)


def _wtls(data, p):
    nx, ny = data.train.schema.n_x, data.train.schema.n_y
    sx, sy = p.get("sigma_x", 1.0), p.get("sigma_y", 1.0)
    Sigma = np.diag([0.0] + [sx ** 2] * (nx - 1) + [sy ** 2] * ny)
    return ls.fit_wtls(data.train, ls.WTLSSpec(Sigma))


def _rls(data, p):
    ds = data.train
    n0 = int(p.get("n_init", 2 * ds.schema.n_x))
    st = ls.rls_init(ds.rows(np.arange(n0)), p.get("kappa", 1.0))
    st = ls.rls_stream(st, ds.X[n0:], ds.Y[n0:])
    return st.model()


def _rpls(data, p):
    ds = data.train
    n0 = int(p.get("n_init", 2 * ds.schema.n_x))
    st = pls.rpls_init(ds.rows(np.arange(n0)), p.get("n_components"), p.get("forgetting", 1.0))
    st = pls.rpls_stream(st, ds.X[n0:], ds.Y[n0:])
    return st.model()


def _svr_spec(p, extra=0.0):
    return svr.SVRSpec(omega=p.get("omega", 1.0), epsilon=p.get("epsilon", 1e-3),
                       extra_lambda=p.get("extra_lambda", extra), max_updates=int(p.get("max_updates", 100000)))


def _kernel(p):
    return Kernel(p.get("kernel", "rbf"), p.get("gamma", 1.0), p.get("degree", 2), p.get("coef", 0.0))


def _coupling(data, p):
    schema = data.train.schema
    pairs = p.get("pairs")
    delta = p.get("delta", 0.0)
    if pairs is None:
        pred = set(schema.predictor_names)
        pairs = []
        case = data.case
        for r in schema.responses:
            if r.quantity != "P_flow":
                continue
            k, rev = case.branch_of(r.element)
            ends = [str(case.bus_ids[b]) for b in ((case.t[k], case.f[k]) if rev else (case.f[k], case.t[k]))]
            names = [f"Va@{b}" for b in ends]
            if all(n in pred for n in names):
                pairs.append((names[0], names[1], r.name, delta))
        if not pairs:
            raise SchemaError("no flow response has both terminal angles among the predictors")
    return tailored.fit_linearly_constrained(data.train, tailored.ConstraintSet(coupling=tuple(map(tuple, pairs))))


def _scenarios(data, p):
    n = int(p.get("n_scenarios", 20))
    return data.train.rows(np.arange(min(n, data.train.n_samples)))


def _chance_spec(p, **kw):
    return tailored.ChanceSpec(epsilon=p.get("epsilon", 1e-2), zeta=p.get("zeta", 0.9), big_m=p.get("big_m"),
                               node_budget=int(p.get("node_budget", 1_000_000)), **kw)


def _ccp(data, p):
    return tailored.fit_chance_constrained(_scenarios(data, p), _chance_spec(p))


def _drcc(data, p):
    ds = _scenarios(data, p)
    if data.train.normalization is None and not data.train.schema.transform:
        x = np.array([state_value(data.base, r) for r in ds.schema.predictors])
        y = np.array([state_value(data.base, r) for r in ds.schema.responses])
    else:
        x, y = ds.X[0], ds.Y[0]
    zeta = p.get("zeta", 0.9)
    return tailored.fit_drcc_phi(ds, _chance_spec(p, operating_point=(x, y), zeta_adjusted=p.get("zeta_adjusted", zeta)))


def _lcp_bounds(data, p):
    _physical_only(data, "Taylor-corner bounds")
    lo, hi = tailored.taylor_corner_bounds(data.case, data.train.schema, data.fluctuation)
    return tailored.fit_linearly_constrained(data.train, tailored.ConstraintSet(bounds=(lo, hi)))


REGISTRY: dict = {
    "ols": lambda d, p: ls.fit_ols(d.train),
    "ols_cod": lambda d, p: ls.fit_ols_decomposed(d.train, "cod"),
    "ols_svd": lambda d, p: ls.fit_ols_decomposed(d.train, "svd"),
    "huber": lambda d, p: ls.fit_huber(d.train, ls.HuberSpec(delta=p.get("delta"))),
    "gls": lambda d, p: ls.fit_gls(d.train, ls.GLSSpec(ls.ar1_covariance(d.train.n_samples, p.get("rho", 0.0)))),
    "tls": lambda d, p: ls.fit_tls(d.train),
    "wtls": _wtls,
    "cls_ls": lambda d, p: ls.fit_clustered_ls(d.train, int(p.get("K", 2)), p.get("clusterer", "kmeans"), int(p.get("seed", 0))),
    "rls": _rls,
    "pls_nipals": lambda d, p: pls.fit_pls(d.train, p.get("n_components"), "nipals"),
    "pls_simpls": lambda d, p: pls.fit_pls(d.train, p.get("n_components"), "simpls"),
    "rpls": _rpls,
    "ridge": lambda d, p: ridge.fit_ridge(d.train, ridge.RidgeSpec(lam=p.get("lam", 0.0))),
    "lw_ridge": lambda d, p: LocalRidgePredictor(d.train, ridge.RidgeSpec(lam=p.get("lam", 0.0), tau=p.get("tau", 1.0))),
    "kplane_ridge": lambda d, p: ridge.fit_kplane_ridge(d.train, ridge.RidgeSpec(
        lam=p.get("lam", 0.0), eta=p.get("eta", 0.0), K=int(p.get("K", 2)), seed=int(p.get("seed", 0)))),
    "svr": lambda d, p: svr.fit_svr(d.train, _svr_spec(p)),
    "svr_l2": lambda d, p: svr.fit_svr(d.train, _svr_spec(p, extra=0.1)),
    "svr_kernel": lambda d, p: svr.fit_kernel_svr(d.train, _svr_spec(p), _kernel(p)),
    "lcp_bounds": _lcp_bounds,
    "lcp_structure": lambda d, p: tailored.fit_linearly_constrained(
        d.train, tailored.ConstraintSet(structure=tuple(p.get("flags", tailored.STRUCTURE_FLAGS)))),
    "lcp_coupling": _coupling,
    "ccp": _ccp,
    "drcc_phi": _drcc,
    "taylor": _taylor,
    "dc": _dc,
    "dc_opt": _dc_opt,
    "taylor_corrected": _taylor_corrected,
}


def register_method(name: str, fn: Callable) -> None:
    """Add a trainer ``fn(prepared_data, params) -> model`` under ``name``."""
    REGISTRY[name] = fn


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class ClassMetrics:
    n: int
    mae: float
    rmse: float
    mare: float
    max_error: float


@dataclass
class EvalReport:
    method: str
    params: dict
    metrics: dict
    train_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"method": self.method, "params": self.params, "train_seconds": self.train_seconds,
                "metrics": {k: asdict(v) for k, v in self.metrics.items()}}

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        return cls(d["method"], d["params"], {k: ClassMetrics(**v) for k, v in d["metrics"].items()},
                   d.get("train_seconds", 0.0))

    def __eq__(self, other):
        return isinstance(other, EvalReport) and self.to_dict() == other.to_dict()


@dataclass
class FailureRecord:
    method: str
    params: dict
    kind: str
    message: str


def variable_class(role: Role) -> str:
    return role.quantity


def predict_physical(model, X, normalization=None) -> np.ndarray:
    """Predictions in physical units for raw predictor rows ``X``."""
    schema = model.schema
    norm = normalization if normalization is not None else getattr(model, "normalization", None)
    Xt = supportive.transform_predictors(X, schema)
    if norm is not None:
        Xt = norm.normalize_x(Xt)
        Xt[:, 0] = 1.0
    Yt = model.predict(Xt)
    if norm is not None:
        Yt = norm.denormalize_y(Yt)
    return supportive.invert_transform(Yt, schema)


def evaluate(model, test: Dataset, *, normalization=None, method: Optional[str] = None,
             params: Optional[dict] = None, train_seconds: float = 0.0) -> EvalReport:
    """Per-variable-class error statistics of ``model`` on raw (physical) ``test`` data."""
    schema = model.schema
    t = schema.transform
    responses = t["responses"] if t else schema.response_names
    base_preds = schema.predictor_names[:t["n_base_predictors"]] if t and t["kind"] == "dimension_lift" \
        else schema.predictor_names
    if responses != test.schema.response_names or base_preds != test.schema.predictor_names:
        raise SchemaError("model and test data have different schemas")
    Yhat = predict_physical(model, test.X, normalization)
    err = Yhat - test.Y
    classes = {}
    for j, r in enumerate(test.schema.responses):
        classes.setdefault(variable_class(r), []).append(j)
    metrics = {}
    for cls_name, cols in sorted(classes.items()):
        e = err[:, cols]
        denom = np.maximum(np.abs(test.Y[:, cols]), MARE_FLOOR)
        metrics[cls_name] = ClassMetrics(
            n=int(e.size),
            mae=float(np.mean(np.abs(e))),
            rmse=float(np.sqrt(np.mean(e * e))),
            mare=float(np.mean(np.abs(e) / denom)),
            max_error=float(np.max(np.abs(e))),
        )
    return EvalReport(method or model.metadata.get("trainer", "model"), dict(params or {}), metrics, train_seconds)


# ---------------------------------------------------------------------------
# running

def _params_key(params: dict) -> str:
    return json.dumps(params, sort_keys=True, separators=(",", ":"))


def run_cell(data: PreparedData, method: str, params: dict):
    """Train and evaluate one (method, hyperparameters) cell; any error becomes a failure record."""
    start = time.perf_counter()
    try:
        model = REGISTRY[method](data, params)
        seconds = time.perf_counter() - start
        norm = data.train.normalization if method not in ("taylor", "dc", "dc_opt") else None
        return evaluate(model, data.raw_test, normalization=norm, method=method, params=params,
                        train_seconds=seconds), model
    except Exception as exc:  # noqa: BLE001  isolation: one bad cell never aborts the sweep
        kind = getattr(exc, "kind", type(exc).__name__)
        return FailureRecord(method, dict(params), kind, str(exc)), None


@dataclass
class ExperimentResult:
    reports: list
    failures: list
    models: dict = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return 2 if self.failures else 0


def run_experiment(cfg: ExperimentConfig, *, keep_models: bool = False) -> ExperimentResult:
    data = prepare_data(cfg)
    cells = [(m.name, p) for m in cfg.methods for p in m.cells()]
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            outcomes = list(pool.map(lambda c: run_cell(data, *c), cells))
    else:
        outcomes = [run_cell(data, *c) for c in cells]
    reports, failures, models = [], [], {}
    for (name, params), (out, model) in zip(cells, outcomes):
        if isinstance(out, FailureRecord):
            failures.append(out)
        else:
            reports.append(out)
            if keep_models:
                models[(name, _params_key(params))] = model
    reports.sort(key=lambda r: (r.method, _params_key(r.params)))
    failures.sort(key=lambda f: (f.method, _params_key(f.params)))
    return ExperimentResult(reports, failures, models)


# ---------------------------------------------------------------------------
# reporting

def report_rows(reports) -> list:
    rows = []
    for r in sorted(reports, key=lambda r: (r.method, _params_key(r.params))):
        for cls_name in sorted(r.metrics):
            m = r.metrics[cls_name]
            rows.append((r.method, _params_key(r.params), cls_name, m.n, m.mae, m.rmse, m.mare, m.max_error))
    return rows


def _fmt(v):
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def reports_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in report_rows(reports):
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def emit_report(reports, out_dir, fmt: str = "csv", *, failures=(), stem: str = "report") -> list:
    """Write ``<stem>.csv`` (long format, one row per method/params/class) or ``<stem>.json``."""
    if not reports:
        raise ValueError("no reports to emit")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt == "csv":
        p = out_dir / f"{stem}.csv"
        p.write_text(reports_csv(reports))
        written.append(p)
        if failures:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(("method", "params", "kind", "message"))
            for f in failures:
                w.writerow((f.method, _params_key(f.params), f.kind, f.message))
            fp = out_dir / "failures.csv"
            fp.write_text(buf.getvalue())
            written.append(fp)
    elif fmt == "json":
        p = out_dir / f"{stem}.json"
        payload = {"reports": [r.to_dict() for r in sorted(reports, key=lambda r: (r.method, _params_key(r.params)))],
                   "failures": [asdict(f) for f in failures]}
        p.write_text(json.dumps(payload, indent=1, sort_keys=True))
        written.append(p)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return written


def load_reports(path) -> list:
    with open(path) as fh:
        return [EvalReport.from_dict(d) for d in json.load(fh)["reports"]]


def model_filename(method: str, params: dict) -> str:
    digest = hashlib.sha1(_params_key(params).encode()).hexdigest()[:10]
    return f"{method}-{digest}.json"
