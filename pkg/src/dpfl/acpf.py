"""AC power flow: Newton-Raphson solver, operating-point sampling, data corruption and physics baselines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataset import Dataset, Role, VariableSchema, _resolve
from .errors import ConvergenceError, SamplingError, SchemaError, SingularMatrixError
from .grid import PQ, GridCase, branch_admittances, complex_ybus
from .models import LinearModel


@dataclass(frozen=True, eq=False)
class BusState:
    """A solved operating point (all quantities per-unit / radians)."""

    case: GridCase
    Vm: np.ndarray
    Va: np.ndarray
    Pinj: np.ndarray
    Qinj: np.ndarray
    Pf: np.ndarray
    Qf: np.ndarray
    Pt: np.ndarray
    Qt: np.ndarray
    iterations: int = 0
    mismatch: float = 0.0

    @property
    def V(self) -> np.ndarray:
        return self.Vm * np.exp(1j * self.Va)

    @property
    def loss(self) -> np.ndarray:
        return self.Pf + self.Pt


def power_injections(case: GridCase, Vm, Va, Y=None):
    Y = complex_ybus(case) if Y is None else Y
    V = np.asarray(Vm) * np.exp(1j * np.asarray(Va))
    S = V * np.conj(Y @ V)
    return S.real, S.imag


def branch_flows(case: GridCase, Vm, Va):
    """``(Pf, Qf, Pt, Qt)`` per branch, measured at the from and to terminals."""
    yff, yft, ytf, ytt = branch_admittances(case)
    V = np.asarray(Vm) * np.exp(1j * np.asarray(Va))
    Vf, Vt = V[case.f], V[case.t]
    Sf = Vf * np.conj(yff * Vf + yft * Vt)
    St = Vt * np.conj(ytf * Vf + ytt * Vt)
    return Sf.real, Sf.imag, St.real, St.imag


def _dS_dV(Y, V):
    """Partial derivatives of complex bus injections w.r.t. angles and magnitudes."""
    I = Y @ V
    Vnorm = V / np.abs(V)
    dS_dVa = 1j * np.diag(V) @ np.conj(np.diag(I) - Y * V[None, :])
    dS_dVm = np.diag(V) @ np.conj(Y * Vnorm[None, :]) + np.diag(np.conj(I) * Vnorm)
    return dS_dVa, dS_dVm


def solve_power_flow(
    case: GridCase,
    P=None,
    Q=None,
    Vset=None,
    *,
    init=None,
    tol: float = 1e-8,
    max_iter: int = 50,
) -> BusState:
    """Polar Newton-Raphson power flow.

    ``P``/``Q`` are net per-bus injections in p.u. (only PV/PQ entries of ``P``
    and PQ entries of ``Q`` are used); ``Vset`` holds voltage magnitudes used
    at PV and slack buses. Defaults come from the case. ``init`` is an
    optional ``(Vm, Va)`` warm start; otherwise the start is flat.
    """
    P0, Q0 = case.scheduled_injections()
    P = P0 if P is None else np.asarray(P, dtype=float)
    Q = Q0 if Q is None else np.asarray(Q, dtype=float)
    Vset = case.voltage_setpoints() if Vset is None else np.asarray(Vset, dtype=float)

    n = case.n_bus
    ref, pv, pq = case.slack, case.pv, case.pq
    pvpq = np.r_[pv, pq]
    if init is None:
        Vm = np.ones(n)
        Va = np.zeros(n)
    else:
        Vm, Va = (np.array(a, dtype=float) for a in init)
    Vm[pv] = Vset[pv]
    Vm[ref] = Vset[ref]
    Va[ref] = case.Va[ref]

    Y = complex_ybus(case)
    Sspec = P + 1j * Q
    npvpq, npq = len(pvpq), len(pq)

    def mismatch(V):
        dS = V * np.conj(Y @ V) - Sspec
        return np.r_[dS.real[pvpq], dS.imag[pq]]

    V = Vm * np.exp(1j * Va)
    F = mismatch(V)
    norm = np.max(np.abs(F)) if F.size else 0.0
    it = 0
    while norm >= tol:
        if it >= max_iter:
            raise ConvergenceError(f"no convergence in {max_iter} iterations (mismatch {norm:.3e})")
        if not np.isfinite(norm) or norm > 1e10:
            raise ConvergenceError(f"mismatch diverged after {it} iterations")
        dS_dVa, dS_dVm = _dS_dV(Y, V)
        J = np.block([
            [dS_dVa.real[np.ix_(pvpq, pvpq)], dS_dVm.real[np.ix_(pvpq, pq)]],
            [dS_dVa.imag[np.ix_(pq, pvpq)], dS_dVm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            raise SingularMatrixError(f"singular Jacobian at iteration {it}") from None
        Va[pvpq] += dx[:npvpq]
        Vm[pq] += dx[npvpq:npvpq + npq]
        V = Vm * np.exp(1j * Va)
        F = mismatch(V)
        norm = np.max(np.abs(F)) if F.size else 0.0
        it += 1
    if np.any(Vm <= 0) or not np.all(np.isfinite(V)):
        raise ConvergenceError("converged to a non-physical voltage solution")

    S = V * np.conj(Y @ V)
    Pf, Qf, Pt, Qt = branch_flows(case, Vm, Va)
    return BusState(case, Vm.copy(), Va.copy(), S.real, S.imag, Pf, Qf, Pt, Qt, it, float(norm))


# ---------------------------------------------------------------------------
# sampling

@dataclass(frozen=True)
class FluctuationSpec:
    """Random operating-region sampling around the base case.

    Loads are scaled by factors in ``[1 - relative_range, 1 + relative_range]``;
    PV generation by ``pv_range`` (defaults to ``relative_range``); PV/slack
    voltage set points by ``vset_range`` (off by default).
    """

    relative_range: float = 0.2
    distribution: str = "uniform"
    correlate_pq: bool = False
    seed: int = 0
    pv_range: Optional[float] = None
    vset_range: float = 0.0

    def __post_init__(self):
        for name in ("relative_range", "vset_range"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if self.pv_range is not None and not 0 <= self.pv_range < 1:
            raise ValueError(f"pv_range must lie in [0, 1), got {self.pv_range}")
        if self.distribution not in ("uniform", "gaussian-truncated"):
            raise ValueError(f"unknown distribution {self.distribution!r}")


def _factors(rng, spec, alpha, size):
    if alpha == 0:
        return np.ones(size)
    if spec.distribution == "uniform":
        return 1.0 + rng.uniform(-alpha, alpha, size)
    # standard normal truncated at +-3 sigma, mapped onto the same interval
    z = rng.standard_normal(size)
    bad = np.abs(z) > 3
    while np.any(bad):
        z[bad] = rng.standard_normal(np.count_nonzero(bad))
        bad = np.abs(z) > 3
    return 1.0 + alpha * z / 3.0


def draw_injections(case: GridCase, spec: FluctuationSpec, rng):
    """One random ``(P, Q, Vset)`` draw."""
    n = case.n_bus
    fp = _factors(rng, spec, spec.relative_range, n)
    fq = fp if spec.correlate_pq else _factors(rng, spec, spec.relative_range, n)
    pv_alpha = spec.relative_range if spec.pv_range is None else spec.pv_range
    fg = _factors(rng, spec, pv_alpha, n)
    fv = _factors(rng, spec, spec.vset_range, n)
    Pg, Qg = case.generation()
    Pg = Pg.copy()
    Pg[case.pv] *= fg[case.pv]
    P = Pg - case.Pd * fp
    Q = Qg - case.Qd * fq
    Vset = case.voltage_setpoints() * fv
    return P, Q, Vset


def sample_operating_points(case: GridCase, spec: FluctuationSpec, n: int) -> list:
    """``n`` converged states, in draw order.

    Attempt ``a`` uses the generator seeded by ``(spec.seed, a)`` so any draw
    can be reproduced on its own. Non-convergent draws are skipped.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    states = []
    for attempt in range(10 * n):
        rng = np.random.default_rng([spec.seed, attempt])
        P, Q, Vset = draw_injections(case, spec, rng)
        try:
            states.append(solve_power_flow(case, P, Q, Vset))
        except (ConvergenceError, SingularMatrixError):
            continue
        if len(states) == n:
            return states
    raise SamplingError(f"only {len(states)} of {n} draws converged within {10 * n} attempts")


# ---------------------------------------------------------------------------
# corruption

@dataclass(frozen=True)
class NoiseSpec:
    """``std_rel`` is a scalar or a per-quantity mapping (e.g. ``{"Vm": 0.001}``) with ``"default"``."""

    std_rel: object = 0.0
    seed: int = 0
    corrupt_x: bool = True
    corrupt_y: bool = True

    def level(self, role: Role) -> float:
        if isinstance(self.std_rel, dict):
            v = self.std_rel.get(role.quantity, self.std_rel.get("default", 0.0))
        else:
            v = self.std_rel
        if v < 0:
            raise ValueError("std_rel must be non-negative")
        return float(v)


@dataclass(frozen=True)
class OutlierSpec:
    fraction: float = 0.0
    magnitude_factor: float = 5.0
    seed: int = 0
    columns: Optional[tuple] = None

    def __post_init__(self):
        if not 0 <= self.fraction < 1:
            raise ValueError("fraction must lie in [0, 1)")
        if not self.magnitude_factor > 1:
            raise ValueError("magnitude_factor must exceed 1")


def inject_noise(ds: Dataset, spec: NoiseSpec) -> Dataset:
    """Additive Gaussian noise with per-column std ``std_rel * RMS(column)``; the intercept is untouched."""
    rng = np.random.default_rng(spec.seed)
    X, Y = ds.X.copy(), ds.Y.copy()
    sx = np.array([spec.level(r) for r in ds.schema.predictors]) * np.sqrt((X ** 2).mean(axis=0))
    sy = np.array([spec.level(r) for r in ds.schema.responses]) * np.sqrt((Y ** 2).mean(axis=0))
    sx[0] = 0.0
    nx = rng.standard_normal(X.shape) * sx
    ny = rng.standard_normal(Y.shape) * sy
    if spec.corrupt_x:
        X = X + nx
    if spec.corrupt_y:
        Y = Y + ny
    X[:, 0] = 1.0
    return ds.with_data(X, Y)


def inject_outliers(ds: Dataset, spec: OutlierSpec):
    """Scale the responses of ``round(fraction * N)`` seeded rows by ``magnitude_factor``.

    Returns ``(corrupted, row_indices)``.
    """
    n = ds.n_samples
    k = int(round(spec.fraction * n))
    rng = np.random.default_rng(spec.seed)
    idx = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=int)
    Y = ds.Y.copy()
    cols = slice(None) if spec.columns is None else list(spec.columns)
    sub = Y[idx]
    sub[:, cols] *= spec.magnitude_factor
    Y[idx] = sub
    return ds.with_data(Y=Y), idx


# ---------------------------------------------------------------------------
# physics baselines

def _input_index(case: GridCase):
    """Ordering of the specified quantities that pin down a power flow solution."""
    ids = case.bus_ids
    keys = []
    for i in range(case.n_bus):
        if i != case.slack:
            keys.append(("P_inj", ids[i]))
    for i in case.pq:
        keys.append(("Q_inj", ids[i]))
    for i in range(case.n_bus):
        if case.bus_types[i] != PQ:
            keys.append(("Vm", ids[i]))
    keys.append(("Va", ids[case.slack]))
    return {k: j for j, k in enumerate(keys)}


def voltage_sensitivities(case: GridCase, base: BusState) -> np.ndarray:
    """``d[Va; Vm] / du`` at ``base``, with ``u`` ordered as in ``_input_index``.

    Obtained by differentiating the full set of power flow equations
    (injection balance at non-slack buses, fixed magnitudes at PV/slack, fixed
    slack angle) and inverting the resulting square Jacobian.
    """
    n = case.n_bus
    Y = complex_ybus(case)
    dS_dVa, dS_dVm = _dS_dV(Y, base.V)
    nonslack = np.array([i for i in range(n) if i != case.slack], dtype=int)
    gen = np.array([i for i in range(n) if case.bus_types[i] != PQ], dtype=int)
    rows = [
        np.hstack([dS_dVa.real[nonslack], dS_dVm.real[nonslack]]),
        np.hstack([dS_dVa.imag[case.pq], dS_dVm.imag[case.pq]]),
        np.hstack([np.zeros((len(gen), n)), np.eye(n)[gen]]),
        np.hstack([np.eye(n)[[case.slack]], np.zeros((1, n))]),
    ]
    J = np.vstack(rows)
    try:
        sens = np.linalg.solve(J, np.eye(2 * n))
    except np.linalg.LinAlgError:
        raise SingularMatrixError("singular power flow Jacobian at the base point") from None
    if not np.all(np.isfinite(sens)) or np.linalg.cond(J) > 1e14:
        raise SingularMatrixError("singular power flow Jacobian at the base point")
    return sens


def _response_gradient(case, base, role, Y, dS, flows):
    """Gradient of one response w.r.t. ``[Va; Vm]`` at the base state."""
    n = case.n_bus
    g = np.zeros(2 * n)
    q = role.quantity
    where = _resolve(case, role)
    if q == "Va":
        g[where] = 1.0
    elif q == "Vm":
        g[n + where] = 1.0
    elif q == "Vsq":
        g[n + where] = 2.0 * base.Vm[where]
    elif q in ("P_inj", "P_slack", "Q_inj", "Q_slack"):
        dS_dVa, dS_dVm = dS
        part = np.real if q.startswith("P") else np.imag
        g[:n] = part(dS_dVa[where])
        g[n:] = part(dS_dVm[where])
    elif q in ("P_flow", "Q_flow", "loss"):
        k, rev = where
        dSf, dSt = flows[k]
        if q == "loss":
            g = (dSf + dSt).real
        else:
            d = dSt if rev else dSf
            g = d.real if q == "P_flow" else d.imag
    else:
        raise SchemaError(f"no physical sensitivity for {role}")
    return g


def _flow_derivatives(case, base):
    """Per branch, derivative of the complex terminal flows w.r.t. ``[Va; Vm]``."""
    n = case.n_bus
    yff, yft, ytf, ytt = branch_admittances(case)
    V = base.V
    out = []
    for k in range(case.n_branch):
        f, t = case.f[k], case.t[k]
        If = yff[k] * V[f] + yft[k] * V[t]
        It = ytf[k] * V[f] + ytt[k] * V[t]
        dSf = np.zeros(2 * n, dtype=complex)
        dSt = np.zeros(2 * n, dtype=complex)
        for bus in {f, t}:
            for col, dv in ((bus, 1j * V[bus]), (n + bus, V[bus] / abs(V[bus]))):
                dVf = dv if bus == f else 0.0
                dVt = dv if bus == t else 0.0
                dSf[col] += dVf * np.conj(If) + V[f] * np.conj(yff[k] * dVf + yft[k] * dVt)
                dSt[col] += dVt * np.conj(It) + V[t] * np.conj(ytf[k] * dVf + ytt[k] * dVt)
        out.append((dSf, dSt))
    return out


def compute_taylor_model(case: GridCase, base: BusState, schema: VariableSchema) -> LinearModel:
    """First-order expansion of the schema's responses around ``base``.

    Predictors must be specified power flow inputs (non-slack P, PQ Q,
    PV/slack Vm, slack Va). Inputs absent from the schema are held at their
    base values. The intercept makes the model exact at ``base``.
    """
    from .dataset import state_value

    schema.validate(case)
    index = _input_index(case)
    sens = voltage_sensitivities(case, base)
    Y = complex_ybus(case)
    dS = _dS_dV(Y, base.V)
    flows = _flow_derivatives(case, base)

    cols = []
    for role in schema.predictors[1:]:
        key = (role.quantity, case.bus_ids[case.index_of(role.element)]) if role.quantity != "lift" else None
        if key not in index:
            raise SchemaError(f"{role} is not a specified power flow input")
        cols.append(index[key])
    cols = np.array(cols, dtype=int)

    beta = np.zeros((schema.n_x, schema.n_y))
    for j, role in enumerate(schema.responses):
        g = _response_gradient(case, base, role, Y, dS, flows)
        beta[1:, j] = (g @ sens)[cols]
    x0 = np.array([state_value(base, r) for r in schema.predictors])
    y0 = np.array([state_value(base, r) for r in schema.responses])
    beta[0] = y0 - x0[1:] @ beta[1:]
    return LinearModel(beta, schema, metadata={"trainer": "taylor"})


def dc_schema(case: GridCase) -> VariableSchema:
    """Non-slack bus angles in, forward active branch flows out."""
    ids = case.bus_ids
    preds = [Role("const", "1")] + [Role("Va", ids[i]) for i in range(case.n_bus) if i != case.slack]
    resp = [Role("P_flow", case.flow_element(k)) for k in np.flatnonzero(case.in_service)]
    return VariableSchema(tuple(preds), tuple(resp), kind="measurement")


def compute_dc_model(case: GridCase, schema: Optional[VariableSchema] = None, *, scale=None) -> LinearModel:
    """Lossless angle-only flows ``P_ij = theta_ij / x_ij``.

    ``scale`` optionally multiplies each response's coefficients (per-branch
    correction factors). A slack angle missing from the predictors is taken as zero.
    """
    schema = dc_schema(case) if schema is None else schema
    schema.validate(case)
    col = {r.element: j for j, r in enumerate(schema.predictors) if r.quantity == "Va"}
    beta = np.zeros((schema.n_x, schema.n_y))
    for j, role in enumerate(schema.responses):
        if role.quantity != "P_flow":
            raise SchemaError(f"the DC model only predicts active branch flows, not {role}")
        k, rev = _resolve(case, role)
        if case.x[k] == 0:
            raise SingularMatrixError(f"branch {case.branch_labels[k]} has zero reactance")
        sign = -1.0 if rev else 1.0
        for bus, s in ((case.f[k], 1.0), (case.t[k], -1.0)):
            bus_id = str(case.bus_ids[bus])
            if bus_id in col:
                beta[col[bus_id], j] += sign * s / case.x[k]
            elif bus != case.slack:
                raise SchemaError(f"angle at bus {bus_id} missing from the predictors")
        if scale is not None:
            beta[:, j] *= scale[j]
    return LinearModel(beta, schema, metadata={"trainer": "dc"})


def check_residuals(state: BusState) -> float:
    """Infinity norm of the injection balance at ``state``."""
    P, Q = power_injections(state.case, state.Vm, state.Va)
    return float(max(np.max(np.abs(P - state.Pinj)), np.max(np.abs(Q - state.Qinj))))

