"""Constrained trainers: linear constraints on the coefficients, scenario chance constraints
(big-M with branch and bound) and the divergence-based distributionally robust variant."""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .acpf import FluctuationSpec, compute_taylor_model, solve_power_flow
from .dataset import Dataset, Role, VariableSchema
from .errors import InfeasibleError, NodeBudgetError, SchemaError
from .grid import GridCase
from .models import LinearModel
from .qp import solve_qp

STRUCTURE_FLAGS = ("symmetry", "diagonality")
_FLOW_QUANTITIES = ("P_flow", "Q_flow", "loss", "R", "C")


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """Linear restrictions on ``beta`` (rows = predictors, columns = responses).

    ``bounds`` is ``(lower, upper)`` with infinite entries meaning free.
    ``structure`` holds any of ``STRUCTURE_FLAGS``; the blocks are taken from
    the buses that appear as P/Q predictors and Va/Vm responses at once.
    ``coupling`` entries ``(row_n, row_m, col_j, delta)`` impose
    ``|beta[n, j] + beta[m, j]| <= delta``; rows and columns may be indices or
    role names.
    """

    bounds: Optional[tuple] = None
    structure: tuple = ()
    coupling: tuple = ()

    def __post_init__(self):
        if self.bounds is not None:
            lo, hi = (np.asarray(a, dtype=float) for a in self.bounds)
            if lo.shape != hi.shape:
                raise ValueError("lower and upper bounds differ in shape")
            if np.any(lo > hi):
                raise InfeasibleError("lower bound exceeds upper bound")
            object.__setattr__(self, "bounds", (lo, hi))
        bad = set(self.structure) - set(STRUCTURE_FLAGS)
        if bad:
            raise ValueError(f"unknown structure flags {sorted(bad)}")
        object.__setattr__(self, "structure", tuple(self.structure))
        coupling = tuple(tuple(c) for c in self.coupling)
        for c in coupling:
            if len(c) != 4 or not c[3] >= 0:
                raise ValueError(f"coupling entries are (row_n, row_m, col_j, delta >= 0), got {c}")
        object.__setattr__(self, "coupling", coupling)

    @property
    def couples_responses(self) -> bool:
        return bool(self.structure)


def _lookup(names, key, what):
    if isinstance(key, (int, np.integer)):
        if not 0 <= key < len(names):
            raise SchemaError(f"{what} index {key} out of range")
        return int(key)
    name = key.name if isinstance(key, Role) else str(key)
    try:
        return names.index(name)
    except ValueError:
        raise SchemaError(f"{what} {name!r} not in schema") from None


def structure_blocks(schema: VariableSchema):
    """Bus ids shared by the P/Q predictor and Va/Vm response blocks, with their indices."""
    if any(r.quantity in _FLOW_QUANTITIES for r in schema.responses):
        raise SchemaError("structure constraints only cover bus voltage responses, not branch quantities")
    pred = {(r.quantity, r.element): i for i, r in enumerate(schema.predictors)}
    resp = {(r.quantity, r.element): j for j, r in enumerate(schema.responses)}
    buses = [r.element for r in schema.predictors if r.quantity == "P_inj"
             and ("Q_inj", r.element) in pred and ("Va", r.element) in resp and ("Vm", r.element) in resp]
    if not buses:
        raise SchemaError("no bus appears in all of the P_inj, Q_inj, Va and Vm blocks")
    P = [pred[("P_inj", b)] for b in buses]
    Q = [pred[("Q_inj", b)] for b in buses]
    A = [resp[("Va", b)] for b in buses]
    V = [resp[("Vm", b)] for b in buses]
    return buses, P, Q, A, V


def constraint_rows(cs: ConstraintSet, schema: VariableSchema):
    """Constraint matrices over ``vec(beta)`` (column-major: response ``j`` occupies ``j*N_x .. j*N_x+N_x-1``)."""
    nx, ny = schema.n_x, schema.n_y
    n = nx * ny

    def idx(i, j):
        return j * nx + i

    A, b, E, d = [], [], [], []
    if cs.bounds is not None:
        lo, hi = cs.bounds
        if lo.shape != (nx, ny):
            raise SchemaError(f"bounds shape {lo.shape} does not match ({nx}, {ny})")
        for i in range(nx):
            for j in range(ny):
                if lo[i, j] == hi[i, j]:
                    row = np.zeros(n); row[idx(i, j)] = 1.0
                    E.append(row); d.append(lo[i, j])
                    continue
                if np.isfinite(hi[i, j]):
                    row = np.zeros(n); row[idx(i, j)] = 1.0
                    A.append(row); b.append(hi[i, j])
                if np.isfinite(lo[i, j]):
                    row = np.zeros(n); row[idx(i, j)] = -1.0
                    A.append(row); b.append(-lo[i, j])
    if cs.structure:
        _, P, Q, Va, Vm = structure_blocks(schema)
        nb = len(P)

        def eq(terms):
            row = np.zeros(n)
            for (i, j), s in terms:
                row[idx(i, j)] += s
            E.append(row); d.append(0.0)

        for a, c in itertools.combinations(range(nb), 2):
            if "diagonality" in cs.structure:
                # off-diagonal parts of the two diagonal blocks vanish
                for p, q in ((a, c), (c, a)):
                    eq([((P[p], Va[q]), 1.0), ((Q[p], Vm[q]), -1.0)])
                    eq([((Q[p], Va[q]), 1.0), ((P[p], Vm[q]), 1.0)])
            if "symmetry" in cs.structure:
                eq([((P[a], Va[c]), 1.0), ((Q[a], Vm[c]), 1.0), ((P[c], Va[a]), -1.0), ((Q[c], Vm[a]), -1.0)])
                eq([((Q[a], Va[c]), 1.0), ((P[a], Vm[c]), -1.0), ((Q[c], Va[a]), -1.0), ((P[c], Vm[a]), 1.0)])
    pnames, rnames = schema.predictor_names, schema.response_names
    for rn, rm, cj, delta in cs.coupling:
        i1, i2 = _lookup(pnames, rn, "predictor"), _lookup(pnames, rm, "predictor")
        j = _lookup(rnames, cj, "response")
        row = np.zeros(n)
        row[idx(i1, j)] += 1.0
        row[idx(i2, j)] += 1.0
        if delta == 0:
            E.append(row); d.append(0.0)
        else:
            A.append(row); b.append(delta)
            A.append(-row); b.append(delta)
    as_mat = lambda rows: np.array(rows).reshape(-1, n)
    return as_mat(A), np.array(b, dtype=float), as_mat(E), np.array(d, dtype=float)


def fit_linearly_constrained(ds: Dataset, constraints: ConstraintSet, *, tol: float = 1e-9) -> LinearModel:
    """Least squares over all responses jointly, subject to ``constraints``."""
    X, Y = ds.X, ds.Y
    nx, ny = X.shape[1], Y.shape[1]
    A, b, E, d = constraint_rows(constraints, ds.schema)
    G = X.T @ X
    H = np.kron(np.eye(ny), G)
    c = -(X.T @ Y).reshape(-1, order="F")
    res = solve_qp(H, c, A, b, E, d, tol=tol)
    beta = res.z.reshape((nx, ny), order="F")
    if E.shape[0]:
        # equalities hold to solver precision; project once more so they hold to rounding
        z = res.z - np.linalg.lstsq(E, E @ res.z - d, rcond=None)[0]
        beta = z.reshape((nx, ny), order="F")
    kinds = [k for k, on in (("bounds", constraints.bounds is not None), ("structure", bool(constraints.structure)),
                             ("coupling", bool(constraints.coupling))) if on]
    return LinearModel(beta, ds.schema, ds.normalization, {
        "trainer": "lcp_" + "_".join(kinds) if kinds else "lcp", "iterations": res.iterations,
        "kkt_residual": res.kkt_residual, "n_inequalities": int(A.shape[0]), "n_equalities": int(E.shape[0])})


def taylor_corner_bounds(case: GridCase, schema: VariableSchema, spec: FluctuationSpec = FluctuationSpec(),
                         *, max_corners: int = 64, seed: int = 0):
    """Element-wise min/max of Taylor coefficients over corners of the fluctuation box.

    Each loaded bus (one factor shared by P and Q) and each PV generator is
    pushed to either end of its range. All corners are used when there are at
    most ``log2(max_corners)`` such factors; otherwise the two uniform corners
    plus a seeded random subset.
    """
    alpha = spec.relative_range
    pv_alpha = alpha if spec.pv_range is None else spec.pv_range
    loads = [i for i in range(case.n_bus) if case.Pd[i] != 0 or case.Qd[i] != 0]
    gens = [i for i in case.pv if pv_alpha > 0]
    dims = len(loads) + len(gens)
    if 2 ** dims <= max_corners:
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=dims)))
    else:
        rng = np.random.default_rng(seed)
        signs = np.vstack([-np.ones(dims), np.ones(dims), rng.choice((-1.0, 1.0), size=(max_corners - 2, dims))])
    Pg, Qg = case.generation()
    lo = hi = None
    for sgn in signs:
        fl = np.ones(case.n_bus)
        fl[loads] += alpha * sgn[:len(loads)]
        fg = np.ones(case.n_bus)
        fg[gens] += pv_alpha * sgn[len(loads):]
        P = Pg * fg - case.Pd * fl
        Q = Qg - case.Qd * fl
        state = solve_power_flow(case, P, Q)
        beta = compute_taylor_model(case, state, schema).beta
        lo = beta.copy() if lo is None else np.minimum(lo, beta)
        hi = beta.copy() if hi is None else np.maximum(hi, beta)
    return lo, hi


# ---------------------------------------------------------------------------
# chance constraints

@dataclass(frozen=True)
class ChanceSpec:
    epsilon: Union[float, Sequence[float]] = 1e-3
    zeta: float = 0.95
    big_m: Optional[float] = None
    operating_point: Optional[tuple] = None
    zeta_adjusted: Optional[float] = None
    constraints: Optional[ConstraintSet] = None
    gap_tol: float = 1e-6
    node_budget: int = 1_000_000

    def __post_init__(self):
        eps = np.atleast_1d(np.asarray(self.epsilon, dtype=float))
        if not np.all(eps > 0):
            raise ValueError("epsilon must be positive")
        if not 0 <= self.zeta <= 1:
            raise ValueError("zeta must lie in [0, 1]")
        if self.zeta_adjusted is not None and not self.zeta <= self.zeta_adjusted <= 1:
            raise ValueError("zeta_adjusted must lie in [zeta, 1]")
        if self.big_m is not None and not self.big_m > eps.max():
            raise ValueError("big_m must exceed epsilon")
        if self.node_budget < 1:
            raise ValueError("node_budget must be positive")

    def eps_for(self, j: int) -> float:
        eps = np.atleast_1d(np.asarray(self.epsilon, dtype=float))
        return float(eps[j] if eps.size > 1 else eps[0])


def required_scenarios(zeta: float, n: int) -> int:
    # guard against 0.75 * 8 landing a hair above 6
    return int(math.ceil(zeta * n - 1e-9))


@dataclass
class BnBResult:
    beta: np.ndarray
    objective: float
    lower_bound: float
    nodes: int
    coverage: float
    incumbent_history: list = field(default_factory=list)
    bound_history: list = field(default_factory=list)


def _relaxation(X, y, eps, M, H, c, f1, free, need, Aext, bext):
    """Continuous relaxation at a node: ``f1`` enforced, ``free`` indicators in [0, 1]."""
    n_s, nx = X.shape
    nf = len(free)
    nv = nx + nf
    rows, rhs = [], []
    for i in f1:
        rows.append(np.concatenate([X[i], np.zeros(nf)])); rhs.append(y[i] + eps)
        rows.append(np.concatenate([-X[i], np.zeros(nf)])); rhs.append(eps - y[i])
    for k, i in enumerate(free):
        e = np.zeros(nf); e[k] = M
        rows.append(np.concatenate([X[i], e])); rhs.append(y[i] + eps + M)
        rows.append(np.concatenate([-X[i], e])); rhs.append(eps - y[i] + M)
        e = np.zeros(nf); e[k] = 1.0
        rows.append(np.concatenate([np.zeros(nx), e])); rhs.append(1.0)
        rows.append(np.concatenate([np.zeros(nx), -e])); rhs.append(0.0)
    if nf and need > 0:
        rows.append(np.concatenate([np.zeros(nx), -np.ones(nf)])); rhs.append(-float(need))
    for r, v in zip(Aext, bext):
        rows.append(np.concatenate([r, np.zeros(nf)])); rhs.append(v)
    Hf = np.zeros((nv, nv)); Hf[:nx, :nx] = H
    cf = np.concatenate([c, np.zeros(nf)])
    A = np.array(rows).reshape(-1, nv)
    return Hf, cf, A, np.array(rhs, dtype=float)


def _solve_forced(X, y, eps, H, c, S, Aext, bext, Eext, dext):
    """Minimize the objective with scenarios ``S`` forced inside the tube."""
    nx = X.shape[1]
    S = list(S)
    A = np.vstack([X[S], -X[S], Aext]) if S else Aext
    b = np.concatenate([y[S] + eps, eps - y[S], bext]) if S else bext
    return solve_qp(H, c, A.reshape(-1, nx), b, Eext, dext)


def chance_branch_and_bound(X, y, eps: float, need: int, H, c, const: float = 0.0, *, big_m: float,
                            Aext=None, bext=None, Eext=None, dext=None,
                            gap_tol: float = 1e-6, node_budget: int = 1_000_000) -> BnBResult:
    """Best-first branch and bound over the scenario indicators of the big-M reformulation.

    Minimizes ``beta^T H beta / 2 + c^T beta + const`` subject to at least
    ``need`` scenarios having ``|y_i - x_i beta| <= eps``.
    """
    n_s, nx = X.shape
    Aext = np.zeros((0, nx)) if Aext is None else np.asarray(Aext, float).reshape(-1, nx)
    bext = np.zeros(0) if bext is None else np.asarray(bext, float)
    Eext = np.zeros((0, nx)) if Eext is None else np.asarray(Eext, float).reshape(-1, nx)
    dext = np.zeros(0) if dext is None else np.asarray(dext, float)
    if need > n_s:
        raise InfeasibleError(f"{need} scenarios required but only {n_s} available")
    feas_tol = 1e-7 * (1.0 + eps)

    inc_beta, inc_obj = None, math.inf
    inc_hist, lb_hist = [], []

    def covered(beta):
        return np.abs(y - X @ beta) <= eps + feas_tol

    def offer(beta, obj):
        nonlocal inc_beta, inc_obj
        if np.count_nonzero(covered(beta)) >= need and obj < inc_obj:
            inc_beta, inc_obj = beta, obj

    def forced(S):
        try:
            r = _solve_forced(X, y, eps, H, c, S, Aext, bext, Eext, dext)
        except InfeasibleError:
            return None
        return r.z[:nx], r.objective + const

    def solve_node(f1, f0):
        """Lower bound and relaxed beta for a node, or None if the node is infeasible."""
        free = [i for i in range(n_s) if i not in f1 and i not in f0]
        if len(f1) >= need:
            out = forced(sorted(f1))
            return None if out is None else (out[1], out[0], free, None, True)
        if len(f1) + len(free) < need:
            return None
        if len(f1) + len(free) == need:
            out = forced(sorted(f1) + free)
            return None if out is None else (out[1], out[0], free, None, True)
        Hf, cf, A, b = _relaxation(X, y, eps, big_m, H, c, sorted(f1), free, need - len(f1), Aext, bext)
        Ef = np.hstack([Eext, np.zeros((len(dext), len(free)))]) if len(dext) else None
        try:
            r = solve_qp(Hf, cf, A, b, Ef, dext if len(dext) else None)
        except InfeasibleError:
            return None
        return r.objective + const, r.z[:nx], free, r.z[nx:], False

    counter = itertools.count()
    heap = []
    nodes = 0
    root = solve_node(frozenset(), frozenset())
    nodes += 1
    if root is not None:
        heapq.heappush(heap, (root[0], next(counter), frozenset(), frozenset(), root))
    global_lb = -math.inf
    while heap:
        lb = heap[0][0]
        global_lb = max(global_lb, lb)
        if inc_obj < math.inf and lb >= inc_obj - gap_tol * (1.0 + abs(inc_obj)):
            break
        _, _, f1, f0, sol = heapq.heappop(heap)
        obj, beta, free, zf, leaf = sol
        offer(beta, obj)
        inc_hist.append(inc_obj)
        lb_hist.append(global_lb)
        if leaf or obj >= inc_obj - gap_tol * (1.0 + abs(inc_obj)):
            continue
        # rounding heuristic: force the scenarios the relaxed model already fits best
        r = np.abs(y - X @ beta)
        r[list(f0)] = np.inf
        S = np.argsort(r, kind="stable")[:need]
        if np.all(np.isfinite(r[S])):
            out = forced(sorted(S))
            if out is not None:
                offer(*out)
        frac = np.minimum(zf, 1.0 - zf)
        k = int(np.argmax(frac)) if frac.size and frac.max() > 1e-6 else int(np.argmax(r[free]))
        i = free[k]
        for child in ((f1 | {i}, f0), (f1, f0 | {i})):
            if nodes >= node_budget:
                gap = inc_obj - global_lb if inc_obj < math.inf else math.inf
                raise NodeBudgetError(f"branch and bound exceeded {node_budget} nodes",
                                      None if inc_beta is None else float(inc_obj), gap)
            s = solve_node(*child)
            nodes += 1
            if s is None:
                continue
            s = (max(s[0], obj),) + s[1:]
            if s[0] < inc_obj - gap_tol * (1.0 + abs(inc_obj)) or inc_obj == math.inf:
                heapq.heappush(heap, (s[0], next(counter), child[0], child[1], s))
    if inc_beta is None:
        raise InfeasibleError(f"no coefficient vector keeps {need} of {n_s} scenarios within eps = {eps}")
    global_lb = inc_obj if not heap else min(max(global_lb, heap[0][0]), inc_obj)
    inc_hist.append(inc_obj)
    lb_hist.append(global_lb)
    return BnBResult(inc_beta, float(inc_obj), float(global_lb), nodes,
                     float(np.mean(covered(inc_beta))), inc_hist, lb_hist)


def _column_constraints(cs: Optional[ConstraintSet], schema: VariableSchema, j: int):
    nx = schema.n_x
    if cs is None:
        return None, None, None, None
    if cs.couples_responses:
        raise SchemaError("structure constraints couple responses and are not supported with chance constraints")
    A, b, E, d = constraint_rows(cs, schema)
    sl = slice(j * nx, (j + 1) * nx)

    def pick(M, v):
        other = np.delete(np.arange(M.shape[1]), np.arange(sl.start, sl.stop))
        keep = np.all(M[:, other] == 0, axis=1) & np.any(M[:, sl] != 0, axis=1)
        return M[keep][:, sl], v[keep]

    A, b = pick(A, b)
    E, d = pick(E, d)
    return A, b, E, d


def _fit_chance(ds: Dataset, spec: ChanceSpec, zeta: float, objective, trainer: str) -> LinearModel:
    X, Y = ds.X, ds.Y
    n_s, nx = X.shape
    need = required_scenarios(zeta, n_s)
    beta = np.zeros((nx, Y.shape[1]))
    info = []
    for j in range(Y.shape[1]):
        eps = spec.eps_for(j)
        M = spec.big_m if spec.big_m is not None else 10.0 * (np.ptp(Y[:, j]) + eps)
        H, c, const = objective(j)
        A, b, E, d = _column_constraints(spec.constraints, ds.schema, j)
        res = chance_branch_and_bound(X, Y[:, j], eps, need, H, c, const, big_m=M, Aext=A, bext=b, Eext=E, dext=d,
                                      gap_tol=spec.gap_tol, node_budget=spec.node_budget)
        beta[:, j] = res.beta
        info.append({"objective": res.objective, "lower_bound": res.lower_bound, "gap": res.objective - res.lower_bound,
                     "nodes": res.nodes, "coverage": res.coverage, "required": need, "big_m": M})
    return LinearModel(beta, ds.schema, ds.normalization, {
        "trainer": trainer, "zeta": zeta, "epsilon": spec.epsilon, "solver": info})


def fit_chance_constrained(ds: Dataset, spec: ChanceSpec) -> LinearModel:
    """Smallest-norm coefficients keeping a ``zeta`` share of training scenarios within ``epsilon``."""
    nx = ds.X.shape[1]
    return _fit_chance(ds, spec, spec.zeta, lambda j: (np.eye(nx), np.zeros(nx), 0.0), "ccp")


def fit_drcc_phi(ds: Dataset, spec: ChanceSpec) -> LinearModel:
    """Squared residual at the operating point under ``zeta_adjusted``-level scenario constraints.

    ``zeta_adjusted`` is the confidence level a divergence ball of the chosen
    radius maps to; computing it is left to the caller.
    """
    if spec.operating_point is None:
        raise ValueError("operating_point (x*, y*) is required")
    if spec.zeta_adjusted is None:
        raise ValueError("zeta_adjusted is required")
    x_star, y_star = (np.asarray(v, dtype=float).reshape(-1) for v in spec.operating_point)
    if x_star.shape[0] != ds.X.shape[1] or y_star.shape[0] != ds.Y.shape[1]:
        raise SchemaError("operating point dimensions do not match the dataset")

    def objective(j):
        return 2.0 * np.outer(x_star, x_star), -2.0 * y_star[j] * x_star, float(y_star[j] ** 2)

    return _fit_chance(ds, spec, spec.zeta_adjusted, objective, "drcc_phi")
