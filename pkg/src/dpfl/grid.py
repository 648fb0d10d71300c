"""Grid case files (MATPOWER subset) and nodal admittance assembly."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property
from importlib import resources

import numpy as np

from .errors import CaseFormatError, InvalidCaseError, SingularMatrixError

PQ, PV, REF = 1, 2, 3
BUS_TYPE_NAMES = {PQ: "PQ", PV: "PV", REF: "slack"}

# MATPOWER caseformat column positions (0-based)
BUS_I, BUS_TYPE, PD, QD, GS, BS, BUS_AREA, VM, VA, BASE_KV, ZONE, VMAX, VMIN = range(13)
GEN_BUS, PG, QG, QMAX, QMIN, VG, MBASE, GEN_STATUS, PMAX, PMIN = range(10)
F_BUS, T_BUS, BR_R, BR_X, BR_B, RATE_A, RATE_B, RATE_C, TAP, SHIFT, BR_STATUS, ANGMIN, ANGMAX = range(13)

_WIDTH = {"bus": 13, "gen": 10, "branch": 13}
_MIN_WIDTH = {"bus": VA + 1, "gen": GEN_STATUS + 1, "branch": BR_STATUS + 1}
_PAD = {
    "bus": {BASE_KV: 0.0, ZONE: 1.0, VMAX: 1.1, VMIN: 0.9},
    "gen": {PMAX: 0.0, PMIN: 0.0},
    "branch": {ANGMIN: -360.0, ANGMAX: 360.0},
}


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GridCase:
    """A power network in MATPOWER table layout.

    The raw tables are kept exactly as read (MW, MVAr, degrees) so that a case
    can be written back out losslessly; every quantity used downstream is the
    per-unit/radian view computed once at construction.
    """

    base_mva: float
    bus: np.ndarray
    gen: np.ndarray
    branch: np.ndarray
    name: str = "case"

    def __post_init__(self):
        object.__setattr__(self, "base_mva", float(self.base_mva))
        for key in ("bus", "gen", "branch"):
            table = np.atleast_2d(np.asarray(getattr(self, key), dtype=np.float64))
            if table.size == 0:
                table = table.reshape(0, _WIDTH[key])
            if table.shape[1] != _WIDTH[key]:
                raise InvalidCaseError(f"{key} table must have {_WIDTH[key]} columns, got {table.shape[1]}")
            object.__setattr__(self, key, _frozen(table))
        self._validate()

    def _validate(self):
        if not np.isfinite(self.base_mva) or self.base_mva <= 0:
            raise InvalidCaseError(f"base_mva must be positive, got {self.base_mva}")
        ids = self.bus[:, BUS_I]
        if len(ids) == 0:
            raise InvalidCaseError("case has no buses")
        if np.any(ids != np.round(ids)) or len(np.unique(ids)) != len(ids):
            raise InvalidCaseError("bus ids must be unique integers")
        types = self.bus[:, BUS_TYPE]
        if not np.all(np.isin(types, (PQ, PV, REF))):
            raise InvalidCaseError("bus types must be 1 (PQ), 2 (PV) or 3 (slack)")
        if np.count_nonzero(types == REF) != 1:
            raise InvalidCaseError(f"exactly one slack bus required, found {np.count_nonzero(types == REF)}")
        known = set(ids.tolist())
        for k, row in enumerate(self.branch):
            for end in (row[F_BUS], row[T_BUS]):
                if end not in known:
                    raise InvalidCaseError(f"branch {k + 1} references unknown bus {end:g}")
        for k, row in enumerate(self.gen):
            if row[GEN_BUS] not in known:
                raise InvalidCaseError(f"generator {k + 1} references unknown bus {row[GEN_BUS]:g}")
        live = self.branch[:, BR_STATUS] > 0
        if np.any(self.branch[live, BR_R] < 0):
            raise InvalidCaseError("in-service branch with negative resistance")
        tap = self.branch[:, TAP]
        if np.any((tap != 0) & (tap != 1)) or np.any(self.branch[:, SHIFT] != 0):
            raise InvalidCaseError("off-nominal tap or phase shift transformers are not supported")
        gen_buses = set(self.gen[self.gen[:, GEN_STATUS] > 0, GEN_BUS].tolist())
        for i in np.flatnonzero(types != PQ):
            if ids[i] not in gen_buses:
                raise InvalidCaseError(f"{BUS_TYPE_NAMES[int(types[i])]} bus {ids[i]:g} has no in-service generator")

    def __eq__(self, other):
        if not isinstance(other, GridCase):
            return NotImplemented
        return (
            self.base_mva == other.base_mva
            and np.array_equal(self.bus, other.bus)
            and np.array_equal(self.gen, other.gen)
            and np.array_equal(self.branch, other.branch)
        )

    __hash__ = object.__hash__

    # -- buses -------------------------------------------------------------
    @property
    def n_bus(self) -> int:
        return self.bus.shape[0]

    @cached_property
    def bus_ids(self) -> np.ndarray:
        return self.bus[:, BUS_I].astype(int)

    @cached_property
    def bus_types(self) -> np.ndarray:
        return self.bus[:, BUS_TYPE].astype(int)

    @cached_property
    def _index(self) -> dict:
        return {int(b): i for i, b in enumerate(self.bus_ids)}

    def index_of(self, bus_id) -> int:
        try:
            return self._index[int(bus_id)]
        except (KeyError, ValueError):
            raise KeyError(f"unknown bus {bus_id}") from None

    @cached_property
    def slack(self) -> int:
        return int(np.flatnonzero(self.bus_types == REF)[0])

    @cached_property
    def pv(self) -> np.ndarray:
        return np.flatnonzero(self.bus_types == PV)

    @cached_property
    def pq(self) -> np.ndarray:
        return np.flatnonzero(self.bus_types == PQ)

    @cached_property
    def Pd(self) -> np.ndarray:
        return _frozen(self.bus[:, PD] / self.base_mva)

    @cached_property
    def Qd(self) -> np.ndarray:
        return _frozen(self.bus[:, QD] / self.base_mva)

    @cached_property
    def Gs(self) -> np.ndarray:
        return _frozen(self.bus[:, GS] / self.base_mva)

    @cached_property
    def Bs(self) -> np.ndarray:
        return _frozen(self.bus[:, BS] / self.base_mva)

    @cached_property
    def Vm(self) -> np.ndarray:
        return _frozen(self.bus[:, VM])

    @cached_property
    def Va(self) -> np.ndarray:
        return _frozen(np.deg2rad(self.bus[:, VA]))

    @cached_property
    def Vmin(self) -> np.ndarray:
        return _frozen(self.bus[:, VMIN])

    @cached_property
    def Vmax(self) -> np.ndarray:
        return _frozen(self.bus[:, VMAX])

    # -- generators --------------------------------------------------------
    @cached_property
    def _gen_on(self) -> np.ndarray:
        return self.gen[:, GEN_STATUS] > 0

    @cached_property
    def gen_bus(self) -> np.ndarray:
        return np.array([self.index_of(b) for b in self.gen[self._gen_on, GEN_BUS]], dtype=int)

    @cached_property
    def Pg(self) -> np.ndarray:
        return _frozen(self.gen[self._gen_on, PG] / self.base_mva)

    @cached_property
    def Qg(self) -> np.ndarray:
        return _frozen(self.gen[self._gen_on, QG] / self.base_mva)

    @cached_property
    def Vg(self) -> np.ndarray:
        return _frozen(self.gen[self._gen_on, VG])

    def generation(self):
        """Per-bus summed in-service generation (P, Q) in p.u."""
        Pg = np.zeros(self.n_bus)
        Qg = np.zeros(self.n_bus)
        np.add.at(Pg, self.gen_bus, self.Pg)
        np.add.at(Qg, self.gen_bus, self.Qg)
        return Pg, Qg

    def scheduled_injections(self):
        """Net per-bus injections ``(P, Q)`` of the base case, generation minus load."""
        Pg, Qg = self.generation()
        return Pg - self.Pd, Qg - self.Qd

    def voltage_setpoints(self) -> np.ndarray:
        """Per-bus voltage magnitude targets: generator set points at PV/slack, 1.0 elsewhere."""
        v = np.ones(self.n_bus)
        v[self.gen_bus] = self.Vg
        return v

    # -- branches ----------------------------------------------------------
    @property
    def n_branch(self) -> int:
        return self.branch.shape[0]

    @cached_property
    def in_service(self) -> np.ndarray:
        return self.branch[:, BR_STATUS] > 0

    @cached_property
    def f(self) -> np.ndarray:
        return np.array([self.index_of(b) for b in self.branch[:, F_BUS]], dtype=int)

    @cached_property
    def t(self) -> np.ndarray:
        return np.array([self.index_of(b) for b in self.branch[:, T_BUS]], dtype=int)

    @cached_property
    def r(self) -> np.ndarray:
        return _frozen(self.branch[:, BR_R])

    @cached_property
    def x(self) -> np.ndarray:
        return _frozen(self.branch[:, BR_X])

    @cached_property
    def b(self) -> np.ndarray:
        return _frozen(self.branch[:, BR_B])

    @cached_property
    def branch_labels(self) -> list:
        """``"f-t"`` label per branch; parallel circuits get a ``#k`` suffix."""
        seen: dict = {}
        labels = []
        for fb, tb in self.branch[:, [F_BUS, T_BUS]].astype(int):
            key = (fb, tb)
            seen[key] = seen.get(key, 0) + 1
            labels.append(f"{fb}-{tb}" if seen[key] == 1 else f"{fb}-{tb}#{seen[key]}")
        return labels

    def flow_element(self, k: int, reverse: bool = False) -> str:
        """Element id of a branch flow; the reverse direction swaps the terminals."""
        label = self.branch_labels[k]
        if not reverse:
            return label
        ends, _, suffix = label.partition("#")
        fb, tb = ends.split("-")
        return f"{tb}-{fb}" + (f"#{suffix}" if suffix else "")

    @cached_property
    def _flow_lookup(self) -> dict:
        out = {}
        for k in range(self.n_branch):
            out[self.flow_element(k)] = (k, False)
            out[self.flow_element(k, reverse=True)] = (k, True)
        return out

    def branch_of(self, element: str):
        """Map a flow element id back to ``(branch index, reversed)``."""
        try:
            return self._flow_lookup[element]
        except KeyError:
            raise KeyError(f"unknown branch {element}") from None

    # -- derived cases -----------------------------------------------------
    def permuted(self, order) -> "GridCase":
        """Same network with bus rows listed in ``order`` (a permutation of row indices)."""
        order = np.asarray(order, dtype=int)
        if sorted(order.tolist()) != list(range(self.n_bus)):
            raise ValueError("order must be a permutation of bus rows")
        return GridCase(self.base_mva, self.bus[order], self.gen, self.branch, self.name)

    def with_branch_status(self, k: int, status: int) -> "GridCase":
        branch = self.branch.copy()
        branch[k, BR_STATUS] = status
        return GridCase(self.base_mva, self.bus, self.gen, branch, self.name)


@dataclass(frozen=True, eq=False)
class Admittance:
    G: np.ndarray
    B: np.ndarray

    @property
    def Y(self) -> np.ndarray:
        return self.G + 1j * self.B


# ---------------------------------------------------------------------------
# parsing

_ASSIGN = re.compile(r"^mpc\.(\w+)\s*=\s*(.*)$")
_FLOAT = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$|^[+-]?(inf|Inf)$")


def _number(token, lineno):
    if not _FLOAT.match(token):
        raise CaseFormatError(f"invalid number {token!r}", lineno)
    return float(token)


def parse_matpower_case(text: str, name: str = "case") -> GridCase:
    """Parse MATPOWER case text.

    Recognised statements are ``mpc.baseMVA = <float>;`` and
    ``mpc.<name> = [ ... ];`` numeric tables; ``function`` headers, string
    assignments and cell arrays are skipped. ``%`` starts a comment.
    """
    base = None
    tables: dict = {}
    current = None  # (name, rows, start line)
    in_cell = False

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("%", 1)[0].strip()
        if not line:
            continue
        if in_cell:
            if "}" in line:
                in_cell = False
            continue
        if current is None:
            if line.startswith("function"):
                continue
            m = _ASSIGN.match(line)
            if not m:
                raise CaseFormatError(f"unrecognised statement {line!r}", lineno)
            key, rhs = m.group(1), m.group(2).strip()
            if key == "baseMVA":
                value = rhs.rstrip(";").strip()
                base = _number(value, lineno)
                continue
            if rhs.startswith("'") or rhs.startswith('"'):
                continue
            if rhs.startswith("{"):
                in_cell = "}" not in rhs
                continue
            if not rhs.startswith("["):
                raise CaseFormatError(f"expected '[' after mpc.{key} =", lineno)
            current = (key, [], lineno)
            line = rhs[1:]
        # inside a matrix
        closing = "]" in line
        body, _, tail = line.partition("]")
        if closing and tail.strip() not in ("", ";"):
            raise CaseFormatError(f"unexpected text after ']': {tail.strip()!r}", lineno)
        for chunk in body.split(";"):
            tokens = chunk.split()
            if tokens:
                current[1].append([_number(tok, lineno) for tok in tokens])
        if closing:
            key, rows, start = current
            widths = {len(r) for r in rows}
            if len(widths) > 1:
                raise CaseFormatError(f"ragged rows in mpc.{key}", start)
            tables[key] = rows
            current = None

    if current is not None:
        raise CaseFormatError(f"unterminated matrix mpc.{current[0]}", current[2])
    if base is None:
        raise CaseFormatError("missing baseMVA")
    if base <= 0:
        raise CaseFormatError(f"baseMVA must be positive, got {base:g}")
    for key in ("bus", "gen", "branch"):
        if key not in tables:
            raise CaseFormatError(f"missing matrix: {key}")

    arrays = {}
    for key in ("bus", "gen", "branch"):
        rows = tables[key]
        width = len(rows[0]) if rows else _WIDTH[key]
        if width < _MIN_WIDTH[key]:
            raise CaseFormatError(f"mpc.{key} needs at least {_MIN_WIDTH[key]} columns, got {width}")
        full = np.zeros((len(rows), _WIDTH[key]))
        data = np.array(rows, dtype=np.float64).reshape(len(rows), width)[:, : _WIDTH[key]]
        full[:, : data.shape[1]] = data
        for col, value in _PAD[key].items():
            if col >= width:
                full[:, col] = value
        arrays[key] = full

    br = arrays["branch"]
    live = br[:, BR_STATUS] > 0
    if np.any(live & (br[:, BR_X] == 0)):
        k = int(np.flatnonzero(live & (br[:, BR_X] == 0))[0])
        raise InvalidCaseError(f"in-service branch {k + 1} has zero reactance")
    return GridCase(base, arrays["bus"], arrays["gen"], arrays["branch"], name=name)


def _fmt(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def to_matpower(case: GridCase) -> str:
    """Serialize a case back to MATPOWER text; ``parse_matpower_case`` inverts it exactly."""
    out = [f"function mpc = {case.name}", "", f"mpc.baseMVA = {_fmt(case.base_mva)};", ""]
    for key in ("bus", "gen", "branch"):
        out.append(f"mpc.{key} = [")
        for row in getattr(case, key):
            out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
        out.append("];")
        out.append("")
    return "\n".join(out)


def load_case(path_or_name: str) -> GridCase:
    """Read a case file, or one of the bundled cases by name (``case9``, ``case14``, ``case39``)."""
    bundled = resources.files("dpfl.cases") / f"{path_or_name}.m"
    if "/" not in str(path_or_name) and bundled.is_file():
        return parse_matpower_case(bundled.read_text(), name=str(path_or_name))
    with open(path_or_name) as fh:
        text = fh.read()
    stem = str(path_or_name).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return parse_matpower_case(text, name=stem)


# ---------------------------------------------------------------------------
# admittance

def branch_admittances(case: GridCase):
    """Two-port admittances ``(yff, yft, ytf, ytt)`` per branch; zeros when out of service."""
    on = case.in_service
    z = case.r + 1j * case.x
    if np.any(on & (z == 0)):
        k = int(np.flatnonzero(on & (z == 0))[0])
        raise SingularMatrixError(f"branch {k + 1} has zero impedance")
    ys = np.zeros(case.n_branch, dtype=complex)
    ys[on] = 1.0 / z[on]
    charging = np.where(on, 0.5j * case.b, 0.0)
    return ys + charging, -ys, -ys, ys + charging


def complex_ybus(case: GridCase) -> np.ndarray:
    yff, yft, ytf, ytt = branch_admittances(case)
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    f, t = case.f, case.t
    np.add.at(Y, (f, f), yff)
    np.add.at(Y, (f, t), yft)
    np.add.at(Y, (t, f), ytf)
    np.add.at(Y, (t, t), ytt)
    Y[np.diag_indices(n)] += case.Gs + 1j * case.Bs
    return Y


def build_admittance(case: GridCase) -> Admittance:
    Y = complex_ybus(case)
    G, B = _frozen(Y.real), _frozen(Y.imag)
    return Admittance(G, B)
