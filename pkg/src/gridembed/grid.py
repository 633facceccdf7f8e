"""Grid data model, MATPOWER-subset case parsing and raw AC power-flow arithmetic.

All quantities are stored in per-unit on the network's ``base_mva``; MW/MVAr
values only appear at the parse and serialize boundaries.  Complex quantities
use Python/numpy complex numbers.
"""

from __future__ import annotations

import math
import re
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostCurve:
    """Quadratic generator cost ``c2 p^2 + c1 p + c0`` with ``p`` in p.u."""

    c2: float = 0.0
    c1: float = 0.0
    c0: float = 0.0

    def __post_init__(self):
        if self.c2 < 0:
            raise ValueError(f"cost curve must be convex, got c2={self.c2}")

    def __call__(self, p):
        return self.c2 * p * p + self.c1 * p + self.c0


@dataclass(frozen=True)
class Bus:
    id: int
    v_min: float
    v_max: float
    is_slack: bool = False

    def __post_init__(self):
        if not 0 < self.v_min <= self.v_max:
            raise ValueError(f"bus {self.id}: need 0 < v_min <= v_max, "
                             f"got [{self.v_min}, {self.v_max}]")


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost: CostCurve = field(default_factory=CostCurve)

    def __post_init__(self):
        if self.p_min > self.p_max or self.q_min > self.q_max:
            raise ValueError(f"generator at bus {self.bus}: inverted bounds")


@dataclass(frozen=True)
class Branch:
    """Series-impedance branch; the admittance is ``1 / (r + jx)``.

    ``s_max`` may be ``inf`` (no thermal limit) and the angle bounds may be
    ``-inf``/``inf`` (unconstrained).
    """

    from_bus: int
    to_bus: int
    r: float
    x: float
    s_max: float = math.inf
    angle_min: float = -math.inf
    angle_max: float = math.inf

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus} is a self-loop")
        if not self.s_max > 0:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: s_max must be > 0")
        if not self.angle_min <= 0 <= self.angle_max:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: "
                             "angle bounds must bracket 0")
        if self.r == 0 and self.x == 0:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: zero impedance")

    @property
    def admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True, eq=False)
class Network:
    """Immutable grid description.

    Buses are addressed by their position in ``buses`` (the *index*); the
    MATPOWER bus numbers are kept in ``Bus.id``.  Directed arcs are the branch
    list ``E`` followed by the reversed arcs ``E^R``.
    """

    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    branches: tuple[Branch, ...]
    base_mva: float = 100.0
    name: str = "case"

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "branches", tuple(self.branches))
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate bus ids")
        n_slack = sum(b.is_slack for b in self.buses)
        if n_slack != 1:
            raise ValueError(f"network needs exactly one slack bus, found {n_slack}")
        known = set(ids)
        for g in self.generators:
            if g.bus not in known:
                raise ValueError(f"generator references unknown bus {g.bus}")
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise ValueError(f"branch {br.from_bus}-{br.to_bus} references unknown bus")
        if not self._connected():
            raise ValueError("network graph is not connected")

    def _connected(self) -> bool:
        adj: dict[int, list[int]] = {b.id: [] for b in self.buses}
        for br in self.branches:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
        start = self.buses[0].id
        seen = {start}
        todo = deque([start])
        while todo:
            for nxt in adj[todo.popleft()]:
                if nxt not in seen:
                    seen.add(nxt)
                    todo.append(nxt)
        return len(seen) == len(self.buses)

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return (self.buses == other.buses and self.generators == other.generators
                and self.branches == other.branches and self.base_mva == other.base_mva)

    __hash__ = None

    # sizes -----------------------------------------------------------------
    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    # vectorized views ------------------------------------------------------
    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def slack(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.is_slack)

    @cached_property
    def v_min(self) -> np.ndarray:
        return _frozen([b.v_min for b in self.buses])

    @cached_property
    def v_max(self) -> np.ndarray:
        return _frozen([b.v_max for b in self.buses])

    @cached_property
    def gen_bus(self) -> np.ndarray:
        return _frozen([self.bus_index[g.bus] for g in self.generators], dtype=int)

    @cached_property
    def gen_bounds(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """``(p_min, p_max, q_min, q_max)`` arrays over generators."""
        gens = self.generators
        return (_frozen([g.p_min for g in gens]), _frozen([g.p_max for g in gens]),
                _frozen([g.q_min for g in gens]), _frozen([g.q_max for g in gens]))

    @cached_property
    def cost_coeffs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        gens = self.generators
        return (_frozen([g.cost.c2 for g in gens]), _frozen([g.cost.c1 for g in gens]),
                _frozen([g.cost.c0 for g in gens]))

    @cached_property
    def arc_from(self) -> np.ndarray:
        f = [self.bus_index[br.from_bus] for br in self.branches]
        t = [self.bus_index[br.to_bus] for br in self.branches]
        return _frozen(f + t, dtype=int)

    @cached_property
    def arc_to(self) -> np.ndarray:
        f = [self.bus_index[br.from_bus] for br in self.branches]
        t = [self.bus_index[br.to_bus] for br in self.branches]
        return _frozen(t + f, dtype=int)

    @cached_property
    def arc_admittance(self) -> np.ndarray:
        y = [br.admittance for br in self.branches]
        return _frozen(y + y, dtype=complex)

    @cached_property
    def arc_s_max(self) -> np.ndarray:
        s = [br.s_max for br in self.branches]
        return _frozen(s + s)

    @cached_property
    def angle_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return (_frozen([br.angle_min for br in self.branches]),
                _frozen([br.angle_max for br in self.branches]))

    def arcs(self) -> list[tuple[int, int]]:
        """Directed arcs ``E + E^R`` as bus-id pairs, in flow-vector order."""
        ids = [b.id for b in self.buses]
        return [(ids[f], ids[t]) for f, t in zip(self.arc_from, self.arc_to)]


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LoadVector:
    """Active/reactive load per bus, in p.u."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.array(self.p, dtype=float)
        q = np.array(self.q, dtype=float)
        if p.shape != q.shape or p.ndim != 1:
            raise ValueError("p and q must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ValueError("load entries must be finite")
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    def __len__(self):
        return len(self.p)

    def __eq__(self, other):
        if not isinstance(other, LoadVector):
            return NotImplemented
        return np.array_equal(self.p, other.p) and np.array_equal(self.q, other.q)

    __hash__ = None

    @property
    def s(self) -> np.ndarray:
        return self.p + 1j * self.q

    @classmethod
    def from_complex(cls, s) -> "LoadVector":
        s = np.asarray(s, dtype=complex)
        return cls(s.real, s.imag)

    @classmethod
    def zeros(cls, n: int) -> "LoadVector":
        return cls(np.zeros(n), np.zeros(n))

    def scaled(self, factor: float) -> "LoadVector":
        return LoadVector(self.p * factor, self.q * factor)

    def nonzero_counts(self, zero_tol: float = 1e-5) -> tuple[int, int]:
        return (int(np.count_nonzero(np.abs(self.p) > zero_tol)),
                int(np.count_nonzero(np.abs(self.q) > zero_tol)))

    def as_array(self) -> np.ndarray:
        """Stacked ``(p, q)`` vector."""
        return np.concatenate([self.p, self.q])


@dataclass(frozen=True, eq=False)
class OperatingPoint:
    """One AC state: bus voltages, generator injections and arc flows."""

    voltage: np.ndarray
    gen_injection: np.ndarray
    flow: np.ndarray

    @classmethod
    def from_voltage(cls, net: Network, voltage, gen_injection) -> "OperatingPoint":
        voltage = np.asarray(voltage, dtype=complex)
        return cls(voltage, np.asarray(gen_injection, dtype=complex), arc_flows(net, voltage))

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.voltage)

    @property
    def va(self) -> np.ndarray:
        return np.angle(self.voltage)


# ---------------------------------------------------------------------------
# Power-flow arithmetic
# ---------------------------------------------------------------------------

def branch_flow(admittance, v_from, v_to):
    """Complex power leaving ``from`` on a series branch: ``Y*|Vf|^2 - Y* Vf Vt*``."""
    yc = np.conj(admittance)
    return yc * v_from * np.conj(v_from) - yc * v_from * np.conj(v_to)


def arc_flows(net: Network, voltage) -> np.ndarray:
    voltage = np.asarray(voltage, dtype=complex)
    if voltage.shape != (net.n_bus,):
        raise ValueError(f"expected {net.n_bus} voltages, got shape {voltage.shape}")
    return branch_flow(net.arc_admittance, voltage[net.arc_from], voltage[net.arc_to])


def bus_injection(net: Network, gen_injection) -> np.ndarray:
    """Generation summed per bus (buses without generators get 0)."""
    gen_injection = np.asarray(gen_injection, dtype=complex)
    out = np.zeros(net.n_bus, dtype=complex)
    np.add.at(out, net.gen_bus, gen_injection)
    return out


def power_balance_residual(net: Network, op: OperatingPoint, loads: LoadVector) -> np.ndarray:
    """Per-bus Kirchhoff mismatch ``sum(gen) - load - sum(outgoing arc flows)``."""
    if len(op.voltage) != net.n_bus or len(loads) != net.n_bus:
        raise ValueError("voltage/load dimension does not match bus count")
    if len(op.gen_injection) != net.n_gen:
        raise ValueError("generator injection dimension does not match generator count")
    if len(op.flow) != 2 * net.n_branch:
        raise ValueError("flow dimension does not match arc count")
    out_flow = np.zeros(net.n_bus, dtype=complex)
    np.add.at(out_flow, net.arc_from, op.flow)
    return bus_injection(net, op.gen_injection) - loads.s - out_flow


def dispatch_cost(net: Network, gen_injection) -> float:
    gen_injection = np.asarray(gen_injection)
    if gen_injection.shape != (net.n_gen,):
        raise ValueError(f"expected {net.n_gen} injections, got {gen_injection.shape}")
    p = np.real(gen_injection)
    c2, c1, c0 = net.cost_coeffs
    return float(np.sum(c2 * p * p + c1 * p + c0))


def reduction_percentage(original: float, reduced: float) -> float:
    if original == 0:
        raise ValueError("reduction percentage undefined for original value 0")
    return 100.0 * (original - reduced) / original


# ---------------------------------------------------------------------------
# MATPOWER v2 subset
# ---------------------------------------------------------------------------

class CaseParseError(ValueError):
    """Base class for case-file errors; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class MissingSectionError(CaseParseError):
    def __init__(self, section: str):
        self.section = section
        super().__init__(f"missing required section 'mpc.{section}'")


class MalformedSectionError(CaseParseError):
    pass


class MissingSlackError(CaseParseError):
    pass


class DuplicateBusError(CaseParseError):
    pass


class UnknownBusError(CaseParseError):
    pass


class UnsupportedFeatureError(CaseParseError):
    pass


_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;?", re.S)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([^;\s]+)\s*;?")
_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11, "gencost": 4}


def _strip_comments(text: str) -> str:
    # keep line structure so offsets still map to line numbers
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _read_matrix(name: str, body: str, first_line: int) -> list[tuple[int, list[float]]]:
    rows = []
    for k, raw_line in enumerate(body.split("\n")):
        for chunk in raw_line.split(";"):
            tokens = chunk.replace(",", " ").split()
            if not tokens:
                continue
            try:
                values = [float(t) for t in tokens]
            except ValueError:
                raise MalformedSectionError(
                    f"non-numeric entry in mpc.{name}: {chunk.strip()!r}", first_line + k)
            if len(values) < _MIN_COLS.get(name, 0):
                raise MalformedSectionError(
                    f"mpc.{name} row has {len(values)} columns, "
                    f"need at least {_MIN_COLS[name]}", first_line + k)
            rows.append((first_line + k, values))
    return rows


def _angle(deg: float, default: float) -> float:
    if abs(deg) >= 360.0:
        return default
    return math.radians(deg)


def parse_matpower(text: str, name: str = "case") -> tuple[Network, LoadVector]:
    """Parse a MATPOWER v2 case (subset) into a per-unit network and its loads.

    Raises a :class:`CaseParseError` subclass carrying the offending line.
    """
    text = _strip_comments(text)
    m = _SCALAR_RE.search(text)
    if m is None:
        raise MissingSectionError("baseMVA")
    try:
        base = float(m.group(1))
    except ValueError:
        raise MalformedSectionError("baseMVA is not a number", text.count("\n", 0, m.start()) + 1)
    if base <= 0:
        raise MalformedSectionError("baseMVA must be positive", text.count("\n", 0, m.start()) + 1)

    sections = {}
    for m in _MATRIX_RE.finditer(text):
        body_start = m.start(2)
        sections[m.group(1)] = _read_matrix(m.group(1), m.group(2),
                                            text.count("\n", 0, body_start) + 1)
    for required in ("bus", "gen", "branch", "gencost"):
        if required not in sections:
            raise MissingSectionError(required)

    buses, pd, qd = [], [], []
    seen: set[int] = set()
    for line, row in sections["bus"]:
        bus_id, bus_type = int(row[0]), int(row[1])
        if bus_id in seen:
            raise DuplicateBusError(f"duplicate bus id {bus_id}", line)
        seen.add(bus_id)
        if bus_type not in (1, 2, 3):
            raise UnsupportedFeatureError(f"bus {bus_id}: bus type {bus_type} not supported", line)
        if row[4] != 0 or row[5] != 0:
            raise UnsupportedFeatureError(f"bus {bus_id}: nonzero shunt (GS/BS) not supported", line)
        try:
            buses.append(Bus(bus_id, v_min=row[12], v_max=row[11], is_slack=bus_type == 3))
        except ValueError as exc:
            raise MalformedSectionError(str(exc), line)
        pd.append(row[2] / base)
        qd.append(row[3] / base)
    n_slack = sum(b.is_slack for b in buses)
    if n_slack == 0:
        raise MissingSlackError("no slack bus (type 3) in mpc.bus")
    if n_slack > 1:
        raise MalformedSectionError(f"{n_slack} slack buses in mpc.bus, need exactly one")

    gen_rows = sections["gen"]
    cost_rows = sections["gencost"]
    if len(cost_rows) < len(gen_rows):
        raise MalformedSectionError(
            f"mpc.gencost has {len(cost_rows)} rows for {len(gen_rows)} generators",
            cost_rows[-1][0] if cost_rows else None)
    generators = []
    for (line, row), (cline, crow) in zip(gen_rows, cost_rows):
        if int(row[0]) not in seen:
            raise UnknownBusError(f"generator references unknown bus {int(row[0])}", line)
        if row[7] <= 0:
            continue
        if int(crow[0]) != 2:
            raise UnsupportedFeatureError("only polynomial gencost (model 2) is supported", cline)
        ncost = int(crow[3])
        if not 1 <= ncost <= 3 or len(crow) < 4 + ncost:
            raise MalformedSectionError("gencost row needs NCOST in 1..3 coefficients", cline)
        coeffs = [0.0] * (3 - ncost) + crow[4:4 + ncost]
        try:
            cost = CostCurve(c2=coeffs[0] * (base * base), c1=coeffs[1] * base, c0=coeffs[2])
            generators.append(Generator(int(row[0]), p_min=row[9] / base, p_max=row[8] / base,
                                        q_min=row[4] / base, q_max=row[3] / base, cost=cost))
        except ValueError as exc:
            raise MalformedSectionError(str(exc), line)

    branches = []
    for line, row in sections["branch"]:
        f, t = int(row[0]), int(row[1])
        for b in (f, t):
            if b not in seen:
                raise UnknownBusError(f"branch {f}-{t} references unknown bus {b}", line)
        if len(row) > 10 and row[10] <= 0:
            continue
        if row[4] != 0:
            raise UnsupportedFeatureError(f"branch {f}-{t}: line charging (BR_B) not supported", line)
        if row[8] not in (0.0, 1.0):
            raise UnsupportedFeatureError(f"branch {f}-{t}: tap ratio {row[8]} not supported", line)
        if row[9] != 0:
            raise UnsupportedFeatureError(f"branch {f}-{t}: phase shift not supported", line)
        ang_min = _angle(row[11], -math.inf) if len(row) > 12 else -math.inf
        ang_max = _angle(row[12], math.inf) if len(row) > 12 else math.inf
        if ang_min == 0 and ang_max == 0:
            ang_min, ang_max = -math.inf, math.inf
        rate = row[5] / base if row[5] > 0 else math.inf
        try:
            branches.append(Branch(f, t, r=row[2], x=row[3], s_max=rate,
                                   angle_min=ang_min, angle_max=ang_max))
        except ValueError as exc:
            raise MalformedSectionError(str(exc), line)

    try:
        net = Network(buses, generators, branches, base_mva=base, name=name)
    except ValueError as exc:
        raise CaseParseError(str(exc))
    return net, LoadVector(pd, qd)


def read_case(path) -> tuple[Network, LoadVector]:
    import pathlib

    path = pathlib.Path(path)
    return parse_matpower(path.read_text(), name=path.stem)


def _literal(target: float, decode) -> str:
    """Shortest decimal literal ``s`` such that ``decode(float(s)) == target``."""
    if not math.isfinite(target):
        return repr(float(target))
    target = float(target)
    guess = float(decode.inverse(target))
    for cand in _neighbours(guess):
        if decode(cand) == target:
            return repr(cand)
    raise ValueError(f"cannot serialize {target!r} exactly")


def _neighbours(x: float, width: int = 8):
    yield x
    lo = hi = x
    for _ in range(width):
        lo = math.nextafter(lo, -math.inf)
        hi = math.nextafter(hi, math.inf)
        yield lo
        yield hi


class _Scale:
    """Decoder ``raw -> raw / factor`` (or ``raw * factor``) with its inverse."""

    def __init__(self, factor: float, divide: bool = True):
        self.factor, self.divide = factor, divide

    def __call__(self, raw):
        return raw / self.factor if self.divide else raw * self.factor

    def inverse(self, value):
        return value * self.factor if self.divide else value / self.factor


def _fmt(x: float) -> str:
    return repr(float(x))


def to_matpower(net: Network, loads: LoadVector | None = None) -> str:
    """Serialize back to the MATPOWER subset so that parsing reproduces ``net``."""
    base = net.base_mva
    per_unit = _Scale(base)
    per_unit2 = _Scale(base * base, divide=False)
    per_unit1 = _Scale(base, divide=False)
    loads = loads if loads is not None else LoadVector.zeros(net.n_bus)
    out = [f"function mpc = {net.name}", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(base)};",
           "", "%% bus data", "mpc.bus = ["]
    for b, p, q in zip(net.buses, loads.p, loads.q):
        kind = 3 if b.is_slack else 1
        out.append(f"\t{b.id}\t{kind}\t{_literal(p, per_unit)}\t{_literal(q, per_unit)}\t0\t0\t1\t1\t0\t"
                   f"1\t1\t{_fmt(b.v_max)}\t{_fmt(b.v_min)};")
    out += ["];", "", "%% generator data", "mpc.gen = ["]
    for g in net.generators:
        out.append(f"\t{g.bus}\t0\t0\t{_literal(g.q_max, per_unit)}\t{_literal(g.q_min, per_unit)}\t1\t"
                   f"{_fmt(base)}\t1\t{_literal(g.p_max, per_unit)}\t{_literal(g.p_min, per_unit)};")
    out += ["];", "", "%% branch data", "mpc.branch = ["]
    for br in net.branches:
        rate = "0" if math.isinf(br.s_max) else _literal(br.s_max, per_unit)
        amin = "-360" if math.isinf(br.angle_min) else _literal(br.angle_min, _Radians())
        amax = "360" if math.isinf(br.angle_max) else _literal(br.angle_max, _Radians())
        out.append(f"\t{br.from_bus}\t{br.to_bus}\t{_fmt(br.r)}\t{_fmt(br.x)}\t0\t{rate}\t{rate}\t"
                   f"{rate}\t0\t0\t1\t{amin}\t{amax};")
    out += ["];", "", "%% generator cost data", "mpc.gencost = ["]
    for g in net.generators:
        c = g.cost
        out.append(f"\t2\t0\t0\t3\t{_literal(c.c2, per_unit2)}\t{_literal(c.c1, per_unit1)}\t{_fmt(c.c0)};")
    out += ["];", ""]
    return "\n".join(out)


class _Radians:
    def __call__(self, raw):
        return math.radians(raw)

    def inverse(self, value):
        return math.degrees(value)


def load_bundled(name: str) -> tuple[Network, LoadVector]:
    """Load one of the bundled fixtures (``case2``, ``case14``, ``case30``)."""
    from importlib import resources

    text = resources.files("gridembed.data").joinpath(f"{name}.m").read_text()
    return parse_matpower(text, name=name)


def case_paths() -> dict[str, str]:
    from importlib import resources

    root = resources.files("gridembed.data")
    return {p.name[:-2]: str(p) for p in root.iterdir() if p.name.endswith(".m")}


def describe(net: Network, loads: LoadVector) -> str:
    cp, cq = loads.nonzero_counts()
    return (f"{net.name}: {net.n_bus} buses, {net.n_gen} generators, {net.n_branch} branches, "
            f"{cp} active / {cq} reactive loads")


__all__ = [
    "Branch", "Bus", "CaseParseError", "CostCurve", "DuplicateBusError", "Generator",
    "LoadVector", "MalformedSectionError", "MissingSectionError", "MissingSlackError",
    "Network", "OperatingPoint", "UnknownBusError", "UnsupportedFeatureError", "arc_flows",
    "branch_flow", "bus_injection", "case_paths", "describe", "dispatch_cost", "load_bundled",
    "parse_matpower", "power_balance_residual", "read_case", "reduction_percentage",
    "to_matpower",
]
