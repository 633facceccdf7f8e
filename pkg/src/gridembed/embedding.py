"""Load embedding: concentrate loads on few buses without changing the dispatch.

The embedding keeps the original generator dispatch AC-feasible, preserves
the active/reactive load totals, and asks that a re-solved OPF on the new
loads costs within a relative tolerance of the original.  The combinatorial
"fewest nonzero loads" goal is replaced by maximizing the sum of squared
loads, and the cost condition by penalties that keep originally binding
voltage and thermal constraints binding; the penalty weights grow
geometrically until the cost condition holds.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import acopf
from .acopf import ACModel, BindingSets, SolverConfig, binding_sets, check_feasibility
from .grid import LoadVector, Network, OperatingPoint, reduction_percentage


@dataclass(frozen=True)
class EmbeddingConfig:
    """Outer-loop parameters.

    ``beta`` is the relative cost tolerance, ``beta_v``/``beta_s`` the initial
    penalty weights, ``rho_v``/``rho_s`` their growth factors and ``max_iter``
    the last iteration index (the loop is inclusive, so ``max_iter + 1``
    subproblems at most).  With ``congestion_tolerances`` set, ``beta_v`` and
    ``beta_s`` are read as deviation tolerances enforced by a hinge penalty of
    fixed weight ``hinge_weight`` instead of as penalty weights.
    """

    beta: float = 0.005
    beta_v: float = 1.0
    beta_s: float = 1.0
    rho_v: float = 1.5
    rho_s: float = 1.5
    max_iter: int = 500
    zero_tol: float = 1e-5
    binding_eps: float = 1e-4
    congestion_tolerances: bool = False
    hinge_weight: float = 1e6
    solver: SolverConfig = SolverConfig()

    def __post_init__(self):
        if self.rho_v <= 1 or self.rho_s <= 1:
            raise ValueError("penalty multipliers must exceed 1")
        if self.beta <= 0:
            raise ValueError("cost tolerance must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")


@dataclass
class ReferenceSolution:
    loads: LoadVector
    dispatch: np.ndarray
    cost: float
    point: OperatingPoint
    binding: BindingSets
    total_p: float
    total_q: float


class EmbeddingError(RuntimeError):
    pass


def reference_solution(net: Network, loads: LoadVector, cfg: EmbeddingConfig = EmbeddingConfig(),
                       solved: acopf.SolveResult | None = None) -> ReferenceSolution:
    """Solve (or reuse) the original OPF and record what the embedding must preserve."""
    res = solved if solved is not None else acopf.solve_acopf(net, loads, cfg.solver)
    if not res.optimal:
        raise EmbeddingError(f"base OPF not solved: {res.status.value}")
    return ReferenceSolution(
        loads=loads, dispatch=res.point.gen_injection.copy(), cost=res.objective, point=res.point,
        binding=binding_sets(net, res.point, cfg.binding_eps),
        total_p=float(loads.p.sum()), total_q=float(loads.q.sum()))


# ---------------------------------------------------------------------------
# Penalty subproblem
# ---------------------------------------------------------------------------

@dataclass
class SubproblemResult:
    loads: LoadVector
    point: OperatingPoint | None
    ok: bool
    objective: float = np.nan


def load_buses(ref: ReferenceSolution, zero_tol: float) -> np.ndarray:
    """Buses allowed to carry embedded load: those loaded in the reference."""
    s = ref.loads
    return np.flatnonzero((np.abs(s.p) > zero_tol) | (np.abs(s.q) > zero_tol))


def _sign_box(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # loads keep their sign; each may absorb the whole mass of its sign
    neg = float(values[values < 0].sum())
    pos = float(values[values > 0].sum())
    return np.where(values < 0, neg, 0.0), np.where(values < 0, 0.0, pos)


def embedding_model(net: Network, ref: ReferenceSolution, zero_tol: float = 1e-5) -> ACModel:
    buses = load_buses(ref, zero_tol)
    plo, phi = _sign_box(ref.loads.p[buses])
    qlo, qhi = _sign_box(ref.loads.q[buses])
    return ACModel(net, dispatch=ref.dispatch, load_buses=buses,
                   load_totals=(ref.total_p, ref.total_q),
                   load_bounds=((plo, phi), (qlo, qhi)))


def penalty_objective(net: Network, model: ACModel, ref: ReferenceSolution, beta_v: float,
                      beta_s: float, hinge: tuple[float, float, float] | None = None):
    """Minimization form of the penalized embedding objective.

    ``-sum(p_d^2 + q_d^2) + beta_v * sum((v - bound)^2) + beta_s * sum((|S| - s_max)^2)``
    over the reference binding sets.  With ``hinge = (weight, tol_v, tol_s)``
    the congestion terms become ``weight * max(0, deviation - tol)^2``.
    """
    b = ref.binding
    nu = np.asarray(b.n_upper, dtype=int)
    nlow = np.asarray(b.n_lower, dtype=int)
    # pinned arcs have constant flow on the feasible set; their term is inert
    arcs = np.asarray([a for a in b.e_binding if a in set(model.thermal.tolist())], dtype=int)
    thermal_pos = np.searchsorted(model.thermal, arcs)
    s_lim = net.arc_s_max[arcs]
    n_in = len(model.ang_hi) + len(model.ang_lo) + len(model.thermal)
    zeros_eq = np.zeros(model.n_eq)

    def objective(x):
        v, theta, _, _, _, _ = model.unpack(x)
        pd, qd = x[model.sl_pd], x[model.sl_qd]
        grad = np.zeros(model.size)
        value = -float(pd @ pd + qd @ qd)
        grad[model.sl_pd] = -2 * pd
        grad[model.sl_qd] = -2 * qd
        dev_u = net.v_max[nu] - v[nu]
        dev_l = v[nlow] - net.v_min[nlow]
        if hinge is None:
            w_v, w_s = beta_v, beta_s
            ex_u, ex_l = dev_u, dev_l
        else:
            w_v = w_s = hinge[0]
            ex_u = np.maximum(0.0, np.abs(dev_u) - hinge[1]) * np.sign(dev_u)
            ex_l = np.maximum(0.0, np.abs(dev_l) - hinge[1]) * np.sign(dev_l)
        value += w_v * float(ex_u @ ex_u + ex_l @ ex_l)
        grad[nu] += -2 * w_v * ex_u
        grad[nlow] += 2 * w_v * ex_l
        if len(arcs):
            s, _ = model.flows(v, theta)
            mag = np.abs(s[arcs])
            dev = mag - s_lim
            if hinge is not None:
                dev = np.maximum(0.0, np.abs(dev) - hinge[2]) * np.sign(dev)
            value += w_s * float(dev @ dev)
            # d|S| = (s_max / |S|) d g for the model's thermal row g = (|S|^2 - s_max^2) / (2 s_max)
            b_in = np.zeros(n_in)
            np.add.at(b_in, len(model.ang_hi) + len(model.ang_lo) + thermal_pos,
                      2 * w_s * dev * s_lim / mag)
            grad += model(x).vjp(zeros_eq, b_in)
        return value, grad

    return objective


def solve_penalty_subproblem(net: Network, ref: ReferenceSolution, beta_v: float, beta_s: float,
                             warm: LoadVector, warm_point: OperatingPoint | None = None,
                             cfg: EmbeddingConfig = EmbeddingConfig()) -> SubproblemResult:
    """Maximize load concentration with the dispatch pinned to the reference.

    Returns ``warm`` unchanged with ``ok=False`` when no feasible stationary
    point is found.
    """
    model = embedding_model(net, ref, cfg.zero_tol)
    hinge = (cfg.hinge_weight, beta_v, beta_s) if cfg.congestion_tolerances else None
    objective = penalty_objective(net, model, ref, beta_v, beta_s, hinge)
    start = warm_point if warm_point is not None else ref.point
    buses = model.load_buses
    pd, qd = warm.p.copy(), warm.q.copy()
    pd[buses] = _break_ties(pd[buses])
    qd[buses] = _break_ties(qd[buses])
    x0 = model.pack(np.abs(start.voltage), np.angle(start.voltage), pd=pd, qd=qd)
    res = acopf.run(model, objective, x0, cfg.solver)
    if res.violation > cfg.solver.feas_tol:
        return SubproblemResult(warm, start, False)
    loads = _snap(model.loads(res.x), ref, cfg.zero_tol)
    return SubproblemResult(loads, model.point(res.x), True, res.f)


def _break_ties(values: np.ndarray, tilt: float = 0.01) -> np.ndarray:
    """Spread exactly equal nonzero entries by +-``tilt`` of their value, keeping the sum.

    Interior stationary points of the concentration objective have equal
    free loads, so an exact tie is a saddle the solver would not leave.
    """
    out = values.copy()
    for v in np.unique(values[values != 0]):
        idx = np.flatnonzero(values == v)
        if len(idx) > 1:
            out[idx] += tilt * v * np.linspace(1.0, -1.0, len(idx))
    return out


def _snap(loads: LoadVector, ref: ReferenceSolution, zero_tol: float) -> LoadVector:
    """Zero out sub-threshold entries, returning their mass to the largest load.

    Keeps the totals exact after removing solver noise near zero.
    """
    p, q = loads.p.copy(), loads.q.copy()
    for arr, total in ((p, ref.total_p), (q, ref.total_q)):
        small = np.abs(arr) <= zero_tol
        if small.all():
            continue
        arr[small] = 0.0
        k = int(np.argmax(np.abs(arr)))
        arr[k] += total - arr.sum()
    return LoadVector(p, q)


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------

@dataclass
class TraceEntry:
    iteration: int
    beta_v: float
    beta_s: float
    cost_error: float
    nonzero_p: int
    nonzero_q: int
    subproblem_ok: bool


@dataclass
class EmbeddingResult:
    embedded: LoadVector
    iterations: int
    final_beta_v: float
    final_beta_s: float
    embedded_cost: float
    converged: bool
    trace: list[TraceEntry]
    reference: ReferenceSolution
    point: OperatingPoint | None = None

    @property
    def cost_error(self) -> float:
        """Relative cost gap ``|O(embedded) - O(original)| / |O(original)|``."""
        return abs(self.embedded_cost - self.reference.cost) / abs(self.reference.cost)

    def to_dict(self) -> dict:
        ref = self.reference
        out = {
            "embedded_p": self.embedded.p.tolist(),
            "embedded_q": self.embedded.q.tolist(),
            "iterations": self.iterations,
            "final_beta_v": self.final_beta_v,
            "final_beta_s": self.final_beta_s,
            "embedded_cost": self.embedded_cost,
            "reference_cost": ref.cost,
            "converged": self.converged,
            "trace": [asdict(t) for t in self.trace],
            "binding": asdict(ref.binding),
        }
        if self.point is not None:
            out["vm"] = self.point.vm.tolist()
            out["va"] = self.point.va.tolist()
        return out


def _relative_gap(cost: float, ref_cost: float) -> float:
    return abs(cost - ref_cost) / abs(ref_cost)


def pattern_start(pattern: LoadVector, ref: ReferenceSolution) -> LoadVector:
    """Rescale a previous embedding so its totals match ``ref``.

    Used as an initial guess so that related load vectors settle on the
    same sparsity pattern.
    """
    out = []
    for shape, total in ((pattern.p, ref.total_p), (pattern.q, ref.total_q)):
        mass = shape.sum()
        out.append(shape * (total / mass) if mass != 0 else np.full(len(shape), total / len(shape)))
    return LoadVector(*out)


def encode_loads(net: Network, loads: LoadVector, cfg: EmbeddingConfig = EmbeddingConfig(),
                 reference: ReferenceSolution | None = None,
                 start: LoadVector | None = None) -> EmbeddingResult:
    """Compute a sparse load embedding by penalty continuation.

    Each iteration solves the penalized subproblem warm-started from the
    previous candidate, re-solves the OPF on the candidate loads and stops
    once the relative cost gap is within ``cfg.beta``; otherwise both
    penalty weights are multiplied by their growth factors.  The first
    subproblem starts from ``start`` (default: the original loads) and the
    reference voltages.
    """
    ref = reference if reference is not None else reference_solution(net, loads, cfg)
    if ref.cost == 0:
        raise EmbeddingError("reference cost is zero; relative cost tolerance undefined")
    beta_v, beta_s = cfg.beta_v, cfg.beta_s
    warm, warm_point = (ref.loads if start is None else start), ref.point
    trace: list[TraceEntry] = []
    best = None
    for i in range(cfg.max_iter + 1):
        sub = solve_penalty_subproblem(net, ref, beta_v, beta_s, warm, warm_point, cfg)
        # a failed subproblem hands back its warm start, which is still a
        # valid (fixed-dispatch feasible) candidate
        gap, cost = np.inf, np.nan
        opf = acopf.solve_acopf(net, sub.loads, cfg.solver, warm=ref.point)
        if opf.optimal:
            cost = opf.objective
            gap = _relative_gap(cost, ref.cost)
        cp, cq = sub.loads.nonzero_counts(cfg.zero_tol)
        trace.append(TraceEntry(i, beta_v, beta_s, gap, cp, cq, sub.ok))
        candidate = (gap, i, sub, cost, beta_v, beta_s)
        if best is None or gap < best[0]:
            best = candidate
        if gap <= cfg.beta:
            return EmbeddingResult(sub.loads, i + 1, beta_v, beta_s, cost, True, trace, ref,
                                   sub.point)
        if sub.ok:
            warm, warm_point = sub.loads, sub.point
        beta_v *= cfg.rho_v
        beta_s *= cfg.rho_s
    gap, i, sub, cost, bv, bs = best
    if not np.isfinite(gap):
        # nothing usable: fall back to the identity embedding
        return EmbeddingResult(ref.loads, len(trace), beta_v / cfg.rho_v, beta_s / cfg.rho_s,
                               ref.cost, False, trace, ref, ref.point)
    return EmbeddingResult(sub.loads, len(trace), bv, bs, cost, False, trace, ref, sub.point)


# ---------------------------------------------------------------------------
# Verification and metrics
# ---------------------------------------------------------------------------

@dataclass
class BilevelReport:
    nonzero_loads: int
    nonzero_p: int
    nonzero_q: int
    fixed_dispatch_feasible: bool
    fixed_dispatch_violation: float
    delta_p: float
    delta_q: float
    cost: float
    cost_gap: float
    beta: float
    total_tol: float = 1e-6

    @property
    def loads_equivalent(self) -> bool:
        return abs(self.delta_p) <= self.total_tol and abs(self.delta_q) <= self.total_tol

    @property
    def cost_equivalent(self) -> bool:
        return self.cost_gap <= self.beta

    @property
    def passed(self) -> bool:
        return self.fixed_dispatch_feasible and self.loads_equivalent and self.cost_equivalent


def verify_bilevel(net: Network, ref: ReferenceSolution, candidate: LoadVector, beta: float = 0.005,
                   zero_tol: float = 1e-5, feas_tol: float = 1e-5,
                   solver: SolverConfig = SolverConfig()) -> BilevelReport:
    """Check a candidate embedding against every condition of the bilevel model.

    Power flow under the pinned reference dispatch (from the reference
    voltages), load-total equivalence, and the relative gap of a fresh OPF
    solve on the candidate loads.  The nonzero-load count is reported as
    the bilevel objective value.
    """
    if len(candidate) != net.n_bus:
        raise ValueError("candidate dimension does not match bus count")
    nz_bus = int(np.count_nonzero(np.abs(candidate.s) > zero_tol))
    cp, cq = candidate.nonzero_counts(zero_tol)
    pf = acopf.solve_power_flow(net, candidate, ref.dispatch, solver, warm=ref.point)
    feas = check_feasibility(net, candidate, pf.point, feas_tol)
    opf = acopf.solve_acopf(net, candidate, solver, warm=ref.point)
    cost = opf.objective if opf.optimal else np.nan
    gap = _relative_gap(cost, ref.cost) if opf.optimal else np.inf
    return BilevelReport(nz_bus, cp, cq, feas.passed, feas.worst,
                         float(candidate.p.sum() - ref.total_p), float(candidate.q.sum() - ref.total_q),
                         cost, gap, beta)


@dataclass(frozen=True)
class Compression:
    active: float
    reactive: float

    @property
    def joint(self) -> float:
        return 0.5 * (self.active + self.reactive)


def compression_from_counts(c_p: int, c_pe: int, c_q: int, c_qe: int) -> Compression:
    if c_p == 0 or c_q == 0:
        raise ValueError("original load counts must be nonzero")
    return Compression(reduction_percentage(c_p, c_pe), reduction_percentage(c_q, c_qe))


def compression_report(original: LoadVector, embedded: LoadVector,
                       zero_tol: float = 1e-5) -> Compression:
    """Active, reactive and joint (mean) nonzero-load reduction percentages."""
    if len(original) != len(embedded):
        raise ValueError("load vectors differ in dimension")
    c_p, c_q = original.nonzero_counts(zero_tol)
    c_pe, c_qe = embedded.nonzero_counts(zero_tol)
    return compression_from_counts(c_p, c_pe, c_q, c_qe)
