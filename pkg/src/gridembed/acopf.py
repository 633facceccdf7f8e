"""AC optimal power flow: constraint model, solver, feasibility and binding checks.

Voltages are parametrized in polar form with the slack angle eliminated, so
the reference-angle constraint holds by construction.  Branch flows are not
variables; they are recomputed from voltages, which removes Ohm's law from
the constraint set.  Remaining constraints go to an SQP solve with analytic
Jacobians; if that stalls, a warm-up pass of the augmented-Lagrangian
engine in :mod:`gridembed.penalty` precedes a second SQP attempt.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear, minimize

from . import penalty
from .grid import LoadVector, Network, OperatingPoint, arc_flows, bus_injection, dispatch_cost, power_balance_residual


@dataclass(frozen=True)
class SolverConfig:
    feas_tol: float = 1e-6
    opt_tol: float = 1e-6
    max_outer: int = 50
    max_inner: int = 500
    seed: int = 0
    restarts: int = 3

    def __post_init__(self):
        if self.feas_tol <= 0 or self.opt_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration limits must be >= 1")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    ITERATION_LIMIT = "IterationLimit"


@dataclass
class SolveResult:
    status: Status
    point: OperatingPoint
    objective: float
    max_violation: float
    stationarity: float = np.nan
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL

    def to_dict(self) -> dict:
        op = self.point
        return {
            "status": self.status.value,
            "objective": self.objective,
            "max_violation": self.max_violation,
            "stationarity": self.stationarity,
            "vm": op.vm.tolist(),
            "va": op.va.tolist(),
            "pg": op.gen_injection.real.tolist(),
            "qg": op.gen_injection.imag.tolist(),
        }


@dataclass(frozen=True)
class BindingSets:
    """Binding constraints at an operating point.

    ``n_upper``/``n_lower`` hold bus *indices* (positions in ``Network.buses``)
    and ``e_binding`` holds arc indices into the ``E + E^R`` flow vector.
    """

    n_upper: tuple[int, ...] = ()
    n_lower: tuple[int, ...] = ()
    e_binding: tuple[int, ...] = ()

    def __post_init__(self):
        if set(self.n_upper) & set(self.n_lower):
            raise ValueError("a bus cannot bind at both voltage bounds")

    @property
    def empty(self) -> bool:
        return not (self.n_upper or self.n_lower or self.e_binding)


# ---------------------------------------------------------------------------
# Constraint model
# ---------------------------------------------------------------------------

class ACModel:
    """Power-flow constraints over a configurable set of free variables.

    The variable vector is ``[v (all buses), theta (non-slack buses)]``
    followed by ``[p_g, q_g]`` when the dispatch is free and by
    ``[p_d, q_d]`` restricted to ``load_buses`` when loads are free.  Fixed
    blocks are taken from ``dispatch`` / ``loads``.  With free loads the
    load totals ``load_totals`` are added as two equality constraints.
    """

    def __init__(self, net: Network, *, loads: LoadVector | None = None, dispatch=None,
                 load_buses=None, load_totals=None, load_bounds=None):
        self.net = net
        n, ng = net.n_bus, net.n_gen
        self.free_theta = np.array([i for i in range(n) if i != net.slack], dtype=int)
        self.free_dispatch = dispatch is None
        self.free_loads = load_buses is not None
        if not self.free_dispatch:
            dispatch = np.asarray(dispatch, dtype=complex)
            if dispatch.shape != (ng,):
                raise ValueError("dispatch dimension does not match generator count")
            self.pg_fixed, self.qg_fixed = dispatch.real.copy(), dispatch.imag.copy()
        if self.free_loads:
            self.load_buses = np.asarray(load_buses, dtype=int)
            self.load_totals = tuple(float(t) for t in load_totals)
        else:
            if loads is None or len(loads) != n:
                raise ValueError("fixed loads must match the bus count")
            self.pd_fixed, self.qd_fixed = loads.p.copy(), loads.q.copy()
        nl = len(self.load_buses) if self.free_loads else 0

        self.sl_v = slice(0, n)
        self.sl_th = slice(n, 2 * n - 1)
        off = 2 * n - 1
        if self.free_dispatch:
            self.sl_pg, self.sl_qg = slice(off, off + ng), slice(off + ng, off + 2 * ng)
            off += 2 * ng
        if self.free_loads:
            self.sl_pd, self.sl_qd = slice(off, off + nl), slice(off + nl, off + 2 * nl)
            off += 2 * nl
        self.size = off

        lo = np.full(off, -np.inf)
        hi = np.full(off, np.inf)
        lo[self.sl_v], hi[self.sl_v] = net.v_min, net.v_max
        if self.free_dispatch:
            pmin, pmax, qmin, qmax = net.gen_bounds
            lo[self.sl_pg], hi[self.sl_pg] = pmin, pmax
            lo[self.sl_qg], hi[self.sl_qg] = qmin, qmax
        if self.free_loads and load_bounds is not None:
            (plo, phi), (qlo, qhi) = load_bounds
            lo[self.sl_pd], hi[self.sl_pd] = plo, phi
            lo[self.sl_qd], hi[self.sl_qd] = qlo, qhi
        self.lo, self.hi = lo, hi

        nb = net.n_branch
        amin, amax = net.angle_bounds
        self.ang_hi = np.flatnonzero(np.isfinite(amax))
        self.ang_lo = np.flatnonzero(np.isfinite(amin))
        self.amax, self.amin = amax[self.ang_hi], amin[self.ang_lo]
        self.br_from = net.arc_from[:nb]
        self.br_to = net.arc_to[:nb]
        self.pinned = self._pinned_arcs()
        limited = np.isfinite(net.arc_s_max)
        limited[self.pinned] = False
        self.thermal = np.flatnonzero(limited)
        self.s_lim = net.arc_s_max[self.thermal]
        self.yc = np.conj(net.arc_admittance)
        self.total_rows = self._total_rows()
        self.n_eq = 2 * n + len(self.total_rows)

    def _total_rows(self) -> np.ndarray:
        """Which of the (p, q) load-total equalities are kept.

        With the dispatch pinned, the summed balance rows already fix
        ``sum(loads)`` whenever the corresponding losses vanish identically
        (all ``r = 0`` for p, all ``x = 0`` for q); the explicit total row
        would then make the equality Jacobian rank deficient.
        """
        if not self.free_loads:
            return np.zeros(0, dtype=int)
        keep = [0, 1]
        if not self.free_dispatch:
            if all(br.r == 0 for br in self.net.branches):
                keep.remove(0)
            if all(br.x == 0 for br in self.net.branches):
                keep.remove(1)
        return np.asarray(keep, dtype=int)

    def _pinned_arcs(self) -> np.ndarray:
        """Thermally limited arcs whose flow is a constant of the model.

        An arc leaving a leaf bus carries exactly that bus's net injection;
        with the dispatch fixed and no free load there, the flow is fixed and
        its limit row would only duplicate the balance rows (which stalls the
        SQP subproblems).  Rows are dropped only when the constant satisfies
        the limit, so infeasible data still shows up as a violation.
        """
        net = self.net
        if self.free_dispatch:
            return np.zeros(0, dtype=int)
        degree = np.bincount(self.br_from, minlength=net.n_bus) + np.bincount(self.br_to, minlength=net.n_bus)
        inj = np.zeros(net.n_bus, dtype=complex)
        np.add.at(inj, net.gen_bus, self.pg_fixed + 1j * self.qg_fixed)
        free = np.zeros(net.n_bus, dtype=bool)
        if self.free_loads:
            free[self.load_buses] = True
        else:
            inj -= self.pd_fixed + 1j * self.qd_fixed
        out = []
        for a in np.flatnonzero(np.isfinite(net.arc_s_max)):
            i = net.arc_from[a]
            if degree[i] == 1 and not free[i] and abs(inj[i]) <= net.arc_s_max[a] + 1e-6:
                out.append(a)
        return np.asarray(out, dtype=int)

    # unpacking ---------------------------------------------------------------
    def unpack(self, x):
        net = self.net
        v = x[self.sl_v]
        theta = np.zeros(net.n_bus)
        theta[self.free_theta] = x[self.sl_th]
        if self.free_dispatch:
            pg, qg = x[self.sl_pg], x[self.sl_qg]
        else:
            pg, qg = self.pg_fixed, self.qg_fixed
        if self.free_loads:
            pd = np.zeros(net.n_bus)
            qd = np.zeros(net.n_bus)
            pd[self.load_buses] = x[self.sl_pd]
            qd[self.load_buses] = x[self.sl_qd]
        else:
            pd, qd = self.pd_fixed, self.qd_fixed
        return v, theta, pg, qg, pd, qd

    def pack(self, v, theta, pg=None, qg=None, pd=None, qd=None) -> np.ndarray:
        x = np.zeros(self.size)
        x[self.sl_v] = v
        x[self.sl_th] = np.asarray(theta)[self.free_theta]
        if self.free_dispatch:
            x[self.sl_pg], x[self.sl_qg] = pg, qg
        if self.free_loads:
            x[self.sl_pd] = np.asarray(pd)[self.load_buses]
            x[self.sl_qd] = np.asarray(qd)[self.load_buses]
        return x

    def pack_point(self, op: OperatingPoint, loads: LoadVector | None = None) -> np.ndarray:
        gi = op.gen_injection
        return self.pack(np.abs(op.voltage), np.angle(op.voltage), gi.real, gi.imag,
                         None if loads is None else loads.p, None if loads is None else loads.q)

    def point(self, x) -> OperatingPoint:
        v, theta, pg, qg, _, _ = self.unpack(x)
        return OperatingPoint.from_voltage(self.net, v * np.exp(1j * theta), pg + 1j * qg)

    def loads(self, x) -> LoadVector:
        _, _, _, _, pd, qd = self.unpack(x)
        return LoadVector(pd, qd)

    # evaluation --------------------------------------------------------------
    def flows(self, v, theta):
        net = self.net
        f, t = net.arc_from, net.arc_to
        e = np.exp(1j * (theta[f] - theta[t]))
        vf, vt = v[f], v[t]
        return self.yc * (vf * vf - vf * vt * e), e

    def __call__(self, x) -> penalty.Constraints:
        net = self.net
        n = net.n_bus
        v, theta, pg, qg, pd, qd = self.unpack(x)
        f, t = net.arc_from, net.arc_to
        s, e = self.flows(v, theta)
        mis_p = (np.bincount(net.gen_bus, pg, minlength=n) - pd
                 - np.bincount(f, s.real, minlength=n))
        mis_q = (np.bincount(net.gen_bus, qg, minlength=n) - qd
                 - np.bincount(f, s.imag, minlength=n))
        eq = [mis_p, mis_q]
        if self.free_loads:
            totals = np.array([pd.sum() - self.load_totals[0], qd.sum() - self.load_totals[1]])
            eq.append(totals[self.total_rows])
        delta = theta[self.br_from] - theta[self.br_to]
        st = s[self.thermal]
        ineq = np.concatenate([delta[self.ang_hi] - self.amax, self.amin - delta[self.ang_lo],
                               (st.real ** 2 + st.imag ** 2 - self.s_lim ** 2) / (2 * self.s_lim)])

        def vjp(a, b):
            a_p, a_q = a[:n], a[n:2 * n]
            nh, nlo = len(self.ang_hi), len(self.ang_lo)
            b_hi, b_lo, b_th = b[:nh], b[nh:nh + nlo], b[nh + nlo:]
            wp = -a_p[f]
            wq = -a_q[f]
            wp[self.thermal] += b_th * st.real / self.s_lim
            wq[self.thermal] += b_th * st.imag / self.s_lim
            w = (wp - 1j * wq) * self.yc
            vf, vt = v[f], v[t]
            g_v = (np.bincount(f, np.real(w * (2 * vf - vt * e)), minlength=n)
                   - np.bincount(t, np.real(w * vf * e), minlength=n))
            k = np.real(-1j * w * vf * vt * e)
            g_th = np.bincount(f, k, minlength=n) - np.bincount(t, k, minlength=n)
            nb = len(self.br_from)
            d_delta = np.zeros(nb)
            d_delta[self.ang_hi] += b_hi
            d_delta[self.ang_lo] -= b_lo
            g_th += (np.bincount(self.br_from, d_delta, minlength=n)
                     - np.bincount(self.br_to, d_delta, minlength=n))
            grad = np.empty(self.size)
            grad[self.sl_v] = g_v
            grad[self.sl_th] = g_th[self.free_theta]
            if self.free_dispatch:
                grad[self.sl_pg] = a_p[net.gen_bus]
                grad[self.sl_qg] = a_q[net.gen_bus]
            if self.free_loads:
                a_tot = np.zeros(2)
                a_tot[self.total_rows] = a[2 * n:]
                grad[self.sl_pd] = -a_p[self.load_buses] + a_tot[0]
                grad[self.sl_qd] = -a_q[self.load_buses] + a_tot[1]
            return grad

        return penalty.Constraints(np.concatenate(eq), ineq, vjp)

    def jacobian(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Dense Jacobians ``(d eq / dx, d ineq / dx)``."""
        net = self.net
        n = net.n_bus
        v, theta, pg, qg, pd, qd = self.unpack(x)
        f, t = net.arc_from, net.arc_to
        s, e = self.flows(v, theta)
        vf, vt = v[f], v[t]
        d_vf = self.yc * (2 * vf - vt * e)
        d_vt = -self.yc * vf * e
        d_thf = -1j * self.yc * vf * vt * e
        th_col = np.full(n, -1)
        th_col[self.free_theta] = self.sl_th.start + np.arange(len(self.free_theta))
        cf, ct = th_col[f], th_col[t]
        mf, mt = cf >= 0, ct >= 0

        def arc_block(rows, dv_f, dv_t, dth_f):
            # one row per entry of `rows`, derivative of the arc quantity
            m = np.zeros((len(rows), self.size))
            r = np.arange(len(rows))
            np.add.at(m, (r, f[rows]), dv_f)
            np.add.at(m, (r, t[rows]), dv_t)
            np.add.at(m, (r[mf[rows]], cf[rows][mf[rows]]), dth_f[mf[rows]])
            np.add.at(m, (r[mt[rows]], ct[rows][mt[rows]]), -dth_f[mt[rows]])
            return m

        arcs = np.arange(len(f))
        jac_p = arc_block(arcs, -d_vf.real, -d_vt.real, -d_thf.real)
        jac_q = arc_block(arcs, -d_vf.imag, -d_vt.imag, -d_thf.imag)
        j_eq = np.zeros((self.n_eq, self.size))
        # aggregate arc rows onto their sending buses
        np.add.at(j_eq, f, jac_p)
        np.add.at(j_eq, n + f, jac_q)
        if self.free_dispatch:
            k = np.arange(net.n_gen)
            np.add.at(j_eq, (net.gen_bus, self.sl_pg.start + k), 1.0)
            np.add.at(j_eq, (n + net.gen_bus, self.sl_qg.start + k), 1.0)
        if self.free_loads:
            k = np.arange(len(self.load_buses))
            j_eq[self.load_buses, self.sl_pd.start + k] = -1.0
            j_eq[n + self.load_buses, self.sl_qd.start + k] = -1.0
            for row, which in enumerate(self.total_rows):
                j_eq[2 * n + row, self.sl_pd if which == 0 else self.sl_qd] = 1.0

        nb = len(self.br_from)
        j_ang = np.zeros((nb, self.size))
        r = np.arange(nb)
        bf, bt = th_col[self.br_from], th_col[self.br_to]
        j_ang[r[bf >= 0], bf[bf >= 0]] = 1.0
        j_ang[r[bt >= 0], bt[bt >= 0]] = -1.0
        th = self.thermal
        st = s[th] / self.s_lim
        d_th = (st.real[:, None] * -jac_p[th] + st.imag[:, None] * -jac_q[th])
        j_in = np.vstack([j_ang[self.ang_hi], -j_ang[self.ang_lo], d_th])
        return j_eq, j_in

    # starting points -----------------------------------------------------------
    def flat_start(self, loads: LoadVector | None = None, jitter: float = 0.0, rng=None):
        net = self.net
        v = 0.5 * (net.v_min + net.v_max)
        theta = np.zeros(net.n_bus)
        if jitter:
            theta = rng.uniform(-jitter, jitter, net.n_bus)
            theta[net.slack] = 0.0
        pg = qg = None
        if self.free_dispatch:
            ref = loads if loads is not None else LoadVector(self.pd_fixed, self.qd_fixed)
            pmin, pmax, qmin, qmax = net.gen_bounds
            pg = np.clip(pmax * _share(ref.p.sum(), pmax.sum()), pmin, pmax)
            qg = np.clip(qmax * _share(ref.q.sum(), qmax.sum()), qmin, qmax)
        pd = qd = None
        if self.free_loads:
            pd, qd = loads.p, loads.q
        return self.pack(v, theta, pg, qg, pd, qd)


def _share(total, capacity):
    return total / capacity if capacity > 0 else 0.0


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

def cost_objective(net: Network, model: ACModel, scale: float):
    c2, c1, c0 = net.cost_coeffs

    def objective(x):
        pg = x[model.sl_pg]
        grad = np.zeros(model.size)
        grad[model.sl_pg] = (2 * c2 * pg + c1) / scale
        return float(np.sum(c2 * pg * pg + c1 * pg + c0)) / scale, grad

    return objective


def cost_scale(net: Network) -> float:
    """Typical marginal cost, used to bring the objective gradient to O(1)."""
    c2, c1, _ = net.cost_coeffs
    _, pmax, _, _ = net.gen_bounds
    marginal = np.abs(c1) + 2 * c2 * np.where(np.isfinite(pmax), np.abs(pmax), 1.0)
    return float(max(np.max(marginal, initial=0.0), 1e-8))


class _Cache:
    """Memoize constraint values/Jacobians on the last point (SLSQP asks repeatedly)."""

    def __init__(self, model: ACModel):
        self.model = model
        self._key = self._jkey = None

    def cons(self, x):
        key = x.tobytes()
        if key != self._key:
            self._key, self._cons = key, self.model(x)
        return self._cons

    def jac(self, x):
        key = x.tobytes()
        if key != self._jkey:
            self._jkey, self._jac = key, self.model.jacobian(x)
        return self._jac


def kkt_residual(model: ACModel, objective, x, active_tol: float = 1e-6) -> float:
    """Infinity norm of the best first-order (KKT) residual at ``x``.

    Multipliers are fitted by bounded least squares: free for equalities,
    nonnegative for near-active inequalities and bounds.
    """
    _, grad = objective(x)
    cons = model(x)
    j_eq, j_in = model.jacobian(x)
    act = cons.ineq >= -active_tol
    at_lo = np.isfinite(model.lo) & (x - model.lo <= active_tol)
    at_hi = np.isfinite(model.hi) & (model.hi - x <= active_tol)
    eye = np.eye(model.size)
    cols = np.vstack([j_eq, j_in[act], -eye[at_lo], eye[at_hi]]).T
    n_eq = j_eq.shape[0]
    lb = np.concatenate([np.full(n_eq, -np.inf), np.zeros(cols.shape[1] - n_eq)])
    if cols.shape[1] == 0:
        return float(np.max(np.abs(grad)))
    fit = lsq_linear(cols, -grad, bounds=(lb, np.full(cols.shape[1], np.inf)),
                     method="bvls", lsq_solver="exact")
    return float(np.max(np.abs(cols @ fit.x + grad)))


def run(model: ACModel, objective, x0, cfg: SolverConfig) -> penalty.PenaltyResult:
    """SQP solve from ``x0``; on failure, re-enter after a penalty warm-up phase."""
    res = _sqp(model, objective, x0, cfg)
    if not res.converged:
        warm = penalty.solve(objective, model, x0, model.lo, model.hi, feas_tol=cfg.feas_tol,
                             opt_tol=cfg.opt_tol, max_outer=min(cfg.max_outer, 5),
                             max_inner=cfg.max_inner)
        retry = _sqp(model, objective, warm.x, cfg)
        retry.inner_iterations += warm.inner_iterations + res.inner_iterations
        if (retry.converged, -retry.violation) >= (res.converged, -res.violation):
            res = retry
    return res


def _sqp(model: ACModel, objective, x0, cfg: SolverConfig) -> penalty.PenaltyResult:
    cache = _Cache(model)
    bounds = list(zip(np.where(np.isfinite(model.lo), model.lo, None),
                      np.where(np.isfinite(model.hi), model.hi, None)))
    constraints = [
        {"type": "eq", "fun": lambda x: cache.cons(x).eq, "jac": lambda x: cache.jac(x)[0]},
        {"type": "ineq", "fun": lambda x: -cache.cons(x).ineq, "jac": lambda x: -cache.jac(x)[1]},
    ]
    x = np.clip(np.asarray(x0, dtype=float), model.lo, model.hi)
    iters = 0
    for _ in range(2):
        with warnings.catch_warnings():
            # SLSQP clips line-search trial points to the box and says so
            warnings.simplefilter("ignore", RuntimeWarning)
            sol = minimize(objective, x, jac=True, method="SLSQP", bounds=bounds,
                           constraints=constraints,
                           options={"maxiter": cfg.max_inner,
                                    "ftol": 1e-13 * max(1.0, abs(objective(x)[0]))})
        x = np.clip(sol.x, model.lo, model.hi)
        iters += int(sol.nit)
        viol = penalty.violation(model(x))
        stat = kkt_residual(model, objective, x)
        if viol <= cfg.feas_tol and stat <= cfg.opt_tol:
            break
    converged = bool(viol <= cfg.feas_tol and stat <= cfg.opt_tol)
    empty = np.zeros(0)
    return penalty.PenaltyResult(x, objective(x)[0], viol, stat, empty, empty, 1, iters, converged)


def _status(res: penalty.PenaltyResult, cfg: SolverConfig) -> Status:
    if res.converged:
        return Status.OPTIMAL
    if res.violation <= cfg.feas_tol:
        return Status.ITERATION_LIMIT
    return Status.INFEASIBLE


def solve_acopf(net: Network, loads: LoadVector, cfg: SolverConfig = SolverConfig(),
                warm: OperatingPoint | None = None) -> SolveResult:
    """Solve the AC-OPF to local optimality.

    Starts from ``warm`` (if given) or a flat start, then retries up to
    ``cfg.restarts`` times from angle-jittered flat starts until a point
    meeting both tolerances is found.  The best attempt (fewest violations)
    is returned when none succeeds.
    """
    if len(loads) != net.n_bus:
        raise ValueError("load vector dimension does not match bus count")
    model = ACModel(net, loads=loads)
    objective = cost_objective(net, model, cost_scale(net))
    rng = np.random.default_rng(cfg.seed)
    starts = [model.pack_point(warm) if warm is not None else model.flat_start(loads)]
    best = None
    for attempt in range(cfg.restarts + 1):
        x0 = starts[0] if attempt == 0 else model.flat_start(loads, jitter=0.05, rng=rng)
        res = run(model, objective, x0, cfg)
        if best is None or (res.converged, -res.violation) > (best.converged, -best.violation):
            best = res
        if res.converged:
            break
    point = model.point(best.x)
    return SolveResult(_status(best, cfg), point, dispatch_cost(net, point.gen_injection),
                       best.violation, best.stationarity, best.inner_iterations)


def solve_power_flow(net: Network, loads: LoadVector, dispatch, cfg: SolverConfig = SolverConfig(),
                     warm: OperatingPoint | None = None) -> SolveResult:
    """Find voltages making ``(loads, dispatch)`` AC-feasible, dispatch pinned.

    With every injection fixed the balance equations over-determine the
    voltages by one degree of freedom, so a solution exists only when the
    losses match; the status reports whether one was found.
    """
    model = ACModel(net, loads=loads, dispatch=dispatch)

    def zero(x):
        return 0.0, np.zeros(model.size)

    x0 = model.pack_point(warm) if warm is not None else model.flat_start()
    res = run(model, zero, x0, cfg)
    point = model.point(res.x)
    status = Status.OPTIMAL if res.violation <= cfg.feas_tol else Status.INFEASIBLE
    return SolveResult(status, point, dispatch_cost(net, point.gen_injection), res.violation,
                       res.stationarity, res.inner_iterations)


def project_to_feasible(net: Network, loads: LoadVector, target: OperatingPoint,
                        cfg: SolverConfig = SolverConfig()) -> SolveResult:
    """Closest AC-feasible point (in the variable space) to ``target``."""
    model = ACModel(net, loads=loads)
    x_t = model.pack_point(target)

    def distance(x):
        d = x - x_t
        return 0.5 * float(d @ d), d

    res = run(model, distance, np.clip(x_t, model.lo, model.hi), cfg)
    point = model.point(res.x)
    status = Status.OPTIMAL if res.violation <= cfg.feas_tol else Status.INFEASIBLE
    return SolveResult(status, point, dispatch_cost(net, point.gen_injection), res.violation,
                       res.stationarity, res.inner_iterations)


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

@dataclass
class FeasibilityReport:
    """Largest violation of each constraint family (p.u. or rad)."""

    violations: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-6

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.violations.values())

    @property
    def worst(self) -> float:
        return max(self.violations.values(), default=0.0)

    def __getitem__(self, family: str) -> float:
        return self.violations[family]


def check_feasibility(net: Network, loads: LoadVector, op: OperatingPoint,
                      tol: float = 1e-6) -> FeasibilityReport:
    vm = np.abs(op.voltage)
    va = np.angle(op.voltage)
    pmin, pmax, qmin, qmax = net.gen_bounds
    pg, qg = op.gen_injection.real, op.gen_injection.imag
    nb = net.n_branch
    amin, amax = net.angle_bounds
    delta = np.angle(op.voltage[net.arc_from[:nb]] * np.conj(op.voltage[net.arc_to[:nb]]))
    zero = np.zeros(1)
    report = {
        "slack_angle": abs(float(va[net.slack])),
        "voltage": float(np.max(np.concatenate([net.v_min - vm, vm - net.v_max, zero]))),
        "angle_difference": float(np.max(np.concatenate([amin - delta, delta - amax, zero]))),
        "generator": float(np.max(np.concatenate([pmin - pg, pg - pmax, qmin - qg, qg - qmax, zero]))),
        "thermal": float(np.max(np.concatenate([np.abs(op.flow) - net.arc_s_max, zero]))),
        "balance": float(np.max(np.abs(power_balance_residual(net, op, loads)), initial=0.0)),
        "ohm": float(np.max(np.abs(op.flow - arc_flows(net, op.voltage)), initial=0.0)),
    }
    return FeasibilityReport(report, tol)


def binding_sets(net: Network, op: OperatingPoint, eps: float = 1e-4) -> BindingSets:
    vm = np.abs(op.voltage)
    gap_u = net.v_max - vm
    gap_l = vm - net.v_min
    upper = (gap_u <= eps) & ((gap_l > eps) | (gap_u <= gap_l))
    lower = (gap_l <= eps) & ~upper
    arcs = np.flatnonzero(net.arc_s_max - np.abs(op.flow) <= eps)
    return BindingSets(tuple(np.flatnonzero(upper).tolist()), tuple(np.flatnonzero(lower).tolist()),
                       tuple(arcs.tolist()))


__all__ = [
    "ACModel", "BindingSets", "FeasibilityReport", "SolveResult", "SolverConfig", "Status",
    "binding_sets", "bus_injection", "check_feasibility", "project_to_feasible",
    "solve_acopf", "solve_power_flow",
]
