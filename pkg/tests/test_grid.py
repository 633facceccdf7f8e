import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridembed.grid import (Branch, Bus, CostCurve, Generator, LoadVector, MissingSectionError, Network,
                            OperatingPoint, arc_flows, branch_flow, dispatch_cost, load_bundled,
                            parse_matpower, power_balance_residual, reduction_percentage, to_matpower)

finite = st.floats(-3, 3, allow_nan=False)
cplx = st.builds(complex, finite, finite)


def two_bus(**gen):
    g = dict(bus=1, p_min=0, p_max=3, q_min=-3, q_max=3, cost=CostCurve(0.0, 1.0, 0.0))
    g.update(gen)
    return Network([Bus(1, 0.9, 1.1, True), Bus(2, 0.9, 1.1)], [Generator(**g)],
                   [Branch(1, 2, 0.01, 0.1)], name="toy")


def test_case14_counts(case14):
    net, loads = case14
    assert (net.n_bus, net.n_gen, net.n_branch) == (14, 5, 20)
    assert loads.nonzero_counts() == (11, 11)


def test_case2_counts(case2):
    net, _ = case2
    assert net.n_bus == 2 and net.n_branch == 1


def test_missing_gencost_names_section(case2):
    text = to_matpower(*case2)
    cut = text[:text.index("mpc.gencost")]
    with pytest.raises(MissingSectionError, match="gencost"):
        parse_matpower(cut)


def test_branch_flow_examples():
    assert branch_flow(0j, 1 + 0j, 0.9 + 0.1j) == 0
    s = branch_flow(0 - 5j, 1 + 0j, np.exp(-0.1j))
    # independent evaluation of conj(Y) * Vf * conj(Vf - Vt)
    vf, vt, y = 1 + 0j, complex(math.cos(-0.1), math.sin(-0.1)), complex(0, -5)
    expect = y.conjugate() * vf * (vf - vt).conjugate()
    assert s == pytest.approx(expect)
    assert s == pytest.approx(0.49917 + 0.02498j, abs=1e-5)


@given(cplx, cplx)
def test_branch_flow_equal_voltages_vanish(y, v):
    assert abs(branch_flow(y, v, v)) == pytest.approx(0, abs=1e-12)


def test_flat_profile_zero_residual(case14):
    net, _ = case14
    op = OperatingPoint.from_voltage(net, np.full(net.n_bus, 1.02 + 0j), np.zeros(net.n_gen))
    r = power_balance_residual(net, op, LoadVector.zeros(net.n_bus))
    assert np.max(np.abs(r)) == 0


@settings(max_examples=30)
@given(st.integers(0, 4), st.floats(-1, 1), st.floats(-1, 1))
def test_residual_linear_in_generation(case14, g, dp, dq):
    net, loads = case14
    rng = np.random.default_rng(0)
    v = rng.uniform(0.95, 1.05, net.n_bus) * np.exp(1j * rng.uniform(-0.2, 0.2, net.n_bus))
    sg = rng.normal(size=net.n_gen) + 1j * rng.normal(size=net.n_gen)
    base = power_balance_residual(net, OperatingPoint.from_voltage(net, v, sg), loads)
    sg2 = sg.copy()
    sg2[g] += complex(dp, dq)
    bumped = power_balance_residual(net, OperatingPoint.from_voltage(net, v, sg2), loads)
    bus = net.gen_bus[g]
    delta = bumped - base
    assert delta[bus] == pytest.approx(complex(dp, dq), abs=1e-12)
    assert np.max(np.abs(np.delete(delta, bus))) == 0


@settings(max_examples=30)
@given(st.lists(cplx, min_size=14, max_size=14))
def test_residual_linear_in_loads(case14, extra):
    net, loads = case14
    op = OperatingPoint.from_voltage(net, np.ones(net.n_bus, complex), np.zeros(net.n_gen))
    more = LoadVector.from_complex(loads.s + np.array(extra))
    diff = power_balance_residual(net, op, more) - power_balance_residual(net, op, loads)
    assert np.allclose(diff, -np.array(extra), atol=1e-12)


def test_dispatch_cost_examples():
    assert dispatch_cost(two_bus(cost=CostCurve()), [0j]) == 0
    assert dispatch_cost(two_bus(cost=CostCurve(0, 1, 0)), [1.5 + 0j]) == 1.5
    assert dispatch_cost(two_bus(cost=CostCurve(2, 3, 5)), [2 + 0j]) == 19


@given(st.lists(finite, min_size=5, max_size=5), st.lists(finite, min_size=5, max_size=5))
def test_dispatch_cost_ignores_reactive(case14, p, q):
    net, _ = case14
    p = np.array(p)
    assert dispatch_cost(net, p + 1j * np.array(q)) == dispatch_cost(net, p + 0j)


def test_reduction_percentage_examples():
    assert reduction_percentage(22, 11) == 50
    assert reduction_percentage(7, 7) == 0
    assert reduction_percentage(100, 25) == 75
    with pytest.raises(ValueError):
        reduction_percentage(0, 0)


@pytest.mark.parametrize("name", ["case2", "case14", "case30"])
def test_round_trip(name):
    net, loads = load_bundled(name)
    net2, loads2 = parse_matpower(to_matpower(net, loads), name=name)
    assert net2 == net
    assert loads2 == loads


def test_arc_flows_reverse_arcs_share_branch(case14):
    net, _ = case14
    v = np.exp(1j * np.linspace(0, -0.2, net.n_bus))
    s = arc_flows(net, v)
    nb = net.n_branch
    # losses are non-negative on resistive branches
    assert np.all((s[:nb] + s[nb:]).real >= -1e-12)


def test_invalid_network_rejected():
    with pytest.raises(ValueError, match="slack"):
        Network([Bus(1, 0.9, 1.1), Bus(2, 0.9, 1.1)], [], [Branch(1, 2, 0, 0.1)])
    with pytest.raises(ValueError, match="connected"):
        Network([Bus(1, 0.9, 1.1, True), Bus(2, 0.9, 1.1), Bus(3, 0.9, 1.1)], [], [Branch(1, 2, 0, 0.1)])
