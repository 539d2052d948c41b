import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p2plab.errors import DivergenceError, DimensionError, TopologyError
from p2plab.fixtures import six_bus_network
from p2plab.netmodel import (
    Branch,
    Bus,
    Network,
    ac_power_flow,
    build_admittance,
    injection_residual,
    lindistflow_sensitivity,
    voltage_violation,
)


def two_bus(r=0.02, x=0.04):
    z = complex(r, x)
    y = 1 / z
    return Network([Bus(0, is_slack=True), Bus(1)], [Branch(0, 1, y.real, y.imag)])


def scalar_newton(p, q, r, x, tol=1e-12):
    """Independent 2-bus solve: unknowns (theta, v) at bus 1, slack fixed at 1.0."""
    y = 1 / complex(r, x)
    g, b = y.real, y.imag
    th, v = 0.0, 1.0
    for _ in range(50):
        # injection at bus 1 of a series branch g + jb (with G11 = g, G10 = -g)
        pc = v * v * g - v * (g * math.cos(th) + b * math.sin(th))
        qc = -v * v * b - v * (g * math.sin(th) - b * math.cos(th))
        f = np.array([pc - p, qc - q])
        if np.max(np.abs(f)) < tol:
            break
        J = np.array([
            [-v * (-g * math.sin(th) + b * math.cos(th)), 2 * v * g - (g * math.cos(th) + b * math.sin(th))],
            [-v * (g * math.cos(th) + b * math.sin(th)), -2 * v * b - (g * math.sin(th) - b * math.cos(th))],
        ])
        dth, dv = np.linalg.solve(J, -f)
        th, v = th + dth, v + dv
    return th, v


@pytest.mark.parametrize("p,q", [(-0.5, -0.2), (0.3, 0.1), (-1.0, 0.3), (0.0, 0.0)])
def test_two_bus_matches_scalar_newton(p, q):
    net = two_bus()
    sol = ac_power_flow(net, np.array([0.0, p]), np.array([0.0, q]))
    th, v = scalar_newton(p, q, 0.02, 0.04)
    assert abs(sol.v[1] - v) < 1e-6
    assert abs(sol.theta[1] - th) < 1e-6


def test_zero_injection_flat_profile():
    net = six_bus_network()
    sol = ac_power_flow(net, np.zeros(6), np.zeros(6))
    assert np.allclose(sol.v, 1.0, atol=1e-12)
    assert sol.iterations == 0


def test_admittance_properties():
    net = six_bus_network()
    Y = build_admittance(net)
    assert np.allclose(Y, Y.T)
    # every row sums to zero without shunts
    assert np.allclose(Y.sum(axis=1), 0.0, atol=1e-12)
    assert net.is_radial


@pytest.mark.parametrize("kind", ["six", "ieee"])
def test_residual_on_fixtures(kind, six_bus, ieee141):
    sc = six_bus if kind == "six" else ieee141
    rng = np.random.default_rng(3)
    net = sc.network
    for _ in range(5):
        p = -rng.uniform(0, 0.4 if kind == "six" else 0.05, net.n_bus)
        q = 0.3 * p
        sol = ac_power_flow(net, p, q)
        dp, dq = injection_residual(net, sol.v, sol.theta, sol.p, sol.q)
        assert max(np.max(np.abs(dp)), np.max(np.abs(dq))) <= 1e-8


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-0.3, 0.3), min_size=5, max_size=5), st.lists(st.floats(-0.1, 0.1), min_size=5, max_size=5))
def test_power_flow_residual_property(p, q):
    net = six_bus_network()
    pi = np.array([0.0, *p])
    qi = np.array([0.0, *q])
    sol = ac_power_flow(net, pi, qi)
    dp, dq = injection_residual(net, sol.v, sol.theta, sol.p, sol.q)
    assert np.max(np.abs(np.concatenate([dp, dq]))) <= 1e-8
    # slack absorbs the balance: losses are non-negative
    assert sol.p.sum() >= -1e-10


def test_divergence_on_impossible_load():
    with pytest.raises(DivergenceError):
        ac_power_flow(two_bus(), np.array([0.0, -50.0]), np.array([0.0, -50.0]))


def test_dimension_checks():
    with pytest.raises(DimensionError):
        ac_power_flow(six_bus_network(), np.zeros(5), np.zeros(6))


def test_topology_errors():
    with pytest.raises(TopologyError):
        Network([Bus(0), Bus(1)], [Branch(0, 1, 1.0, -1.0)])
    with pytest.raises(TopologyError):
        Network([Bus(0, is_slack=True), Bus(1)], [Branch(0, 2, 1.0, -1.0)])


def test_lindistflow_predicts_small_perturbations():
    # linearisation point of the branch-flow model: the unloaded feeder
    net = six_bus_network()
    sens = lindistflow_sensitivity(net)
    rng = np.random.default_rng(0)
    for _ in range(50):
        dp = np.r_[0.0, rng.uniform(-0.05, 0.05, 5)]
        dq = np.r_[0.0, rng.uniform(-0.05, 0.05, 5)]
        actual = ac_power_flow(net, dp, dq).v - 1.0
        pred = sens.predict(dp, dq)
        assert np.max(np.abs(pred - actual)) <= 0.02 * np.max(np.abs(actual))


def test_lindistflow_sign_pattern():
    sens = lindistflow_sensitivity(six_bus_network())
    # injecting active power raises every downstream voltage, never the slack
    assert np.all(sens.dv_dp[1:, 1:] > 0)
    assert np.all(sens.dv_dp[0] == 0)
    assert np.allclose(sens.dv_dp, sens.dv_dp.T)


def test_voltage_violation_kernel():
    net = six_bus_network()
    v = np.array([1.0, 1.0, 0.96, 0.94, 1.06, 1.05])
    viol = voltage_violation(v, net)
    assert viol[0] == 0 and viol[2] == 0 and viol[5] == 0
    assert viol[3] == pytest.approx(0.01)
    assert viol[4] == pytest.approx(0.01)
