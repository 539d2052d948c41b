import json

import cvxpy as cp
import numpy as np
import pytest

from p2plab.errors import SolverError
from p2plab.expert.compile import compile_ir
from p2plab.expert.correct import MAX_CORRECTIONS, diagnose, validate_and_correct
from p2plab.expert.dso import dso_correct_step, dso_verify
from p2plab.expert.generate import GeneratorBackend, generate_model, template_model
from p2plab.expert.ir import LinTerm, ModelIR, Term, Variable
from p2plab.expert.metrics import Trial, action_gap, deviation, run_trials, workflow_metrics
from p2plab.expert.pipeline import ExpertPolicy, plan_day, run_workflow, window_data
from p2plab.expert.qp import kkt_residuals, solve_qp
from p2plab.expert.schedule import solve_convex
from p2plab.expert.trading import integrate_trading
from p2plab.market.env import MarketEnv, evaluate_rollout
from p2plab.prosumer import Action, CdgParams, DeviceState, ProsumerSpec, initial_state


# ---------------------------------------------------------------- QP solver


def random_qp(rng, n=12, m=18):
    M = rng.standard_normal((n, n))
    P = M @ M.T + 0.1 * np.eye(n)
    q = rng.standard_normal(n)
    A = rng.standard_normal((m, n))
    x0 = rng.standard_normal(n)
    Ax = A @ x0
    l = Ax - rng.uniform(0.1, 1.0, m)
    u = Ax + rng.uniform(0.1, 1.0, m)
    l[:3] = u[:3] = Ax[:3]  # a few equalities
    return P, q, A, l, u


@pytest.mark.parametrize("seed", range(5))
def test_qp_matches_cvxpy(seed):
    rng = np.random.default_rng(seed)
    P, q, A, l, u = random_qp(rng)
    res = solve_qp(P, q, A, l, u)
    assert res.solved
    x = cp.Variable(len(q))
    prob = cp.Problem(cp.Minimize(0.5 * cp.quad_form(x, cp.psd_wrap(P)) + q @ x), [A @ x >= l, A @ x <= u])
    prob.solve(solver=cp.CLARABEL)
    assert res.objective == pytest.approx(prob.value, abs=1e-6, rel=1e-6)
    assert kkt_residuals(P, q, A, l, u, res.x, res.y)["max"] <= 1e-5


def test_qp_one_dimensional_boxes():
    P = np.array([[2.0]])
    A = np.eye(1)
    assert solve_qp(P, np.array([1.0]), A, np.array([0.0]), np.array([1.0])).x[0] == pytest.approx(0.0, abs=1e-8)
    assert solve_qp(P, np.array([1.0]), A, np.array([-1.0]), np.array([1.0])).x[0] == pytest.approx(-0.5, abs=1e-8)


def test_qp_infeasible_and_unbounded():
    A = np.array([[1.0], [1.0]])
    res = solve_qp(np.zeros((1, 1)), np.zeros(1), A, np.array([1.0, -np.inf]), np.array([np.inf, 0.0]))
    assert res.status == "infeasible"
    res = solve_qp(np.zeros((1, 1)), np.array([1.0]), np.array([[1.0]]), np.array([-np.inf]), np.array([1.0]))
    assert res.status == "unbounded"


# ---------------------------------------------------------------- brute-force oracle


def cdg_only_instance():
    spec = ProsumerSpec(bus_id=1, scenario_tag="Commercial", cdg=CdgParams(0.0, 0.4, 0.1, 6.0, 9.0), name="g")
    data = {
        "load_p": np.array([0.250, 0.310, 0.180, 0.400]),
        "lambda_buy": np.array([10.0, 27.5, 17.5, 27.5]),
        "lambda_sell": np.full(4, 7.5),
        "lambda_p2p": np.full(4, 12.0),
        "lambda_dso": 0.5,
        "init.p_cdg": 0.05,
    }
    return spec, data


def brute_force(spec, data, h=1e-3):
    """Dynamic programme over a 1e-3 grid of CDG outputs with ramp coupling."""
    c = spec.cdg
    grid = np.round(np.arange(c.p_min, c.p_max + h / 2, h), 9)
    T = len(data["load_p"])
    best = np.where(np.abs(grid - data["init.p_cdg"]) <= c.ramp_max + 1e-9, 0.0, np.inf)
    k = int(round(c.ramp_max / h))
    for t in range(T):
        imp = data["load_p"][t] - grid
        stage = c.cost_quad * grid**2 + c.cost_lin * grid + np.where(
            imp > 0, data["lambda_buy"][t] * imp, data["lambda_sell"][t] * imp)
        if t > 0:
            # min over predecessors within the ramp window
            prev = np.full_like(best, np.inf)
            for s in range(-k, k + 1):
                shifted = np.roll(best, s)
                if s > 0:
                    shifted[:s] = np.inf
                elif s < 0:
                    shifted[s:] = np.inf
                prev = np.minimum(prev, shifted)
            best = prev
        best = best + stage
    return float(best.min())


def test_convex_solve_matches_brute_force():
    spec, data = cdg_only_instance()
    ir = integrate_trading(template_model(spec, 4), allow_p2p=False)
    sched = solve_convex(ir, data)
    assert abs(sched.objective_value - brute_force(spec, data)) <= 1e-3
    assert sched.kkt["max"] <= 1e-5
    assert np.all(np.abs(np.diff(np.r_[0.05, sched.actions[:, 0]])) <= 0.1 + 1e-6)


def test_reference_model_agrees_with_pipeline(six_bus):
    from p2plab.expert.reference import reference_schedule

    data, prices = six_bus.day(0)
    for spec in six_bus.prosumers:
        run = run_workflow(spec, data, prices, horizon=12)
        ref = reference_schedule(spec, window_data(spec, data, prices, 0, 12), 12)
        assert run.passed
        # polygon inner approximation vs exact circle: slightly higher or equal cost
        assert run.schedule.objective_value >= ref.objective_value - 1e-6
        assert run.schedule.objective_value == pytest.approx(ref.objective_value, rel=1e-2, abs=1e-2)


# ---------------------------------------------------------------- IR and correction


def test_ir_canonical_json_round_trip(six_bus):
    ir = template_model(six_bus.prosumers[0], 8)
    s = ir.to_json()
    assert ModelIR.from_json(s).to_json() == s
    assert json.loads(s) == json.loads(template_model(six_bus.prosumers[0], 8).to_json())


def _defect(ir, kind):
    ir = ir.copy()
    if kind == "undeclared":
        ir.variables = [v for v in ir.variables if v.name != "p_cl"]
    elif kind == "nonconvex":
        next(t for t in ir.objective if t.kind == "quad").coef *= -1
    elif kind == "contradictory":
        v = ir.var("soc")
        v.lb, v.ub = v.ub, v.lb
    elif kind == "unbounded":
        ir.var("q_rdg").lb = None
    elif kind == "infeasible":
        # unit slip in the SOC dynamics: a constant drift no battery can follow
        next(c for c in ir.constraints if c.name == "bess_soc").rhs = 0.5
    elif kind == "extra_undeclared":
        ir.objective.append(Term("lin", "mystery", 1.0))
    return ir


@pytest.mark.parametrize("kind", ["undeclared", "nonconvex", "contradictory", "unbounded", "infeasible",
                                  "extra_undeclared"])
def test_injected_defects_are_repaired(six_bus, kind):
    data, prices = six_bus.day(0)
    spec = six_bus.prosumers[0]  # commercial: all four devices
    d = window_data(spec, data, prices, 0, 8)
    ir = integrate_trading(template_model(spec, 8), prices)
    bad = _defect(ir, kind)
    fixed, report = validate_and_correct(bad, d)
    assert report.passed, report.to_dict()
    assert 1 <= report.iterations <= MAX_CORRECTIONS
    assert not diagnose(fixed, d)
    assert solve_convex(fixed, d).kkt["max"] <= 1e-5


def test_clean_model_needs_no_correction(six_bus):
    data, prices = six_bus.day(0)
    for spec in six_bus.prosumers:
        d = window_data(spec, data, prices, 0, 8)
        _, report = validate_and_correct(integrate_trading(template_model(spec, 8), prices), d)
        assert report.passed and report.iterations == 0


def test_unknown_backend_and_fixture_backend(six_bus):
    from p2plab.errors import ConfigError
    from p2plab.expert.generate import FixtureStore

    spec = six_bus.prosumers[0]
    with pytest.raises(ConfigError):
        generate_model(spec, GeneratorBackend("nope"))
    rec = template_model(spec, 8)
    store = FixtureStore({spec.agent_id: rec.to_dict()})
    got = generate_model(spec, GeneratorBackend("fixture", {"store": store}), 8)
    assert got.to_dict()["constraints"] == rec.to_dict()["constraints"]


# ---------------------------------------------------------------- DSO


def test_dso_relieves_overloaded_leaf(six_bus):
    net, pros = six_bus.network, six_bus.prosumers
    leaf = next(p for p in pros if p.bus_id == 5)
    states = [initial_state(p) for p in pros]
    inputs = [(0.0, 0.05, 0.015)] * len(pros)
    i = pros.index(leaf)
    inputs[i] = (0.3, 1.6, 0.48)
    acts = [Action()] * len(pros)
    _, _, viol0, _ = dso_correct_step(net, pros, states, acts, inputs, max_rounds=0)
    assert np.sum(viol0 > 0) > 0
    new, v, viol, rounds = dso_correct_step(net, pros, states, acts, inputs)
    assert rounds >= 1
    assert np.sum(viol) < np.sum(viol0)
    assert np.sum(viol > 0) <= np.sum(viol0 > 0)


def test_plan_day_is_violation_free(expert_library, six_bus):
    scheds = expert_library.day(0)
    rep = expert_library.reports[0]
    assert rep.violations_after == 0
    assert rep.violations_after <= rep.violations_before
    assert all(s.kkt["max"] <= 1e-5 for s in scheds.values())
    data, prices = six_bus.day(0)
    agents = [p.agent_id for p in six_bus.prosumers]
    res = evaluate_rollout(ExpertPolicy(scheds, agents), MarketEnv(six_bus.network, six_bus.prosumers, data, prices))
    assert res["violation_rate"] == 0.0
    _, report = dso_verify(scheds, six_bus.network, six_bus.prosumers, data)
    assert report.violations_after == 0


# ---------------------------------------------------------------- metrics


def test_metric_definitions():
    assert deviation(110.0, 100.0) == pytest.approx(10.0)
    assert deviation(-90.0, -100.0) == pytest.approx(10.0)
    a = np.array([[1.0, 0.0], [2.0, 1e-5]])
    assert action_gap(a, a) == 0.0
    assert action_gap(a * 1.1, a) == pytest.approx(10.0)
    ref = {"x": Trial("x", True, 0, 100.0, a)}
    m = workflow_metrics([Trial("x", True, 0, 100.0, a), Trial("x", False, 2)], ref)
    assert m["pass_rate"] == 50.0 and m["accuracy"] == 100.0 and m["mean_corrections"] == 1.0


def test_workflow_metrics_six_bus(six_bus):
    trials, refs = run_trials(six_bus, day=0, horizon=12)
    m = workflow_metrics(trials, refs)
    assert m["pass_rate"] == 100.0
    assert m["mean_corrections"] == 0.0
    assert m["accuracy"] > 95.0
