"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import norm

from p2plab import autodiff as ad
from p2plab.cli import main
from p2plab.expert.correct import MAX_CORRECTIONS, validate_and_correct
from p2plab.expert.generate import template_model
from p2plab.expert.metrics import run_trials, workflow_metrics
from p2plab.expert.pipeline import window_data
from p2plab.expert.schedule import solve_convex
from p2plab.expert.trading import integrate_trading
from p2plab.imitation import (
    DESK_CONFIG,
    DualReplay,
    HyperParams,
    Learner,
    Transition,
    evaluate_policy,
    load_config,
    per_push,
    per_sample,
    train,
    w2_gaussian_dirac,
)
from p2plab.market.env import clear_p2p
from p2plab.netmodel import ac_power_flow, injection_residual
from p2plab.nets import DiffAttnConfig, diff_attention, init_diff_attention, standard_attention

from test_expert import _defect, brute_force, cdg_only_instance
from test_netmodel import scalar_newton, two_bus


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return emit


# 1 ---------------------------------------------------------------------------


def test_c1_w2_quantile_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    n = 100_000
    z = norm.ppf((np.arange(n) + 0.5) / n)
    worst = 0.0
    for _ in range(100):
        mu, a = rng.normal(0, 2, 2)
        sigma = rng.uniform(0.01, 3.0)
        oracle = math.sqrt(np.mean((mu + sigma * z - a) ** 2))
        worst = max(worst, abs(w2_gaussian_dirac([mu], [sigma], [a]) - oracle))
    dt = time.perf_counter() - t0
    ok = worst < 1e-3 and dt < 5.0
    report(1, ok, f"max |err| {worst:.2e} (< 1e-3), runtime {dt:.2f}s (< 5s)")
    assert ok


# 2 ---------------------------------------------------------------------------


def test_c2_differential_attention_reduction(report):
    rng = np.random.default_rng(2)
    cfg = DiffAttnConfig(3, 64, 4, 8)
    params = init_diff_attention(cfg, rng, (2,))
    E = rng.standard_normal((2, 16, 3, 64))
    tp = ad.Tape()
    P = {k: tp.const(v) for k, v in params.items()}
    X0 = diff_attention(tp.const(E), cfg, P, xi=tp.const(np.zeros((2, 4))))
    S = standard_attention(tp.const(E), cfg, P)
    red = float(np.max(np.abs(X0.data - S.data)))
    _, maps = diff_attention(tp.const(E), cfg, P, return_maps=True)
    rows = maps["diff"].data.sum(axis=-1)
    rs = float(np.max(np.abs(rows - (1.0 - maps["xi"].data[:, None, :, None]))))
    ok = red <= 1e-12 and rs <= 1e-10
    report(2, ok, f"xi=0 reduction err {red:.1e} (<= 1e-12), row-sum err {rs:.1e} (<= 1e-10)")
    assert ok


# 3 ---------------------------------------------------------------------------


def _fd_check(loss_fn, params: dict, grads: dict, rng, per_tensor=24, h=1e-5) -> float:
    """Central differences on sampled coordinates of every parameter tensor."""
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size) if flat.size <= per_tensor else rng.choice(flat.size, per_tensor, replace=False)
        num = np.empty(len(idx))
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + h
            fp = loss_fn()
            flat[k] = orig - h
            fm = loss_fn()
            flat[k] = orig
            num[j] = (fp - fm) / (2 * h)
        worst = max(worst, ad.relative_error(grads[name].reshape(-1)[idx], num))
    return worst


def test_c3_gradient_suite(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    n, B = 3, 5
    hp = HyperParams(hidden=8, critic_d_model=8, critic_heads=2, critic_d_k=2)
    masks = np.ones((n, 5))
    masks[2, [0, 3]] = 0.0
    lr = Learner(n, masks, hp, seed=0)
    batch = {
        "s": rng.standard_normal((B, n, 9)), "a": np.tanh(rng.standard_normal((B, n, 5))),
        "r": rng.standard_normal(B), "s2": rng.standard_normal((B, n, 9)),
        "e": rng.standard_normal((B, n, 5)), "d": np.array([0.0, 1.0, 0.0, 0.0, 0.0]),
    }
    errs = {}

    _, g, _ = lr.q_loss(batch)
    errs["L_Q"] = _fd_check(lambda: lr.q_loss(batch)[0], lr.critics.q.params, g, rng)

    def v_loss():
        lr.rng = np.random.default_rng(9)
        return lr.v_loss(batch)

    _, g, _ = v_loss()
    errs["L_V"] = _fd_check(lambda: v_loss()[0], lr.critics.v.params, g, rng)

    z = rng.standard_normal((n, B, 5))
    lam = np.array([0.5, 1.0, 2.0])
    _, g, extra = lr.actor_loss(batch, lam=lam, noise=z)
    fixed = extra["actions"]
    errs["L_pi"] = _fd_check(lambda: lr.actor_loss(batch, lam=lam, noise=z, others=fixed)[0],
                             lr.policy.params, g, rng)

    critic = lr.critics.q
    x = rng.standard_normal((2 * n, n, B, 14))
    errs["critic_input"] = ad.grad_check(lambda tp, X: ad.sum_(ad.tanh(critic.forward(critic.bind(tp, False), X))), x)
    tp = ad.Tape()
    P = critic.bind(tp, True)
    out = ad.sum_(ad.tanh(critic.forward(P, tp.const(x))))
    g = critic.grads(P, ad.backward(tp, out))

    def crit():
        t = ad.Tape()
        return ad.sum_(ad.tanh(critic.forward(critic.bind(t, False), t.const(x)))).item()

    errs["critic_params"] = _fd_check(crit, critic.params, g, rng)
    dt = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-4 and dt < 60.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    report(3, ok, f"max rel err {worst:.1e} (< 1e-4) [{detail}], runtime {dt:.1f}s (< 60s)")
    assert ok


# 4 ---------------------------------------------------------------------------


def test_c4_power_flow(report, six_bus, ieee141):
    rng = np.random.default_rng(4)
    worst = 0.0
    for sc, amp in ((six_bus, 0.4), (ieee141, 0.05)):
        net = sc.network
        for _ in range(10):
            p = -rng.uniform(0, amp, net.n_bus)
            q = 0.3 * p
            sol = ac_power_flow(net, p, q)
            dp, dq = injection_residual(net, sol.v, sol.theta, sol.p, sol.q)
            worst = max(worst, float(np.max(np.abs(np.concatenate([dp, dq])))))
    dv = 0.0
    net = two_bus()
    for p, q in ((-0.5, -0.2), (0.3, 0.1), (-1.0, 0.3)):
        sol = ac_power_flow(net, np.array([0.0, p]), np.array([0.0, q]))
        th, v = scalar_newton(p, q, 0.02, 0.04)
        dv = max(dv, abs(sol.v[1] - v), abs(sol.theta[1] - th))
    ok = worst <= 1e-8 and dv <= 1e-6
    report(4, ok, f"residual inf-norm {worst:.1e} (<= 1e-8), 2-bus oracle diff {dv:.1e} (<= 1e-6)")
    assert ok


# 5 ---------------------------------------------------------------------------


def test_c5_expert_optimality(report, expert_library):
    spec, data = cdg_only_instance()
    sched = solve_convex(integrate_trading(template_model(spec, 4), allow_p2p=False), data)
    gap = abs(sched.objective_value - brute_force(spec, data))
    kkt = [sched.kkt["max"]] + [s.kkt["max"] for s in expert_library.day(0).values()]
    ok = gap <= 1e-3 and max(kkt) <= 1e-5
    report(5, ok, f"|objective - grid search| {gap:.1e} (<= 1e-3), max KKT residual {max(kkt):.1e} (<= 1e-5)")
    assert ok


# 6 ---------------------------------------------------------------------------


def test_c6_workflow_metrics(report, ieee141, six_bus):
    tags = {p.scenario_tag for p in ieee141.prosumers}
    trials, refs = run_trials(ieee141, day=0, horizon=24)
    m = workflow_metrics(trials, refs)
    data, prices = six_bus.day(0)
    spec = six_bus.prosumers[0]
    d = window_data(spec, data, prices, 0, 8)
    base = integrate_trading(template_model(spec, 8), prices)
    iters = []
    for kind in ("undeclared", "nonconvex", "contradictory", "unbounded", "infeasible", "extra_undeclared"):
        _, rep = validate_and_correct(_defect(base, kind), d)
        iters.append(rep.iterations if rep.passed else math.inf)
    ok = (len(tags) == 5 and m["pass_rate"] == 100.0 and m["mean_corrections"] == 0.0
          and max(iters) <= MAX_CORRECTIONS)
    report(6, ok, f"{len(tags)} archetypes, pass rate {m['pass_rate']:.0f}%, mean corrections "
                  f"{m['mean_corrections']:.1f}, accuracy {m['accuracy']:.4f}%, defect repairs took "
                  f"{iters} iterations (<= {MAX_CORRECTIONS})")
    assert ok


# 7 ---------------------------------------------------------------------------


def test_c7_per_ratio(report):
    rng = np.random.default_rng(7)
    rep = DualReplay(1000, 3)
    z = np.zeros((3, 9))
    for i in range(1000):
        viol = rng.random() < 0.3
        per_push(rep, Transition(z, np.zeros((3, 5)), 0.0, z, np.zeros((3, 5)), False, viol), rng.exponential())
    k, B = 0.8, 128
    draws, normal = 0, 0
    while draws < 10_000:
        b = per_sample(rep, B, k, rng)
        draws += len(b["buf"])
        normal += int(np.sum(b["buf"] == 0))
    frac = normal / draws
    ok = 0.78 <= frac <= 0.82
    report(7, ok, f"normal-buffer fraction {frac:.4f} over {draws} draws (in [0.78, 0.82])")
    assert ok


# 8 ---------------------------------------------------------------------------


def test_c8_zero_sum_market(report):
    rng = np.random.default_rng(8)
    worst_q, worst_pay = 0.0, 0.0
    for _ in range(1000):
        # positions are in p.u., so draws span three decades of per-unit magnitude
        x = rng.normal(0, 1, int(rng.integers(2, 25))) * rng.choice([0.01, 0.1, 1.0])
        price = rng.uniform(5, 30)
        tr = clear_p2p(x, price)
        worst_q = max(worst_q, abs(math.fsum(tr)))
        worst_pay = max(worst_pay, abs(math.fsum(price * tr)))
    ok = worst_q < 1e-12 and worst_pay < 1e-12
    report(8, ok, f"max |sum trades| {worst_q:.1e}, max |sum payments| {worst_pay:.1e} (< 1e-12)")
    assert ok


# 9 ---------------------------------------------------------------------------

SEEDS = (0, 1, 2, 3, 4)


@pytest.mark.slow
def test_c9_scaled_training(report, six_bus, expert_library):
    t0 = time.perf_counter()
    hp = load_config(DESK_CONFIG)
    test_day = six_bus.split("test")[0]
    for d in range(six_bus.n_days):
        expert_library.day(d)
    expert_test = expert_library.day(test_day)
    w2_curves, full, abl = [], [], []
    for seed in SEEDS:
        run = train(six_bus, hp, seed=seed, library=expert_library)
        ev = [r for r in run.records if r["type"] == "eval"]
        w2_curves.append({r["episode"]: r["w2_mean"] for r in ev})
        full.append(evaluate_policy(run.learner, six_bus, test_day, expert_test))
        base = train(six_bus, load_config(DESK_CONFIG, {"imitation": False}), seed=seed, library=expert_library)
        abl.append(evaluate_policy(base.learner, six_bus, test_day, expert_test))
    elapsed = time.perf_counter() - t0

    first = np.mean([c[9] for c in w2_curves])
    last = np.mean([c[hp.episodes - 1] for c in w2_curves])
    drop = 1.0 - last / first
    cost = float(np.mean([r["mean_cost"] for r in full]))
    expert_cost = full[0]["expert_cost"]
    cost_dev = abs(cost - expert_cost) / abs(expert_cost)
    wins = sum(f["violation_rate"] <= a["violation_rate"] for f, a in zip(full, abl))
    ok_a, ok_b, ok_c, ok_t = drop >= 0.5, cost_dev <= 0.15, wins >= 4, elapsed < 1800
    ok = ok_a and ok_b and ok_c and ok_t
    report(9, ok,
           f"(a) validation W2 {first:.3f} -> {last:.3f}, drop {100 * drop:.1f}% (>= 50%) "
           f"[{'ok' if ok_a else 'fail'}]; (b) test-day cost {cost:.2f} vs expert {expert_cost:.2f}, "
           f"{100 * cost_dev:.2f}% (<= 15%) [{'ok' if ok_b else 'fail'}]; (c) violation rate full "
           f"{[round(f['violation_rate'], 6) for f in full]} vs lambda=0 "
           f"{[round(a['violation_rate'], 6) for a in abl]}, {wins}/5 seeds (>= 4) "
           f"[{'ok' if ok_c else 'fail'}]; wall time {elapsed:.0f}s (< 1800s)")
    assert ok


# 10 --------------------------------------------------------------------------


def _pipeline(root: Path) -> dict[str, bytes]:
    scen = root / "scenario"
    assert main(["gen-fixture", "six_bus", "--out", str(scen), "--seed", "3"]) == 0
    assert main(["expert", "verify", "--scenario", str(scen), "--out", str(scen / "expert")]) == 0
    cfg = root / "short.toml"
    cfg.write_text(DESK_CONFIG.read_text().replace("episodes = 200", "episodes = 12")
                   .replace("eval_every = 10", "eval_every = 4"))
    assert main(["train", "--scenario", str(scen), "--config", str(cfg), "--seed", "11",
                 "--out", str(root / "run")]) == 0
    assert main(["eval", "--scenario", str(scen), "--checkpoint", str(root / "run" / "checkpoint.bin"),
                 "--out", str(root / "eval.json")]) == 0
    return {
        "metrics.jsonl": (root / "run" / "metrics.jsonl").read_bytes(),
        "checkpoint.bin": (root / "run" / "checkpoint.bin").read_bytes(),
        "eval.json": (root / "eval.json").read_bytes(),
    }


def test_c10_determinism(report, tmp_path, capsys):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    same = {k: a[k] == b[k] for k in a}
    header = json.loads(a["metrics.jsonl"].splitlines()[0])
    ok = all(same.values()) and len(a["metrics.jsonl"].splitlines()) > 1
    report(10, ok, f"byte-identical artifacts {same}; header seed {header['seed']}, "
                   f"config hash {header['config_hash']}")
    assert ok
