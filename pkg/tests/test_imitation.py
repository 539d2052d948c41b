import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from p2plab import autodiff as ad
from p2plab.errors import ConfigError, NumericalError
from p2plab.imitation import (
    DESK_CONFIG,
    DualReplay,
    HyperParams,
    Learner,
    ObsNormalizer,
    SumTree,
    Transition,
    epsilon_at,
    lambda_update,
    load_config,
    per_push,
    per_sample,
    priority_of,
    regression_loss,
    split_counts,
    td_target,
    train,
    w2_gaussian_dirac,
)


def quantile_w2(mu, sigma, a, n=100_000):
    q = (np.arange(n) + 0.5) / n
    return math.sqrt(np.mean((mu + sigma * norm.ppf(q) - a) ** 2))


# ---------------------------------------------------------------- W2


def test_w2_examples():
    assert w2_gaussian_dirac([3.0], [4.0], [0.0]) == pytest.approx(5.0)
    assert w2_gaussian_dirac([0.7, -1.0], [1e-12, 1e-12], [0.7, -1.0]) == pytest.approx(0.0, abs=1e-10)
    with pytest.raises(ValueError):
        w2_gaussian_dirac([0.0, 1.0], [1.0], [0.0, 1.0])
    # masked components are ignored
    assert w2_gaussian_dirac([3.0, 9.0], [4.0, 9.0], [0.0, 0.0], mask=[1, 0]) == pytest.approx(5.0)


def test_w2_matches_quantile_integral(rng):
    for _ in range(20):
        mu, a = rng.normal(0, 2, 2)
        sigma = rng.uniform(0.01, 3)
        assert abs(w2_gaussian_dirac([mu], [sigma], [a]) - quantile_w2(mu, sigma, a)) < 1e-3


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=5, max_size=5), st.lists(st.floats(0.01, 2), min_size=5, max_size=5))
def test_w2_is_at_least_mean_distance(mu, sigma):
    mu, sigma = np.array(mu), np.array(sigma)
    w = w2_gaussian_dirac(mu, sigma, np.zeros(5))
    assert w >= np.linalg.norm(mu) - 1e-12
    assert w >= np.linalg.norm(sigma) - 1e-12


# ---------------------------------------------------------------- losses


def tiny_learner(n=2, seed=0, **kw):
    hp = HyperParams(hidden=8, critic_d_model=8, critic_heads=2, critic_d_k=2, **kw)
    masks = np.ones((n, 5))
    masks[1, 3] = 0.0
    return Learner(n, masks, hp, seed)


def batch_of(rng, n=2, B=6):
    return {
        "s": rng.standard_normal((B, n, 9)),
        "a": np.tanh(rng.standard_normal((B, n, 5))),
        "r": rng.standard_normal(B),
        "s2": rng.standard_normal((B, n, 9)),
        "e": rng.standard_normal((B, n, 5)),
        "d": (rng.random(B) < 0.3).astype(float),
    }


def test_td_target_examples():
    assert td_target(1.0, 0.0, 2.0, 0.99) == pytest.approx(2.98)
    assert td_target(1.0, 1.0, 2.0, 0.99) == 1.0
    assert td_target(1.5, 0.0, 7.0, 0.0) == 1.5
    tp = ad.Tape()
    q = tp.param(np.array([[3.0]]))
    assert regression_loss(q, td_target(1.0, 0.0, 2.0, 0.99)).item() == pytest.approx(2e-4)
    assert regression_loss(q, 3.0).item() == 0.0


def test_q_loss_gamma_zero_targets_reward(rng):
    lr = tiny_learner()
    b = batch_of(rng)
    _, grads, extra = lr.q_loss(b, gamma=0.0)
    assert np.allclose(extra["y"], b["r"][None, :])
    assert set(grads) == set(lr.critics.q.params)


def test_stop_gradient_contracts(rng):
    lr = tiny_learner()
    b = batch_of(rng)
    _, gq, _ = lr.q_loss(b)
    _, gv, _ = lr.v_loss(b)
    _, gp, _ = lr.actor_loss(b)
    assert set(gq) == set(lr.critics.q.params)
    assert set(gv) == set(lr.critics.v.params)
    assert set(gp) == set(lr.policy.params)
    assert any(np.any(g != 0) for g in gv.values())
    assert any(np.any(g != 0) for g in gp.values())
    lam = lr.lam.copy()
    lr.opt_pi.step(gp)
    assert np.array_equal(lam, lr.lam)


def test_v_loss_nonnegative_and_zero_at_target(rng, monkeypatch):
    lr = tiny_learner()
    b = batch_of(rng)
    loss, _, extra = lr.v_loss(b)
    assert loss >= 0
    tp = ad.Tape()
    v = tp.param(extra["target"])
    assert regression_loss(v, extra["target"]).item() == 0.0


def test_actor_loss_gradient_check(rng):
    lr = tiny_learner()
    b = batch_of(rng, B=4)
    z = rng.standard_normal((2, 4, 5))
    _, grads, extra = lr.actor_loss(b, noise=z)
    # other agents' actions are constants of the loss; hold them fixed while differencing
    fixed = extra["actions"]
    for name in ("mu.b", "ls.W", "trunk.W0"):
        p = lr.policy.params[name]
        num = np.zeros_like(p)
        flat, gflat = p.reshape(-1), num.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + 1e-5
            fp = lr.actor_loss(b, noise=z, others=fixed)[0]
            flat[k] = orig - 1e-5
            fm = lr.actor_loss(b, noise=z, others=fixed)[0]
            flat[k] = orig
            gflat[k] = (fp - fm) / 2e-5
        assert ad.relative_error(grads[name], num) < 1e-4, name


def test_actor_loss_reduces_to_min_q_when_lambda_zero(rng):
    lr = tiny_learner()
    b = batch_of(rng)
    z = rng.standard_normal((2, 6, 5))
    loss, _, extra = lr.actor_loss(b, lam=np.zeros(2), noise=z)
    assert loss == pytest.approx(-extra["qmin"].sum(axis=0).mean())
    with_lam, _, extra2 = lr.actor_loss(b, lam=np.ones(2), epsilon=0.05, noise=z)
    assert with_lam == pytest.approx(loss + np.sum(extra2["w2"] - 0.05))


def test_lambda_update_examples():
    assert np.array_equal(lambda_update([0.3], [0.05], 0.05, 0.1), [0.3])
    assert lambda_update([0.3], [0.5], 0.05, 0.1)[0] > 0.3
    assert lambda_update([0.0], [0.01], 0.05, 0.1)[0] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=1, max_size=20))
def test_lambda_never_negative_and_monotone_above_eps(w2s):
    lam = np.array([0.02])
    for w in w2s:
        new = lambda_update(lam, [w], 0.05, 0.1)
        assert new[0] >= 0
        if w > 0.05:
            assert new[0] > lam[0]
        lam = new


# ---------------------------------------------------------------- replay


def tr(n=2, viol=False, r=0.0):
    z = np.zeros((n, 9))
    return Transition(z, np.zeros((n, 5)), r, z, np.zeros((n, 5)), False, viol)


def test_routing_and_ring_eviction():
    rep = DualReplay(4, 2)
    per_push(rep, tr(viol=True), 1.0)
    assert len(rep.violation) == 1 and len(rep.normal) == 0
    for k in range(6):
        per_push(rep, tr(r=float(k)), 1.0)
    assert len(rep.normal) == 4
    # oldest two entries (rewards 0, 1) overwritten by 4, 5
    assert sorted(rep.normal.r.tolist()) == [2.0, 3.0, 4.0, 5.0]


def test_priority_formula_and_monotonicity(rng):
    assert priority_of(0.0, 0.6) == pytest.approx(1e-6**0.6)
    rep = DualReplay(2, 2)
    per_push(rep, tr(), 1.0)
    per_push(rep, tr(), 0.0)
    idx = per_sample(rep, 1000, 1.0, rng)["idx"]
    assert np.mean(idx == 0) > np.mean(idx == 1)


def test_split_counts():
    assert split_counts(128, 0.8, 10, 10) == (103, 25)
    assert split_counts(128, 1.0, 10, 10) == (128, 0)
    assert split_counts(128, 0.8, 10, 0) == (128, 0)
    assert split_counts(128, 0.8, 0, 10) == (0, 128)
    with pytest.raises(ValueError):
        split_counts(128, 0.8, 0, 0)


def test_uniform_priorities_give_uniform_frequencies(rng):
    rep = DualReplay(50, 1)
    for _ in range(50):
        per_push(rep, tr(n=1), 1.0)
    counts = np.bincount(np.concatenate([per_sample(rep, 100, 1.0, rng)["idx"] for _ in range(200)]), minlength=50)
    p = 1 / 50
    N = counts.sum()
    assert np.all(np.abs(counts - N * p) <= 3 * math.sqrt(N * p * (1 - p)))


def test_sum_tree_total_and_find():
    t = SumTree(5)
    t.update([0, 1, 2, 3, 4], [1.0, 2.0, 3.0, 4.0, 0.0])
    assert t.total == 10.0
    assert t.find(np.array([0.5, 1.5, 3.5, 9.9])).tolist() == [0, 1, 2, 3]


# ---------------------------------------------------------------- schedule and config


def test_epsilon_schedule():
    hp = HyperParams(episodes=100)
    assert epsilon_at(hp, 0) == epsilon_at(hp, 39) == 0.05
    assert epsilon_at(hp, 99) == pytest.approx(0.15)
    vals = [epsilon_at(hp, e) for e in range(100)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_config_loading(tmp_path):
    hp = load_config(DESK_CONFIG)
    assert hp.episodes == 200 and hp.critic_heads == 4 and hp.k == 0.8
    bad = tmp_path / "bad.toml"
    bad.write_text("unknown_key = 3\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        HyperParams(gamma=1.0)
    with pytest.raises(ConfigError):
        HyperParams(epsilon=0.0)
    assert load_config(DESK_CONFIG, {"episodes": 3}).episodes == 3
    assert load_config(DESK_CONFIG).config_hash() == load_config(DESK_CONFIG).config_hash()


def test_observation_normaliser(six_bus):
    norm = ObsNormalizer.for_scenario(six_bus)
    data, prices = six_bus.day(0)
    from p2plab.market.env import MarketEnv

    env = MarketEnv(six_bus.network, six_bus.prosumers, data, prices)
    o = norm(np.stack(env.reset(0)))
    assert o.shape == (3, 9) and np.all(np.abs(o) <= 3.0)


# ---------------------------------------------------------------- training


SMALL = dict(episodes=10, eval_every=5, warmup_steps=32, update_every=8, batch=16, hidden=16,
             critic_d_model=16, critic_heads=2, critic_d_k=4, lr=1e-3, lambda_lr=0.05)


def test_training_is_deterministic(six_bus, expert_library, tmp_path):
    hp = HyperParams(**SMALL)
    r1 = train(six_bus, hp, seed=7, out_dir=tmp_path / "a", library=expert_library)
    r2 = train(six_bus, hp, seed=7, out_dir=tmp_path / "b", library=expert_library)
    b1, b2 = r1.metrics_path.read_bytes(), r2.metrics_path.read_bytes()
    assert b1 == b2
    header = json.loads(b1.splitlines()[0])
    assert header["seed"] == 7 and header["config_hash"] == hp.config_hash() and "version" in header
    assert any(json.loads(line)["type"] == "eval" for line in b1.splitlines())
    assert r1.checkpoint.read_bytes() == r2.checkpoint.read_bytes()


def test_validation_day_distinct_from_training(six_bus):
    assert six_bus.split("validation")[0] not in six_bus.split("train")


def test_nan_loss_aborts_with_diagnostic(six_bus, expert_library, tmp_path, monkeypatch):
    def bad_q(self, batch, gamma=None):
        return float("nan"), {}, {}

    monkeypatch.setattr(Learner, "q_loss", bad_q)
    with pytest.raises(NumericalError):
        train(six_bus, HyperParams(**SMALL), seed=0, out_dir=tmp_path, library=expert_library)
    dump = json.loads((tmp_path / "diagnostic.json").read_text())
    assert "non-finite" in dump["error"]


def test_checkpoint_round_trip(six_bus, expert_library, tmp_path):
    from p2plab.imitation import load_learner

    res = train(six_bus, HyperParams(**dict(SMALL, episodes=2)), seed=1, out_dir=tmp_path, library=expert_library)
    back = load_learner(res.checkpoint, six_bus)
    for k, v in res.learner.policy.params.items():
        assert np.array_equal(back.policy.params[k], v)
    assert np.array_equal(back.lam, res.learner.lam)
