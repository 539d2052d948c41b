"""Command-line entry points: ``p2plab <gen-fixture|expert|train|eval|metrics>``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 1 any other library error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3, 4

log = logging.getLogger("p2plab")


def _stamp(seed, config_hash: str) -> dict:
    from . import __version__

    return {"seed": seed, "config_hash": config_hash, "version": __version__}


def _hash_of(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _scenario(args):
    from .market.scenario import load_scenario

    if not args.scenario:
        from .errors import ConfigError

        raise ConfigError("--scenario is required")
    return load_scenario(args.scenario)


# ---------------------------------------------------------------- commands


def cmd_gen_fixture(args) -> int:
    from .fixtures import build_fixture

    root = build_fixture(args.kind, args.out, seed=args.seed, n_days=args.days, force=args.force)
    meta = json.loads((Path(root) / "meta.json").read_text())
    print(f"{args.kind} fixture written to {root}: {meta['n_days']} days, seed {args.seed}")
    return EXIT_OK


def cmd_expert_solve(args) -> int:
    from .errors import DataError
    from .expert.metrics import schedule_cost
    from .expert.pipeline import run_workflow

    sc = _scenario(args)
    specs = {p.agent_id: p for p in sc.prosumers}
    if args.agent not in specs:
        raise DataError(f"unknown agent {args.agent!r}; known: {sorted(specs)}")
    data, prices = sc.day(args.day)
    run = run_workflow(specs[args.agent], data, prices, horizon=args.horizon)
    payload = {**_stamp(args.seed, _hash_of({"agent": args.agent, "day": args.day, "horizon": args.horizon})),
               "agent": args.agent, "day": args.day, "status": run.status,
               "corrections": run.report.iterations, "ir": run.ir.to_dict() if run.ir else None,
               "schedule": run.schedule.to_dict() if run.schedule else None}
    if run.passed:
        payload["cost"] = schedule_cost(specs[args.agent], run.schedule, data, prices)
    if args.out:
        _write_json(Path(args.out), payload)
    print(f"agent {args.agent} day {args.day}: {run.status}, corrections {run.report.iterations}"
          + (f", cost {payload['cost']:.3f}" if run.passed else ""))
    return EXIT_OK if run.passed else EXIT_NUMERICAL


def cmd_expert_verify(args) -> int:
    from .expert.pipeline import ExpertLibrary

    sc = _scenario(args)
    lib = ExpertLibrary(sc, horizon=args.horizon, cache_dir=args.out or None)
    days = [args.day] if args.day is not None else list(range(sc.n_days))
    summary = {}
    for d in days:
        lib.day(d)
        rep = lib.reports.get(d)
        if rep is not None:
            summary[d] = rep.to_dict()
            print(f"day {d}: violating (bus, t) pairs {rep.violations_before} -> {rep.violations_after}, "
                  f"corrected steps {len(rep.corrected_steps)}")
        else:
            print(f"day {d}: loaded from cache")
    if args.out:
        _write_json(Path(args.out) / "verify.json",
                    {**_stamp(args.seed, _hash_of({"days": days, "horizon": args.horizon})),
                     "days": {str(k): v for k, v in summary.items()}})
    residual = sum(v["violations_after"] for v in summary.values())
    return EXIT_OK if residual == 0 else EXIT_NUMERICAL


def cmd_metrics(args) -> int:
    from .expert.metrics import TRIAL_HORIZON, run_trials, workflow_metrics

    sc = _scenario(args)
    trials, refs = run_trials(sc, day=args.day, n_trials=args.trials, horizon=args.horizon or TRIAL_HORIZON)
    m = workflow_metrics(trials, refs)
    m["tokens"] = 0
    payload = {**_stamp(args.seed, _hash_of({"trials": args.trials, "day": args.day})), "metrics": m}
    if args.out:
        _write_json(Path(args.out), payload)
    print(f"pass rate {m['pass_rate']:.1f}%  deviation {m['deviation']:.4g}%  gap {m['gap']:.4g}%  "
          f"accuracy {m['accuracy']:.4f}%  corrections {m['mean_corrections']:.2f}")
    return EXIT_OK


def _hyperparams(args):
    from .imitation import DESK_CONFIG, load_config

    overrides = {}
    if args.episodes is not None:
        overrides["episodes"] = args.episodes
    if getattr(args, "ablation", False):
        overrides["imitation"] = False
    return load_config(args.config or DESK_CONFIG, overrides)


def cmd_train(args) -> int:
    from .expert.pipeline import ExpertLibrary
    from .imitation import train

    sc = _scenario(args)
    hp = _hyperparams(args)
    out = Path(args.out or "runs/train")
    res = train(sc, hp, seed=args.seed, out_dir=out, library=ExpertLibrary(sc))
    evals = [r for r in res.records if r["type"] == "eval"]
    n_rec = len(res.records) - 1
    print(f"trained {hp.episodes} episodes (seed {args.seed}); {n_rec} records in {res.metrics_path}")
    if evals:
        e = evals[-1]
        print(f"final validation: W2 {e['w2_mean']:.4f}, cost {e['eval_cost']:.2f}, "
              f"violation rate {e['violation_rate']:.3g}")
    print(f"checkpoint: {res.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    import numpy as np

    from .expert.metrics import action_gap, deviation
    from .expert.pipeline import ExpertLibrary, ExpertPolicy
    from .imitation import aggregate, evaluate_policy, load_learner
    from .market.env import MarketEnv, evaluate_rollout

    sc = _scenario(args)
    day = args.day if args.day is not None else sc.split("test")[0]
    expert = ExpertLibrary(sc).day(day)
    runs = []
    if args.expert:
        agents = [p.agent_id for p in sc.prosumers]
        data, prices = sc.day(day)
        env = MarketEnv(sc.network, sc.prosumers, data, prices)
        res = evaluate_rollout(ExpertPolicy(expert, agents), env)
        dev = deviation(res["mean_cost"], res["mean_cost"])
        gap = action_gap(res["actions"], res["actions"])
        runs.append({"mean_cost": res["mean_cost"], "violation_rate": res["violation_rate"],
                     "deviation": dev, "gap": gap, "accuracy": 100.0 - (gap + dev) / 2.0, "w2_mean": 0.0})
        hashes = ["expert"]
    else:
        if not args.checkpoint:
            from .errors import ConfigError

            raise ConfigError("eval needs --checkpoint (repeatable) or --expert")
        hashes = []
        for ck in args.checkpoint:
            learner = load_learner(ck, sc)
            hashes.append(learner.hp.config_hash())
            runs.append(evaluate_policy(learner, sc, day, expert))
    agg = aggregate(runs)
    payload = {**_stamp(args.seed, _hash_of(hashes)), "day": day, "runs": runs, "aggregate": agg}
    if args.out:
        _write_json(Path(args.out), payload)
    for k in ("mean_cost", "violation_rate", "w2_mean", "deviation", "gap", "accuracy"):
        if k in agg:
            print(f"{k:>15}: {agg[k]['mean']:.6g} +- {agg[k]['std']:.3g}")
    return EXIT_OK if np.isfinite(agg["mean_cost"]["mean"]) else EXIT_NUMERICAL


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS/worker threads")
    common.add_argument("--out", default=None)

    scen = argparse.ArgumentParser(add_help=False)
    scen.add_argument("--scenario", required=True)
    scen.add_argument("--day", type=int, default=None)

    p = argparse.ArgumentParser(prog="p2plab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-fixture", parents=[common], help="write a synthetic scenario directory")
    g.add_argument("kind", choices=["six_bus", "ieee141_like"])
    g.add_argument("--days", type=int, default=None)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_fixture)

    ex = sub.add_parser("expert", help="expert workflow")
    exs = ex.add_subparsers(dest="expert_command", required=True)
    s = exs.add_parser("solve", parents=[common, scen], help="build and solve one prosumer's model")
    s.add_argument("--agent", required=True)
    s.add_argument("--horizon", type=int, default=None)
    s.set_defaults(func=cmd_expert_solve)
    v = exs.add_parser("verify", parents=[common, scen], help="closed-loop schedules with DSO verification")
    v.add_argument("--horizon", type=int, default=8)
    v.set_defaults(func=cmd_expert_verify)
    m = exs.add_parser("metrics", parents=[common, scen], help="pass rate, deviation, gap, accuracy")
    m.add_argument("--trials", type=int, default=1)
    m.add_argument("--horizon", type=int, default=None)
    m.set_defaults(func=cmd_metrics)

    mt = sub.add_parser("metrics", parents=[common, scen], help="alias of 'expert metrics'")
    mt.add_argument("--trials", type=int, default=1)
    mt.add_argument("--horizon", type=int, default=None)
    mt.set_defaults(func=cmd_metrics)

    t = sub.add_parser("train", parents=[common, scen], help="train the agents")
    t.add_argument("--config", default=None, help="TOML hyperparameters (default: desk config)")
    t.add_argument("--episodes", type=int, default=None)
    t.add_argument("--ablation", action="store_true", help="lambda = 0 baseline")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common, scen], help="evaluate checkpoints on a test day")
    e.add_argument("--checkpoint", action="append", default=[])
    e.add_argument("--expert", action="store_true", help="evaluate the expert schedules themselves")
    e.set_defaults(func=cmd_eval)
    return p


def _apply_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        from .errors import ConfigError

        raise ConfigError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    from .errors import ConfigError, DataError, NumericalError, P2PLabError

    level = os.environ.get("P2PLAB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        _apply_threads(args.threads)
        if getattr(args, "day", None) is None and args.func in (cmd_expert_solve, cmd_metrics):
            args.day = 0
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except P2PLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
