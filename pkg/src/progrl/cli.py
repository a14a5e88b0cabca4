"""Command-line entry point: ``progrl <verb> ...``.

Exit codes: 0 success, 1 failed runs or failed checks, 2 invalid input.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys

import numpy as np

from . import agent, checks, demos, harness, oracle, pretrain, progress
from . import diffcore as dc
from . import minirogue as mr


def _dungeon_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("dungeon")
    g.add_argument("--width", type=int, default=12, help="tiles per row (default 12)")
    g.add_argument("--height", type=int, default=12, help="tiles per column (default 12)")
    g.add_argument("--levels", type=int, default=4, help="dungeon depth (default 4)")
    g.add_argument("--items", type=int, default=3, help="items per level (default 3)")
    g.add_argument("--horizon", type=int, default=200, help="max steps per episode (default 200)")


def _dungeon(a) -> mr.DungeonConfig:
    return mr.DungeonConfig(width=a.width, height=a.height, n_levels=a.levels,
                            n_items_per_level=a.items, horizon=a.horizon)


def cmd_gen_demos(a) -> int:
    tasks = a.task or list(harness.ALL_TASKS)
    ds = demos.generate_dataset(_dungeon(a), tasks, a.episodes, a.seed)
    demos.write_dataset(ds, a.out)
    print(f"wrote {len(ds)} episodes ({ds.n_states} observations) to {a.out}")
    return 0


def cmd_pretrain(a) -> int:
    ds = demos.read_dataset(a.demos)
    cfg = pretrain.PretrainConfig(gamma=a.gamma, batch_size=a.batch_size, steps=a.steps, lr=a.lr,
                                  explicit_negatives=a.explicit_negatives,
                                  n_candidates=a.candidates, episode_group=a.episode_group,
                                  log_interval=a.log_interval)
    _, rows = pretrain.train_encoder(ds, cfg, a.seed, checkpoint=a.out, metrics=a.metrics)
    print(f"held-out accuracy {rows[-1]['heldout_acc']:.4f} (chance {1 / cfg.batch_size:.4f})")
    return 0


def cmd_train_progress(a) -> int:
    ds = demos.read_dataset(a.demos)
    cfg = progress.ProgressConfig(steps=a.steps, batch_size=a.batch_size, lr=a.lr,
                                  signed=not a.unsigned, log_interval=a.log_interval)
    _, rows = progress.train_progress(ds, cfg, a.seed, checkpoint=a.out, metrics=a.metrics)
    print(f"held-out mse {rows[-1]['heldout_mse']:.4f} (target variance {rows[-1]['target_var']:.4f})")
    return 0


def cmd_train(a) -> int:
    cfg = agent.AgentConfig(task=a.task, arm=a.arm, budget=a.budget, shaping_lambda=a.lam,
                            shaping_k=a.k, lr=a.lr, rollout_len=a.rollout_len, n_envs=a.envs,
                            gamma=a.gamma, ent_coef=a.ent_coef, value_coef=a.value_coef,
                            normalize_rewards=not a.no_reward_norm, eval_interval=a.eval_interval,
                            eval_episodes=a.eval_episodes, dungeon=_dungeon(a))
    enc = dc.load_checkpoint(a.encoder)[0] if a.encoder else None
    prog = dc.load_checkpoint(a.progress)[0] if a.progress else None
    _, rows = agent.train_online(cfg, a.seed, encoder=enc, progress=prog, metrics=a.metrics)
    print(f"final eval return {rows[-1]['eval_mean_return']:.3f} at {rows[-1]['env_steps']} env steps")
    return 0


def _verify_gradcheck() -> list[tuple[str, bool, str]]:
    return checks.gradient_suite()


def _verify_occupancy() -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(50):
        m = oracle.random_mdp(rng, horizon=None if i % 2 else 25)
        V, _ = oracle.value_direct(m)
        worst = max(worst, float(np.max(np.abs(V - oracle.value_via_occupancy(m)))))
    return [("occupancy identity, 50 random 5-state MDPs", worst <= 1e-6, f"max |dV| {worst:.2e}")]


def _verify_nce() -> list[tuple[str, bool, str]]:
    res = oracle.nce_ratio_check(oracle.chain_mdp())
    return [("contrastive optimum ranks log density ratio", res.mean_correlation >= 0.9,
             f"mean spearman {res.mean_correlation:.3f}")]


SUITES = {"gradcheck": _verify_gradcheck, "occupancy": _verify_occupancy, "nce-ratio": _verify_nce}


def cmd_verify(a) -> int:
    rows = []
    for suite in a.suite:
        rows.extend(SUITES[suite]())
    width = max(len(r[0]) for r in rows)
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name.ljust(width)}  {detail}")
    return 0 if all(ok for _, ok, _ in rows) else 1


def cmd_ablate_offsets(a) -> int:
    rows = demos.compare_offset_distributions(a.gamma, a.n)
    out = open(a.out, "w", newline="") if a.out else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=["dt", "geometric", "log_uniform"], lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(float(v)) if k != "dt" else int(v) for k, v in r.items()})
    finally:
        if a.out:
            out.close()
    return 0


def cmd_plan(a) -> int:
    if a.plan_cmd == "run":
        try:
            plan = harness.load_plan(a.path)
        except harness.PlanError as exc:
            print(f"invalid plan: {exc}", file=sys.stderr)
            return 2
        if a.workers:
            plan.workers = a.workers
        result = harness.run_pipeline(plan)
        harness.emit_plots(plan.out)
        for name in result["failures"]:
            print(f"FAILED {name}", file=sys.stderr)
        print(f"summary written to {result['summary']}")
        return 1 if result["failures"] else 0
    if a.plan_cmd == "summarize":
        path = harness.summarize(a.path)
        rows = harness.read_runs_summary(a.path)
        for task in sorted({r["task"] for r in rows}):
            for metric in ("auc", "steps_to_threshold"):
                cmp = harness.compare_arms(rows, task, metric)
                med = ", ".join(f"{arm}={cmp['medians'][arm]:.4g}" for arm in cmp["arms"])
                print(f"{task} {metric} medians: {med}")
                for p in cmp["pairs"]:
                    print(f"  {p['a']} vs {p['b']}: {p['wins_a']}-{p['wins_b']} ({p['ties']} ties)")
        print(f"summary written to {path}")
        return 1 if any(r["status"] != "ok" for r in rows) else 0
    paths = harness.emit_plots(a.path)
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="progrl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-demos", help="generate an expert demonstration dataset")
    p.add_argument("--task", action="append", choices=harness.ALL_TASKS,
                   help="task to include; repeat for several (default: all)")
    p.add_argument("--episodes", type=int, default=100, help="episodes per task")
    p.add_argument("--seed", type=int, default=0, help="first layout seed")
    p.add_argument("--out", required=True, help="output dataset file")
    _dungeon_args(p)
    p.set_defaults(func=cmd_gen_demos)

    p = sub.add_parser("pretrain", help="contrastive pre-training of the encoder")
    p.add_argument("--demos", required=True, help="dataset file")
    p.add_argument("--out", required=True, help="encoder checkpoint to write")
    p.add_argument("--gamma", type=float, default=0.95, help="positive-offset discount")
    p.add_argument("--steps", type=int, default=20000, help="optimizer steps")
    p.add_argument("--batch-size", type=int, default=64, help="anchors per batch")
    p.add_argument("--lr", type=float, default=3e-4, help="Adam learning rate")
    p.add_argument("--episode-group", type=int, default=8,
                   help="consecutive anchors drawn from one episode")
    p.add_argument("--explicit-negatives", action="store_true",
                   help="score each anchor against its own uniformly drawn negatives")
    p.add_argument("--candidates", type=int, default=64, help="candidates per anchor with explicit negatives")
    p.add_argument("--log-interval", type=int, default=1000, help="steps between metric rows")
    p.add_argument("--seed", type=int, default=0, help="initialisation and sampling seed")
    p.add_argument("--metrics", help="CSV of step, train_loss, train_acc, heldout_acc")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-progress", help="fit the progress model")
    p.add_argument("--demos", required=True, help="dataset file")
    p.add_argument("--out", required=True, help="progress checkpoint to write")
    p.add_argument("--steps", type=int, default=20000, help="optimizer steps")
    p.add_argument("--batch-size", type=int, default=64, help="pairs per batch")
    p.add_argument("--lr", type=float, default=3e-4, help="Adam learning rate")
    p.add_argument("--unsigned", action="store_true", help="keep pairs in temporal order")
    p.add_argument("--log-interval", type=int, default=1000, help="steps between metric rows")
    p.add_argument("--seed", type=int, default=0, help="initialisation and sampling seed")
    p.add_argument("--metrics", help="CSV of step, train_loss, heldout_mse, target_var")
    p.set_defaults(func=cmd_train_progress)

    d = agent.AgentConfig()
    p = sub.add_parser("train", help="online actor-critic run for one task/arm/seed")
    p.add_argument("--task", required=True, choices=harness.ALL_TASKS, help="task to train on")
    p.add_argument("--arm", required=True, choices=agent.ARMS,
                   help="pipeline arm: torso source, freezing and shaping")
    p.add_argument("--encoder", help="encoder checkpoint (pretrain arms)")
    p.add_argument("--progress", help="progress checkpoint (shaping and pm_torso_init arms)")
    p.add_argument("--seed", type=int, default=0, help="run seed")
    p.add_argument("--budget", type=int, default=d.budget, help="total env steps")
    p.add_argument("--lambda", dest="lam", type=float, default=d.shaping_lambda, help="shaping weight")
    p.add_argument("--k", type=int, default=d.shaping_k, help="shaping offset in steps")
    p.add_argument("--lr", type=float, default=d.lr, help="Adam learning rate")
    p.add_argument("--rollout-len", type=int, default=d.rollout_len, help="steps per env per update")
    p.add_argument("--envs", type=int, default=d.n_envs, help="parallel environments")
    p.add_argument("--gamma", type=float, default=d.gamma, help="discount")
    p.add_argument("--ent-coef", type=float, default=d.ent_coef, help="entropy bonus weight")
    p.add_argument("--value-coef", type=float, default=d.value_coef, help="value loss weight")
    p.add_argument("--no-reward-norm", action="store_true", help="disable running-std reward scaling")
    p.add_argument("--eval-interval", type=int, default=d.eval_interval, help="env steps between evaluations")
    p.add_argument("--eval-episodes", type=int, default=d.eval_episodes, help="episodes per evaluation")
    p.add_argument("--metrics", help="CSV with one row per evaluation")
    _dungeon_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="run exact identity checks")
    p.add_argument("--suite", action="append", choices=sorted(SUITES), required=True,
                   help="check suite; repeat for several")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ablate-offsets", help="print geometric vs log-uniform offset pmfs as CSV")
    p.add_argument("--gamma", type=float, default=0.95, help="geometric discount")
    p.add_argument("--n", type=int, default=50, help="largest offset")
    p.add_argument("--out", help="CSV file (default stdout)")
    p.set_defaults(func=cmd_ablate_offsets)

    p = sub.add_parser("plan", help="experiment plans")
    psub = p.add_subparsers(dest="plan_cmd", required=True)
    q = psub.add_parser("run", help="execute a plan file")
    q.add_argument("path", help="YAML plan file")
    q.add_argument("--workers", type=int, help="override the plan's parallel worker count")
    q = psub.add_parser("summarize", help="rebuild summary tables for an output directory")
    q.add_argument("path", help="plan output directory")
    q = psub.add_parser("plot", help="write one SVG chart per task")
    q.add_argument("path", help="plan output directory")
    p.set_defaults(func=cmd_plan)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
