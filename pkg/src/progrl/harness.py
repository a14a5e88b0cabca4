"""Experiment plans: demos -> encoder -> progress model -> online runs -> summary -> plots.

A plan is a YAML document::

    output_dir: out/depth2          # required
    tasks: [depth2]                 # required, subset of score/scout/depth2/depth4/oracle
    arms: [base, ele, pretrain_ele] # required, see agent.ARMS
    seeds: [0, 1, 2, 3, 4]          # default 0..4
    budget: 300000                  # env steps per run
    workers: 1                      # parallel run processes
    dungeon: {width: 12, ...}       # DungeonConfig fields
    demos: {episodes_per_task: 100, tasks: [...], seed: 0, path: optional existing file}
    pretrain: {...}                 # PretrainConfig fields
    progress: {...}                 # ProgressConfig fields
    agent: {...}                    # AgentConfig fields other than task/arm/budget/dungeon
    thresholds: {score: 60.0}       # optional per-task steps-to-threshold overrides

Checkpoints are trained once per plan (with the first plan seed) and shared
by every arm that needs them.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import agent, demos
from . import diffcore as dc
from . import minirogue as mr
from . import pretrain, progress

log = logging.getLogger(__name__)

ALL_TASKS = ("score", "scout", "depth2", "depth4", "oracle")
SPARSE_THRESHOLD = 0.9
DENSE_EXPERT_FRACTION = 0.5
SUMMARY_COLUMNS = ["task", "arm", "seed", "status", "final_return", "auc", "steps_to_threshold", "threshold"]
AGGREGATE_COLUMNS = ["task", "arm", "n", "failures", "final_return_mean", "final_return_std",
                     "auc_mean", "auc_std", "steps_to_threshold_median", "threshold"]


class PlanError(ValueError):
    """The plan file does not match the schema."""


@dataclass
class ExperimentPlan:
    output_dir: str
    tasks: list[str]
    arms: list[str]
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    budget: int = 300_000
    workers: int = 1
    dungeon: dict = field(default_factory=dict)
    demos: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    progress: dict = field(default_factory=dict)
    agent: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    plan_hash: str = ""

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def needs_encoder(self) -> bool:
        return any(agent.ARM_TABLE[a][0] == "encoder" for a in self.arms)

    def needs_progress(self) -> bool:
        return any(agent.ARM_TABLE[a][0] == "progress" or agent.ARM_TABLE[a][2] for a in self.arms)

    def dungeon_config(self) -> mr.DungeonConfig:
        return mr.DungeonConfig(**self.dungeon)

    def agent_config(self, task: str, arm: str) -> agent.AgentConfig:
        return agent.AgentConfig(task=task, arm=arm, budget=self.budget,
                                 dungeon=self.dungeon_config(), **self.agent)

    def run_name(self, task: str, arm: str, seed: int) -> str:
        return f"{task}__{arm}__s{seed}"


def _fields(cls, exclude=()) -> set[str]:
    return {f.name for f in dataclasses.fields(cls) if f.init} - set(exclude)


_SECTIONS = {
    "dungeon": _fields(mr.DungeonConfig, ("seed",)),
    "demos": {"episodes_per_task", "tasks", "seed", "path"},
    "pretrain": _fields(pretrain.PretrainConfig),
    "progress": _fields(progress.ProgressConfig),
    "agent": _fields(agent.AgentConfig, ("task", "arm", "budget", "dungeon")),
    "thresholds": set(ALL_TASKS),
}


def parse_plan(text: str, base_dir: str | Path = ".") -> ExperimentPlan:
    """Parse and validate a plan document; raises PlanError with the offending key."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise PlanError(f"plan is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise PlanError("plan must be a mapping")
    known = _fields(ExperimentPlan, ("plan_hash",))
    unknown = set(raw) - known
    if unknown:
        raise PlanError(f"unknown plan keys: {sorted(unknown)}")
    for key in ("output_dir", "tasks", "arms"):
        if key not in raw:
            raise PlanError(f"missing required key {key!r}")
    for key in ("tasks", "arms", "seeds"):
        if key in raw and (not isinstance(raw[key], list) or not raw[key]):
            raise PlanError(f"{key!r} must be a non-empty list")
    bad = [t for t in raw["tasks"] if t not in ALL_TASKS]
    if bad:
        raise PlanError(f"unknown tasks {bad}; choose from {ALL_TASKS}")
    bad = [a for a in raw["arms"] if a not in agent.ARMS]
    if bad:
        raise PlanError(f"unknown arms {bad}; choose from {agent.ARMS}")
    if len(set(raw["tasks"])) != len(raw["tasks"]) or len(set(raw["arms"])) != len(raw["arms"]):
        raise PlanError("tasks and arms must not repeat")
    seeds = raw.get("seeds", [0, 1, 2, 3, 4])
    if not all(isinstance(s, int) and s >= 0 for s in seeds) or len(set(seeds)) != len(seeds):
        raise PlanError("seeds must be distinct non-negative integers")
    for key in ("budget", "workers"):
        if key in raw and (not isinstance(raw[key], int) or raw[key] < 1):
            raise PlanError(f"{key!r} must be a positive integer")
    for section, allowed in _SECTIONS.items():
        value = raw.get(section, {})
        if not isinstance(value, dict):
            raise PlanError(f"{section!r} must be a mapping")
        extra = set(value) - allowed
        if extra:
            raise PlanError(f"unknown keys in {section!r}: {sorted(extra)}")
    out = Path(raw["output_dir"])
    if not out.is_absolute():
        raw["output_dir"] = str(Path(base_dir) / out)
    plan = ExperimentPlan(**raw, plan_hash=hashlib.sha256(text.encode()).hexdigest())
    try:
        plan.dungeon_config()
        for task in plan.tasks:
            for arm in plan.arms:
                plan.agent_config(task, arm)
        pretrain.PretrainConfig(**plan.pretrain)
        progress.ProgressConfig(**plan.progress)
    except (TypeError, ValueError) as exc:
        raise PlanError(f"invalid configuration value: {exc}") from exc
    return plan


def load_plan(path: str | Path) -> ExperimentPlan:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise PlanError(f"cannot read plan file: {exc}") from exc
    return parse_plan(text, path.parent)


# --- pipeline phases ----------------------------------------------------------

def _demo_tasks(plan: ExperimentPlan) -> list[str]:
    return list(plan.demos.get("tasks", ALL_TASKS))


def ensure_demos(plan: ExperimentPlan) -> demos.DemoDataset:
    if "path" in plan.demos:
        return demos.read_dataset(plan.demos["path"])
    path = plan.out / "demos.prgl"
    if path.exists():
        return demos.read_dataset(path)
    ds = demos.generate_dataset(plan.dungeon_config(), _demo_tasks(plan),
                                int(plan.demos.get("episodes_per_task", 100)),
                                int(plan.demos.get("seed", 0)))
    demos.write_dataset(ds, path)
    return ds


def ensure_checkpoints(plan: ExperimentPlan, dataset: demos.DemoDataset) -> dict[str, Path]:
    """Train (or reuse) the shared encoder/progress checkpoints the arms need."""
    ck = plan.out / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    seed = plan.seeds[0]
    paths = {}
    if plan.needs_encoder():
        paths["encoder"] = ck / "encoder.ckpt"
        if not paths["encoder"].exists():
            log.info("training encoder")
            pretrain.train_encoder(dataset, pretrain.PretrainConfig(**plan.pretrain), seed,
                                   checkpoint=str(paths["encoder"]), metrics=str(ck / "encoder_log.csv"))
    if plan.needs_progress():
        paths["progress"] = ck / "progress.ckpt"
        if not paths["progress"].exists():
            log.info("training progress model")
            progress.train_progress(dataset, progress.ProgressConfig(**plan.progress), seed,
                                    checkpoint=str(paths["progress"]), metrics=str(ck / "progress_log.csv"))
    return paths


def _run_one(args) -> tuple[str, str]:
    plan, task, arm, seed, ckpts = args
    name = plan.run_name(task, arm, seed)
    csv_path = plan.out / "runs" / f"{name}.csv"
    meta_path = plan.out / "runs" / f"{name}.json"
    meta = {"task": task, "arm": arm, "seed": seed, "plan_sha256": plan.plan_hash}
    try:
        config = plan.agent_config(task, arm)
        enc = dc.load_checkpoint(ckpts["encoder"])[0] if config.torso_source == "encoder" else None
        prog = (dc.load_checkpoint(ckpts["progress"])[0]
                if config.shaping or config.torso_source == "progress" else None)
        agent.train_online(config, seed, encoder=enc, progress=prog, metrics=str(csv_path))
        meta["status"] = "ok"
    except Exception as exc:  # a failed run is recorded, the plan goes on
        log.exception("run %s failed", name)
        meta["status"] = "failed"
        meta["error"] = f"{type(exc).__name__}: {exc}"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return name, meta["status"]


def expert_returns(dataset: demos.DemoDataset) -> dict[str, float]:
    """Mean undiscounted expert return per task in the demo set."""
    by_task: dict[str, list[float]] = {}
    for ep in dataset.episodes:
        by_task.setdefault(ep.task.name, []).append(float(np.sum(ep.rewards, dtype=np.float64)))
    return {k: float(np.mean(v)) for k, v in sorted(by_task.items())}


def task_thresholds(plan: ExperimentPlan, expert: dict[str, float]) -> dict[str, float]:
    out = {}
    for task in plan.tasks:
        if task in plan.thresholds:
            out[task] = float(plan.thresholds[task])
        elif mr.TaskSpec.parse(task).sparse:
            out[task] = SPARSE_THRESHOLD
        elif task in expert:
            out[task] = DENSE_EXPERT_FRACTION * expert[task]
        else:
            out[task] = math.inf
    return out


def run_pipeline(plan: ExperimentPlan) -> dict:
    """Execute every phase in order; returns {"failures": [...], "summary": path}."""
    (plan.out / "runs").mkdir(parents=True, exist_ok=True)
    dataset = ensure_demos(plan)
    ckpts = ensure_checkpoints(plan, dataset)
    expert = expert_returns(dataset)
    (plan.out / "plan.json").write_text(json.dumps({
        "plan_sha256": plan.plan_hash, "tasks": plan.tasks, "arms": plan.arms, "seeds": plan.seeds,
        "budget": plan.budget, "thresholds": task_thresholds(plan, expert), "expert_returns": expert,
    }, indent=2, sort_keys=True) + "\n")
    jobs = [(plan, t, a, s, ckpts) for t in plan.tasks for a in plan.arms for s in plan.seeds]
    if plan.workers > 1:
        with ProcessPoolExecutor(plan.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    failures = [name for name, status in results if status != "ok"]
    summary_path = summarize(plan.out)
    return {"failures": failures, "summary": str(summary_path)}


# --- summaries ---------------------------------------------------------------

def auc(env_steps, returns) -> float:
    """Trapezoidal area under the return curve divided by the step span."""
    x = np.asarray(env_steps, dtype=np.float64)
    y = np.asarray(returns, dtype=np.float64)
    if len(x) < 2 or x[-1] <= x[0]:
        return float(y[-1]) if len(y) else math.nan
    area = float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2.0)
    return area / float(x[-1] - x[0])


def steps_to_threshold(env_steps, returns, threshold: float) -> float:
    """First evaluation step whose mean return reaches ``threshold``; inf if none."""
    for x, y in zip(env_steps, returns):
        if y >= threshold:
            return float(x)
    return math.inf


def sample_std(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in columns})


def load_runs(out_dir: str | Path) -> list[dict]:
    """Per-run records (metrics rows plus status) found in ``out_dir/runs``."""
    runs = []
    run_dir = Path(out_dir) / "runs"
    for meta_path in sorted(run_dir.glob("*.json")):
        meta = json.loads(meta_path.read_text())
        csv_path = meta_path.with_suffix(".csv")
        rows = agent.read_metrics(csv_path) if meta["status"] == "ok" and csv_path.exists() else []
        runs.append({**meta, "rows": rows})
    return runs


def summarize(out_dir: str | Path) -> Path:
    """Write ``runs_summary.csv`` (one row per run) and ``summary.csv`` (mean/std per task and arm)."""
    out = Path(out_dir)
    plan_info = json.loads((out / "plan.json").read_text())
    thresholds = plan_info["thresholds"]
    per_run = []
    for run in load_runs(out):
        thr = float(thresholds.get(run["task"], math.inf))
        rows = run["rows"]
        if rows:
            steps = [r["env_steps"] for r in rows]
            rets = [r["eval_mean_return"] for r in rows]
            rec = {"final_return": float(rets[-1]), "auc": auc(steps, rets),
                   "steps_to_threshold": steps_to_threshold(steps, rets, thr)}
        else:
            rec = {"final_return": math.nan, "auc": math.nan, "steps_to_threshold": math.nan}
        per_run.append({"task": run["task"], "arm": run["arm"], "seed": run["seed"],
                        "status": run["status"], "threshold": thr, **rec})
    per_run.sort(key=lambda r: (r["task"], r["arm"], r["seed"]))
    _write_csv(out / "runs_summary.csv", SUMMARY_COLUMNS, per_run)
    agg = []
    for task in plan_info["tasks"]:
        for arm in plan_info["arms"]:
            rs = [r for r in per_run if r["task"] == task and r["arm"] == arm]
            ok = [r for r in rs if r["status"] == "ok"]
            fin = [r["final_return"] for r in ok]
            aucs = [r["auc"] for r in ok]
            stt = [r["steps_to_threshold"] for r in ok]
            agg.append({"task": task, "arm": arm, "n": len(ok), "failures": len(rs) - len(ok),
                        "final_return_mean": float(np.mean(fin)) if ok else math.nan,
                        "final_return_std": sample_std(fin) if ok else math.nan,
                        "auc_mean": float(np.mean(aucs)) if ok else math.nan,
                        "auc_std": sample_std(aucs) if ok else math.nan,
                        "steps_to_threshold_median": float(np.median(stt)) if ok else math.nan,
                        "threshold": float(thresholds.get(task, math.inf))})
    _write_csv(out / "summary.csv", AGGREGATE_COLUMNS, agg)
    return out / "summary.csv"


def read_runs_summary(out_dir: str | Path) -> list[dict]:
    with open(Path(out_dir) / "runs_summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        for k in ("final_return", "auc", "steps_to_threshold", "threshold"):
            r[k] = float(r[k])
    return rows


def compare_arms(runs_summary: list[dict], task: str, metric: str = "auc") -> dict:
    """Seed-paired win counts between every pair of arms on ``task``.

    ``metric`` is "auc" (higher wins) or "steps_to_threshold" (lower wins).
    Returns {"arms": [...], "medians": {arm: value}, "pairs": [...], "excluded": [...]}.
    """
    if metric not in ("auc", "steps_to_threshold", "final_return"):
        raise ValueError(f"unknown metric {metric!r}")
    lower_better = metric == "steps_to_threshold"
    by_arm: dict[str, dict[int, float]] = {}
    present = []
    for r in runs_summary:
        if r["task"] != task:
            continue
        if r["arm"] not in present:
            present.append(r["arm"])
        if r["status"] == "ok" and not math.isnan(r[metric]):
            by_arm.setdefault(r["arm"], {})[r["seed"]] = r[metric]
    excluded = [a for a in present if a not in by_arm]
    for a in excluded:
        log.warning("arm %s has no completed seeds on %s; excluded", a, task)
    arms = [a for a in present if a in by_arm]
    medians = {a: float(np.median(list(by_arm[a].values()))) for a in arms}
    pairs = []
    for i, a in enumerate(arms):
        for b in arms[i + 1:]:
            seeds = sorted(set(by_arm[a]) & set(by_arm[b]))
            wins_a = wins_b = ties = 0
            for s in seeds:
                va, vb = by_arm[a][s], by_arm[b][s]
                if va == vb:
                    ties += 1
                elif (va < vb) == lower_better:
                    wins_a += 1
                else:
                    wins_b += 1
            pairs.append({"a": a, "b": b, "seeds": len(seeds), "wins_a": wins_a,
                          "wins_b": wins_b, "ties": ties})
    order = sorted(arms, key=lambda a: medians[a], reverse=not lower_better)
    return {"task": task, "metric": metric, "arms": order, "medians": medians,
            "pairs": pairs, "excluded": excluded}


def curve_bands(runs: list[dict], task: str, arm: str):
    """(env_steps, mean, std) across seeds; std uses the n-1 denominator."""
    curves = [r["rows"] for r in runs if r["task"] == task and r["arm"] == arm and r["rows"]]
    if not curves:
        return None
    n = min(len(c) for c in curves)
    steps = np.array([curves[0][i]["env_steps"] for i in range(n)], dtype=np.float64)
    vals = np.array([[c[i]["eval_mean_return"] for i in range(n)] for c in curves])
    std = vals.std(axis=0, ddof=1) if len(curves) > 1 else np.zeros(n)
    return steps, vals.mean(axis=0), std


def emit_plots(out_dir: str | Path) -> list[Path]:
    """One SVG line chart per task: mean return per arm with a +-1 std band."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    plan_info = json.loads((out / "plan.json").read_text())
    runs = load_runs(out)
    plot_dir = out / "plots"
    plot_dir.mkdir(exist_ok=True)
    paths = []
    with matplotlib.rc_context({"svg.hashsalt": "progrl", "svg.fonttype": "none"}):
        for task in plan_info["tasks"]:
            fig, ax = plt.subplots(figsize=(6, 4))
            missing = []
            for arm in plan_info["arms"]:
                band = curve_bands(runs, task, arm)
                if band is None:
                    missing.append(arm)
                    continue
                x, m, s = band
                line, = ax.plot(x, m, label=arm)
                ax.fill_between(x, m - s, m + s, alpha=0.2, color=line.get_color(), linewidth=0)
            if missing:
                ax.plot([], [], " ", label="no data: " + ", ".join(missing))
            ax.set_xlabel("env steps")
            ax.set_ylabel("episode return")
            ax.set_title(task)
            ax.legend(loc="best", fontsize=8)
            path = plot_dir / f"{task}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            paths.append(path)
    return paths
