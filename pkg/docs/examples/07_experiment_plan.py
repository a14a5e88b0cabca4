"""Running an experiment plan from Python.

The plan below is a scaled-down version of the ones in plans/. It covers all
six arms on Depth-2 with two seeds and a tiny budget, so it finishes in about a minute.
The same file runs from the shell with ``progrl plan run <file>``.
"""
import tempfile
from pathlib import Path

from progrl import harness

PLAN = """
output_dir: out
tasks: [depth2]
arms: [base, pretrain, ele, pretrain_ele, pm_torso_init, pretrain_finetune]
seeds: [0, 1]
budget: 4000
demos: {episodes_per_task: 10, tasks: [depth2, score]}
pretrain: {steps: 200, log_interval: 100}
progress: {steps: 200, log_interval: 100}
agent: {eval_interval: 2000, eval_episodes: 5}
"""

with tempfile.TemporaryDirectory() as tmp:
    (Path(tmp) / "plan.yaml").write_text(PLAN)
    plan = harness.load_plan(Path(tmp) / "plan.yaml")
    result = harness.run_pipeline(plan)
    print("failed runs:", result["failures"] or "none")
    print((plan.out / "summary.csv").read_text())
    cmp = harness.compare_arms(harness.read_runs_summary(plan.out), "depth2", "auc")
    print("arms by median AUC:", cmp["arms"])
    for path in harness.emit_plots(plan.out):
        print("plot:", path.name, path.stat().st_size, "bytes")
