"""The progress model and the reward it provides.

g(s_a, s_b) regresses sgn(dt) log(1 + |dt|). Along expert trajectories the
lagged reward g(s_{t-k}, s_t) is large; for a random walker it is near zero.
"""
import numpy as np

from progrl import demos, progress
from progrl import minirogue as mr

ds = demos.generate_dataset(mr.DungeonConfig(), ["depth2", "score", "scout"], episodes_per_task=30, seed=0)
config = progress.ProgressConfig(steps=2000, log_interval=500, lr=1e-3)
params, rows = progress.train_progress(ds, config, seed=0)
for r in rows:
    print(f"step {r['step']:5d}  held-out mse {r['heldout_mse']:.3f}  (mean predictor {r['target_var']:.3f})")

spec = progress.ProgressSpec()
_, held = ds.split(config.heldout_fraction, 0)
means = progress.octave_means(spec, params, held, seed=1)
print("\nmean prediction by offset octave:", np.round(means, 2).tolist())
print("targets at octave starts:      ", np.round(progress.progress_target(2 ** np.arange(6)), 2).tolist())

k = 8
cfg = mr.DungeonConfig()
task = mr.TaskSpec.parse("depth2")
rng = np.random.default_rng(0)
for label, policy in (("expert", demos.expert_action), ("random", demos.random_policy(rng))):
    rewards = []
    for seed in range(1000, 1010):
        ep = demos.run_policy(cfg, task, policy, seed)
        if ep.length > k:
            r = progress.batch_progress_reward(spec, params, ep.tiles[:-k], ep.status[:-k], ep.tiles[k:], ep.status[k:])
            rewards.append(r.mean())
    print(f"{label:>6}: mean g(s_t-{k}, s_t) = {np.mean(rewards):.2f}")
