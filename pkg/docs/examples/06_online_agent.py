"""Online actor-critic with and without progress shaping on Depth-2.

A short run: the shaped arm usually starts descending within 100k steps,
while the unshaped one stays near the random-walk success rate.
Expect a few minutes per arm on one core.
"""
from progrl import agent, demos, progress
from progrl import minirogue as mr

ds = demos.generate_dataset(mr.DungeonConfig(), ["depth2", "score", "scout"], episodes_per_task=50, seed=0)
prog, _ = progress.train_progress(ds, progress.ProgressConfig(steps=5000, log_interval=5000), seed=0)

for arm in ("base", "ele"):
    config = agent.AgentConfig(task="depth2", arm=arm, budget=100_000, eval_interval=20_000)
    _, rows = agent.train_online(config, seed=0, progress=prog)
    curve = "  ".join(f"{r['env_steps'] // 1000}k:{r['eval_mean_return']:.2f}" for r in rows)
    print(f"{arm:>4}  {curve}")
