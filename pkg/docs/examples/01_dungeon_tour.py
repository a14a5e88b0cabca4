"""A tour of the dungeon simulator.

Generates a layout, shows what the agent sees, and lets the scripted expert
play each task once.
"""
import numpy as np

from progrl import demos
from progrl import minirogue as mr

config = mr.DungeonConfig(seed=7)
dungeon = mr.generate(config)
print(f"{config.n_levels} levels of {config.height}x{config.width}; oracle on depth {dungeon.oracle_level}")

# The full first level, then the partial view at the start of an episode.
state, obs = mr.reset(config, mr.TaskSpec.parse("score"))
print("\nlevel 1 (everything revealed):")
print(mr.render_ascii(state, reveal_all=True))
print("\nwhat the agent has seen so far:")
print(mr.render_ascii(state))
print("status vector [depth, score, elapsed]:", obs.status)

# The expert knows the layout and walks shortest paths to its goal.
for name in ("score", "scout", "depth2", "depth4", "oracle"):
    ep = demos.generate_expert_episode(config, mr.TaskSpec.parse(name), seed=7)
    print(f"{name:>7}: {ep.length:3d} steps, return {ep.rewards.sum():6.1f}")

# A random walker rarely finds the stairs on Depth-2.
rng = np.random.default_rng(0)
task = mr.TaskSpec.parse("depth2")
wins = [demos.run_policy(config, task, demos.random_policy(rng), s).rewards.sum() for s in range(200)]
print(f"\nrandom policy solves depth2 in {np.mean(wins):.1%} of 200 layouts")
