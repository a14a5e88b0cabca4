"""Demonstration datasets and the two offset distributions.

Contrastive positives use a truncated geometric offset, while progress pairs
use a log-uniform one. This script writes a dataset, reads it back, and
draws both kinds of samples.
"""
import tempfile
from pathlib import Path

import numpy as np

from progrl import demos
from progrl import minirogue as mr

ds = demos.generate_dataset(mr.DungeonConfig(), ["depth2", "score"], episodes_per_task=20, seed=0)
print(f"{len(ds)} episodes, {ds.n_states} observations, mean length {ds.ep_len.mean():.1f}")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "demos.prgl"
    demos.write_dataset(ds, path)
    back = demos.read_dataset(path)
    print(f"wrote {path.stat().st_size} bytes; round trip exact: {back.episodes == ds.episodes}")

rng = np.random.default_rng(0)
anchor, positive, _, dt = demos.sample_contrastive_indices(ds, rng, gamma=0.95, batch=8, group=4)
print("\ncontrastive batch (episode, t, offset):")
for a, d in zip(anchor, dt):
    print(f"  ep {ds.flat_episode[a]:2d}  t {ds.flat_t[a]:3d}  +{d}")

a, b, dt = demos.sample_progress_indices(ds, rng, batch=8)
print("\nsigned progress offsets:", dt.tolist())

print("\n dt  geometric(0.95)  log-uniform")
for row in demos.compare_offset_distributions(0.95, 50)[:10]:
    print(f"{row['dt']:3d}  {row['geometric']:15.4f}  {row['log_uniform']:11.4f}")
