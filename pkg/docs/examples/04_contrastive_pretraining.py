"""Contrastive pre-training of the state encoder.

Anchors come in runs of consecutive steps, so every batch holds hard
negatives: the futures of neighbouring states. Accuracy is the fraction of
anchors whose own future scores highest in the batch; chance is 1/B.
"""
from progrl import demos, pretrain
from progrl import minirogue as mr

ds = demos.generate_dataset(mr.DungeonConfig(), ["depth2", "score", "scout"], episodes_per_task=30, seed=0)
config = pretrain.PretrainConfig(steps=1500, log_interval=500, gamma=0.2, episode_group=32, lr=1e-3)
params, rows = pretrain.train_encoder(ds, config, seed=0)
for r in rows:
    print(f"step {r['step']:5d}  loss {r['train_loss']:.3f}  held-out accuracy {r['heldout_acc']:.3f}")
print(f"chance level {1 / config.batch_size:.3f}")

ep = ds.episodes[0]
spec = pretrain.EncoderSpec()
s = ep.observation(0)
print("\nscore of the first state against later states of its episode:")
for t in (1, 2, 4, 8, 16):
    if t <= ep.length:
        print(f"  +{t:2d}: {pretrain.score(spec, params, s, ep.observation(t)):7.3f}")
