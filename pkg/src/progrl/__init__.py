"""progrl: contrastive pre-training and progress-model reward shaping on a small roguelike.

Modules
-------
diffcore   numpy layers, manual backprop, Adam, checkpoints
minirogue  procedural dungeon simulator and task definitions
demos      scripted expert, demonstration datasets, offset samplers
pretrain   contrastive encoder
progress   signed log-distance progress model
agent      actor-critic learner and experiment arms
oracle     exact tabular identity checks
harness    experiment plans, summaries, plots
"""

__version__ = "0.1.0"
