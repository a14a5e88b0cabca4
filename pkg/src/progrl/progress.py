"""Progress model g(s_a, s_b): regression of signed log temporal distance.

Both observations are fused early by stacking their feature planes along
the channel axis; the elapsed-steps plane is zeroed for both inputs since
it would give away the regression target.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import minirogue as mr
from .demos import DemoDataset, sample_progress_indices
from .pretrain import EMBED_DIM, IN_CHANNELS, VIEW_RADIUS, agent_positions, featurize, torso_stack, write_rows

log = logging.getLogger(__name__)


def progress_target(dt) -> np.ndarray | float:
    """sgn(dt) * log(1 + |dt|)."""
    if np.isscalar(dt):
        return math.copysign(math.log1p(abs(dt)), dt) if dt != 0 else 0.0
    dt = np.asarray(dt, dtype=np.float64)
    return np.sign(dt) * np.log1p(np.abs(dt))


@dataclass(frozen=True)
class ProgressSpec:
    radius: int = VIEW_RADIUS

    @property
    def stack(self) -> list[dc.LayerSpec]:
        return torso_stack(self.radius, 2 * IN_CHANNELS) + [dc.dense("head", EMBED_DIM, 1)]

    def init(self, seed: int, dtype=np.float64, zero_head: bool = True) -> dc.ParamStore:
        store = dc.init_params(self.stack, np.random.default_rng(seed), dtype=dtype)
        if zero_head:
            store["head.W"] = np.zeros_like(store["head.W"])
        return store


@dataclass
class ProgressConfig:
    steps: int = 20000
    batch_size: int = 64
    lr: float = 3e-4
    signed: bool = True
    heldout_fraction: float = 0.1
    log_interval: int = 1000
    eval_pairs: int = 2048
    dtype: str = "float32"

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be positive")


def pair_features(tiles_a, status_a, tiles_b, status_b, dtype=np.float64,
                  radius: int = VIEW_RADIUS) -> np.ndarray:
    """Both views are centred on the agent of the second observation, so the
    first view shows where the agent was relative to where it is now."""
    centers = agent_positions(tiles_b)
    xa = featurize(tiles_a, status_a, drop_steps=True, dtype=dtype, centers=centers, radius=radius)
    xb = featurize(tiles_b, status_b, drop_steps=True, dtype=dtype, centers=centers, radius=radius)
    return np.concatenate([xa, xb], axis=3)


def predict(spec: ProgressSpec, params: dc.ParamStore, x: np.ndarray) -> np.ndarray:
    out, _ = dc.forward(spec.stack, params, x)
    return out[:, 0]


def ele_loss(spec: ProgressSpec, params: dc.ParamStore, x: np.ndarray, dt: np.ndarray):
    """Mean squared error against the signed log offset. Returns (loss, grads)."""
    target = progress_target(np.asarray(dt)).astype(x.dtype)
    out, tape = dc.forward(spec.stack, params, x)
    err = out[:, 0] - target
    loss = float(np.mean(err * err))
    g_out = (2.0 / len(err)) * err[:, None]
    grads, _ = dc.backward(spec.stack, params, tape, g_out, need_input_grad=False)
    return loss, grads


def progress_reward(spec: ProgressSpec, params: dc.ParamStore,
                    s_prev: mr.Observation, s_now: mr.Observation) -> float:
    """g(s_prev, s_now) for a single pair."""
    x = pair_features(s_prev.tiles[None], s_prev.status[None], s_now.tiles[None], s_now.status[None],
                      dtype=params["head.W"].dtype)
    return float(predict(spec, params, x)[0])


def batch_progress_reward(spec: ProgressSpec, params: dc.ParamStore, tiles_prev, status_prev,
                          tiles_now, status_now) -> np.ndarray:
    x = pair_features(tiles_prev, status_prev, tiles_now, status_now, dtype=params["head.W"].dtype)
    return predict(spec, params, x)


def sample_pairs(dataset: DemoDataset, rng: np.random.Generator, n: int, signed: bool, dtype):
    a, b, dt = sample_progress_indices(dataset, rng, n, signed)
    x = pair_features(dataset.tiles[a], dataset.status[a], dataset.tiles[b], dataset.status[b], dtype)
    return x, dt


def heldout_mse(spec, params, dataset, config: ProgressConfig, seed: int) -> tuple[float, float]:
    """(model MSE, target variance) on freshly sampled held-out pairs."""
    rng = np.random.default_rng(seed)
    preds, targets = [], []
    for start in range(0, config.eval_pairs, 256):
        x, dt = sample_pairs(dataset, rng, min(256, config.eval_pairs - start), config.signed, config.dtype)
        preds.append(predict(spec, params, x))
        targets.append(progress_target(dt))
    p, t = np.concatenate(preds).astype(np.float64), np.concatenate(targets)
    return float(np.mean((p - t) ** 2)), float(np.var(t))


def octave_means(spec, params, dataset: DemoDataset, seed: int, n_pairs: int = 4096,
                 n_octaves: int = 6, dtype="float32") -> np.ndarray:
    """Mean prediction on forward pairs with dt in [2^j, 2^(j+1)), j = 0..n_octaves-1.

    Octaves without any sampled pair are NaN.
    """
    rng = np.random.default_rng(seed)
    preds, dts = [], []
    for start in range(0, n_pairs, 256):
        n = min(256, n_pairs - start)
        x, dt = sample_pairs(dataset, rng, n, False, dtype)
        preds.append(predict(spec, params, x).astype(np.float64))
        dts.append(dt)
    p, dt = np.concatenate(preds), np.concatenate(dts)
    octave = np.floor(np.log2(dt)).astype(np.int64)
    return np.array([p[octave == j].mean() if np.any(octave == j) else np.nan for j in range(n_octaves)])


def train_progress(dataset: DemoDataset, config: ProgressConfig, seed: int,
                   checkpoint: str | None = None, metrics: str | None = None):
    """Fit g on the dataset; returns (params, log rows)."""
    train, heldout = dataset.split(config.heldout_fraction, seed)
    spec = ProgressSpec()
    params = spec.init(seed, dtype=config.dtype)
    rng = np.random.default_rng([seed, 3])
    rows = []

    def record(step, losses):
        mse, var = heldout_mse(spec, params, heldout, config, seed + 11)
        rows.append({"step": step, "train_loss": float(np.mean(losses)) if losses else float("nan"),
                     "heldout_mse": mse, "target_var": var})
        log.info("progress step %d loss %.4f heldout_mse %.4f (target var %.4f)", *rows[-1].values())

    record(0, [])
    losses = []
    for step in range(1, config.steps + 1):
        x, dt = sample_pairs(train, rng, config.batch_size, config.signed, config.dtype)
        loss, grads = ele_loss(spec, params, x, dt)
        if not np.isfinite(loss):
            raise dc.DivergenceError(f"progress loss diverged at step {step}")
        dc.adam_step(params, grads, config.lr)
        losses.append(loss)
        if step % config.log_interval == 0 or step == config.steps:
            record(step, losses)
            losses = []
    if checkpoint:
        dc.save_checkpoint(checkpoint, params, seed,
                           {"model": "progress", "radius": spec.radius, "signed": config.signed})
    if metrics:
        write_rows(metrics, rows, ["step", "train_loss", "heldout_mse", "target_var"])
    return params, rows
