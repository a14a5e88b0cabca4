"""Contrastive pre-training of the observation encoder.

The score between two observations is ``phi(torso(s)) . psi(torso(s')) / sqrt(d)``
and the loss is the in-batch softmax cross-entropy that singles out each
anchor's own future state among the other anchors' futures.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import minirogue as mr
from .demos import DemoDataset, sample_contrastive_indices

log = logging.getLogger(__name__)

EMBED_DIM = 64
N_STATUS = 3
IN_CHANNELS = mr.N_TILE_CODES + N_STATUS
STEPS_CHANNEL = mr.N_TILE_CODES + 2
VIEW_RADIUS = 5


def agent_positions(tiles: np.ndarray) -> np.ndarray:
    """(N, 2) row/col of the agent glyph in each grid."""
    tiles = np.asarray(tiles)
    n, h, w = tiles.shape
    flat = np.argmax(tiles.reshape(n, h * w) >= mr.AGENT, axis=1)
    return np.stack([flat // w, flat % w], axis=1)


def egocentric_view(tiles: np.ndarray, centers: np.ndarray | None = None,
                    radius: int = VIEW_RADIUS) -> np.ndarray:
    """Crop a (2r+1) x (2r+1) window around ``centers`` (default: each grid's agent).

    Cells beyond the map edge read as walls.
    """
    tiles = np.asarray(tiles)
    n, h, w = tiles.shape
    if centers is None:
        centers = agent_positions(tiles)
    size = 2 * radius + 1
    padded = np.full((n, h + 2 * radius, w + 2 * radius), mr.WALL, dtype=np.uint8)
    padded[:, radius:radius + h, radius:radius + w] = tiles
    offs = np.arange(size)
    rows = centers[:, 0, None] + offs
    cols = centers[:, 1, None] + offs
    return padded[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]]


def featurize(tiles: np.ndarray, status: np.ndarray, drop_steps: bool = True,
              dtype=np.float64, centers: np.ndarray | None = None,
              radius: int = VIEW_RADIUS) -> np.ndarray:
    """One-hot planes of the agent-centred view plus the status vector as constant planes.

    tiles (N, H, W) uint8, status (N, 3) -> (N, 2r+1, 2r+1, IN_CHANNELS). With
    ``drop_steps`` the elapsed-time plane is zeroed.
    """
    view = egocentric_view(tiles, centers, radius)
    n, h, w = view.shape
    x = np.zeros((n, h, w, IN_CHANNELS), dtype=dtype)
    np.put_along_axis(x, view[..., None].astype(np.int64), 1.0, axis=3)
    x[..., mr.N_TILE_CODES:] = np.asarray(status)[:, None, None, :]
    if drop_steps:
        x[..., STEPS_CHANNEL] = 0.0
    return x


def torso_stack(radius: int = VIEW_RADIUS, in_channels: int = IN_CHANNELS,
                prefix: str = "torso") -> list[dc.LayerSpec]:
    size = 2 * radius + 1
    return [
        dc.conv2d(f"{prefix}.c1", in_channels, 8), dc.relu(),
        dc.conv2d(f"{prefix}.c2", 8, 16), dc.relu(),
        dc.flatten(),
        dc.dense(f"{prefix}.fc", 16 * size * size, EMBED_DIM),
    ]


@dataclass(frozen=True)
class EncoderSpec:
    radius: int = VIEW_RADIUS

    @property
    def torso(self) -> list[dc.LayerSpec]:
        return torso_stack(self.radius)

    @property
    def phi(self) -> list[dc.LayerSpec]:
        return [dc.dense("phi", EMBED_DIM, EMBED_DIM)]

    @property
    def psi(self) -> list[dc.LayerSpec]:
        return [dc.dense("psi", EMBED_DIM, EMBED_DIM)]

    def init(self, seed: int, zero_heads: bool = False, dtype=np.float64) -> dc.ParamStore:
        rng = np.random.default_rng(seed)
        store = dc.init_params(self.torso + self.phi + self.psi, rng, dtype=dtype)
        if zero_heads:
            for name in ("phi.W", "psi.W"):
                store[name] = np.zeros_like(store[name])
        return store


@dataclass
class PretrainConfig:
    gamma: float = 0.95
    batch_size: int = 64
    n_candidates: int = 64       # only used with explicit negatives
    steps: int = 20000
    lr: float = 3e-4
    heldout_fraction: float = 0.1
    explicit_negatives: bool = False
    episode_group: int = 8       # anchors per episode in a batch
    log_interval: int = 1000
    eval_batches: int = 20
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")
        if not self.explicit_negatives and self.n_candidates > self.batch_size:
            self.n_candidates = self.batch_size


def embed(spec: EncoderSpec, params: dc.ParamStore, x: np.ndarray, head: str):
    z, t_tape = dc.forward(spec.torso, params, x)
    stack = spec.phi if head == "phi" else spec.psi
    e, h_tape = dc.forward(stack, params, z)
    return e, (t_tape, h_tape)


def score(spec: EncoderSpec, params: dc.ParamStore, s: mr.Observation, s2: mr.Observation) -> float:
    """f(s, s') for a single pair of observations."""
    xa = featurize(s.tiles[None], s.status[None])
    xb = featurize(s2.tiles[None], s2.status[None])
    ea, _ = embed(spec, params, xa, "phi")
    eb, _ = embed(spec, params, xb, "psi")
    return float(ea[0] @ eb[0] / math.sqrt(EMBED_DIM))


def score_matrix(spec: EncoderSpec, params: dc.ParamStore, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    ea, _ = embed(spec, params, xa, "phi")
    eb, _ = embed(spec, params, xb, "psi")
    return ea @ eb.T / math.sqrt(EMBED_DIM)


def contrastive_batch_loss(spec: EncoderSpec, params: dc.ParamStore, xa: np.ndarray, xp: np.ndarray):
    """In-batch loss: row i of the B x B score matrix should pick column i.

    Returns (loss, grads, scores).
    """
    B = xa.shape[0]
    if B < 2:
        raise dc.ConfigError("contrastive loss needs a batch of at least 2")
    scale = 1.0 / math.sqrt(EMBED_DIM)
    z, t_tape = dc.forward(spec.torso, params, np.concatenate([xa, xp]))
    ea, a_tape = dc.forward(spec.phi, params, z[:B])
    ep, p_tape = dc.forward(spec.psi, params, z[B:])
    scores = ea @ ep.T * scale
    loss, d_scores = dc.softmax_cross_entropy_rows(scores, np.arange(B))
    g_phi, dza = dc.backward(spec.phi, params, a_tape, d_scores @ ep * scale)
    g_psi, dzp = dc.backward(spec.psi, params, p_tape, d_scores.T @ ea * scale)
    g_torso, _ = dc.backward(spec.torso, params, t_tape, np.concatenate([dza, dzp]), False)
    return loss, {**g_torso, **g_phi, **g_psi}, scores


def explicit_negative_loss(spec: EncoderSpec, params: dc.ParamStore, xa: np.ndarray,
                           xp: np.ndarray, xn: np.ndarray):
    """Loss with a separate negative set per anchor.

    xa, xp: (B, ...); xn: (B, K - 1, ...). Candidate 0 of each row is the positive.
    """
    B, K1 = xn.shape[:2]
    scale = 1.0 / math.sqrt(EMBED_DIM)
    cand = np.concatenate([xp[:, None], xn], axis=1).reshape((B * (K1 + 1),) + xa.shape[1:])
    z, t_tape = dc.forward(spec.torso, params, np.concatenate([xa, cand]))
    ea, a_tape = dc.forward(spec.phi, params, z[:B])
    ec, c_tape = dc.forward(spec.psi, params, z[B:])
    ec3 = ec.reshape(B, K1 + 1, -1)
    scores = np.einsum("bd,bkd->bk", ea, ec3) * scale
    loss, d_scores = dc.softmax_cross_entropy_rows(scores, np.zeros(B, dtype=np.int64))
    d_ea = np.einsum("bk,bkd->bd", d_scores, ec3) * scale
    d_ec = (d_scores[:, :, None] * ea[:, None, :] * scale).reshape(ec.shape)
    g_phi, dza = dc.backward(spec.phi, params, a_tape, d_ea)
    g_psi, dzc = dc.backward(spec.psi, params, c_tape, d_ec)
    g_torso, _ = dc.backward(spec.torso, params, t_tape, np.concatenate([dza, dzc]), False)
    return loss, {**g_torso, **g_phi, **g_psi}, scores


def in_batch_accuracy(scores: np.ndarray) -> float:
    """Fraction of rows whose argmax is the diagonal entry."""
    return float(np.mean(np.argmax(scores, axis=1) == np.arange(len(scores))))


def _batch(dataset: DemoDataset, rng: np.random.Generator, config: PretrainConfig):
    a, p, n, _ = sample_contrastive_indices(
        dataset, rng, config.gamma, config.batch_size,
        config.n_candidates - 1 if config.explicit_negatives else 0, config.episode_group)
    xa = featurize(dataset.tiles[a], dataset.status[a], dtype=config.dtype)
    xp = featurize(dataset.tiles[p], dataset.status[p], dtype=config.dtype)
    xn = None
    if config.explicit_negatives:
        flat = n.ravel()
        xn = featurize(dataset.tiles[flat], dataset.status[flat],
                       dtype=config.dtype).reshape(n.shape + xa.shape[1:])
    return xa, xp, xn


def eval_accuracy(spec: EncoderSpec, params: dc.ParamStore, dataset: DemoDataset,
                  config: PretrainConfig, n_batches: int, seed: int = 0) -> float:
    """Mean in-batch argmax accuracy over freshly sampled batches."""
    return float(np.mean(eval_accuracies(spec, params, dataset, config, n_batches, seed)))


def eval_accuracies(spec, params, dataset, config, n_batches, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    accs = []
    for _ in range(n_batches):
        plain = PretrainConfig(gamma=config.gamma, batch_size=config.batch_size, dtype=config.dtype,
                               episode_group=config.episode_group)
        xa, xp, _ = _batch(dataset, rng, plain)
        accs.append(in_batch_accuracy(score_matrix(spec, params, xa, xp)))
    return np.array(accs)


def train_encoder(dataset: DemoDataset, config: PretrainConfig, seed: int,
                  checkpoint: str | None = None, metrics: str | None = None):
    """Train the encoder; returns (params, log rows).

    Log rows carry step, train_loss, train_acc and heldout_acc, where train
    values are averages over the interval since the previous row.
    """
    train, heldout = dataset.split(config.heldout_fraction, seed)
    spec = EncoderSpec()
    params = spec.init(seed, dtype=config.dtype)
    rng = np.random.default_rng([seed, 1])
    rows = []

    def record(step, losses, accs):
        held = eval_accuracy(spec, params, heldout, config, config.eval_batches, seed=seed + 7)
        rows.append({"step": step, "train_loss": float(np.mean(losses)),
                     "train_acc": float(np.mean(accs)), "heldout_acc": held})
        log.info("pretrain step %d loss %.4f train_acc %.3f heldout_acc %.3f", *rows[-1].values())

    xa, xp, _ = _batch(train, np.random.default_rng([seed, 2]), config)
    s0 = score_matrix(spec, params, xa, xp)
    l0, _ = dc.softmax_cross_entropy_rows(s0, np.arange(len(s0)))
    record(0, [l0], [in_batch_accuracy(s0)])
    losses, accs = [], []
    for step in range(1, config.steps + 1):
        xa, xp, xn = _batch(train, rng, config)
        if config.explicit_negatives:
            loss, grads, scores = explicit_negative_loss(spec, params, xa, xp, xn)
            acc = float(np.mean(np.argmax(scores, axis=1) == 0))
        else:
            loss, grads, scores = contrastive_batch_loss(spec, params, xa, xp)
            acc = in_batch_accuracy(scores)
        if not np.isfinite(loss):
            raise dc.DivergenceError(f"contrastive loss diverged at step {step}")
        dc.adam_step(params, grads, config.lr)
        losses.append(loss)
        accs.append(acc)
        if step % config.log_interval == 0 or step == config.steps:
            record(step, losses, accs)
            losses, accs = [], []
    if checkpoint:
        dc.save_checkpoint(checkpoint, params, seed, {"model": "encoder", "radius": spec.radius})
    if metrics:
        write_rows(metrics, rows, ["step", "train_loss", "train_acc", "heldout_acc"])
    return params, rows


def write_rows(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
