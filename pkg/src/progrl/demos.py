"""Scripted experts, the action-free demonstration dataset and its samplers."""
from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import minirogue as mr

log = logging.getLogger(__name__)

MAGIC = b"PRGL"
FORMAT_VERSION = 1
MIN_SPARSE_SUCCESS = 0.95


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


# --- experts ---------------------------------------------------------------

def _distance_to_targets(tiles: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Multi-source BFS distance to the nearest True cell of ``targets``."""
    h, w = tiles.shape
    dist = np.full((h, w), -1, dtype=np.int64)
    frontier = [tuple(map(int, p)) for p in np.argwhere(targets)]
    for p in frontier:
        dist[p] = 0
    d = 0
    while frontier:
        d += 1
        nxt = []
        for r, c in frontier:
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and dist[rr, cc] < 0 and tiles[rr, cc] != mr.WALL:
                    dist[rr, cc] = d
                    nxt.append((rr, cc))
        frontier = nxt
    return dist


def _frontier_targets(state: mr.GameState) -> np.ndarray:
    """Walkable tiles from which standing would reveal something new."""
    hidden = ~state.revealed
    h, w = hidden.shape
    rad = mr.REVEAL_RADIUS
    padded = np.zeros((h + 2 * rad, w + 2 * rad), dtype=bool)
    padded[rad:rad + h, rad:rad + w] = hidden
    near_hidden = np.zeros((h, w), dtype=bool)
    for dr in range(2 * rad + 1):
        for dc in range(2 * rad + 1):
            near_hidden |= padded[dr:dr + h, dc:dc + w]
    return near_hidden & (state.tiles != mr.WALL)


def expert_action(state: mr.GameState) -> int:
    """Greedy shortest-path expert with full knowledge of the layout."""
    task, tiles, pos = state.task, state.tiles, state.agent_pos
    stairs = state.level.stairs
    targets = np.zeros(tiles.shape, dtype=bool)
    if task.kind == "score":
        targets = tiles == mr.ITEM
    elif task.kind == "scout":
        targets = _frontier_targets(state)
    elif task.kind == "oracle" and state.level_index == state.dungeon.oracle_level:
        targets[state.dungeon.oracle_pos] = True
    if not targets.any():
        if stairs is None:
            return mr.WAIT
        if pos == stairs:
            return mr.DESCEND
        targets = np.zeros(tiles.shape, dtype=bool)
        targets[stairs] = True
    dist = _distance_to_targets(tiles, targets)
    best, best_d = mr.WAIT, dist[pos]
    for action, (dr, dc) in mr._MOVES.items():
        r, c = pos[0] + dr, pos[1] + dc
        if 0 <= r < tiles.shape[0] and 0 <= c < tiles.shape[1] and 0 <= dist[r, c] < best_d:
            best, best_d = action, dist[r, c]
    return best


# --- episodes and datasets ------------------------------------------------

@dataclass
class Episode:
    task: mr.TaskSpec
    seed: int
    tiles: np.ndarray    # (T + 1, height, width) uint8
    status: np.ndarray   # (T + 1, 3) float32
    rewards: np.ndarray  # (T,) float32

    @property
    def length(self) -> int:
        return len(self.rewards)

    def observation(self, t: int) -> mr.Observation:
        return mr.Observation(self.tiles[t], self.status[t].astype(np.float64))

    def __eq__(self, other):
        return (isinstance(other, Episode) and self.task == other.task and self.seed == other.seed
                and np.array_equal(self.tiles, other.tiles)
                and np.array_equal(self.status, other.status)
                and np.array_equal(self.rewards, other.rewards))


def run_policy(config: mr.DungeonConfig, task: mr.TaskSpec, policy, seed: int) -> Episode:
    """Roll out ``policy(state) -> action`` for one episode, dropping actions."""
    cfg = config.with_seed(seed)
    state, obs = mr.reset(cfg, task)
    tiles, status, rewards = [obs.tiles], [obs.status], []
    done = False
    while not done:
        res = mr.step(state, policy(state))
        tiles.append(res.observation.tiles)
        status.append(res.observation.status)
        rewards.append(res.reward)
        done = res.done
    return Episode(task, int(seed), np.stack(tiles).astype(np.uint8),
                   np.asarray(status, dtype=np.float32), np.asarray(rewards, dtype=np.float32))


def generate_expert_episode(config: mr.DungeonConfig, task: mr.TaskSpec, seed: int) -> Episode:
    return run_policy(config, task, expert_action, seed)


def random_policy(rng: np.random.Generator):
    return lambda state: int(rng.integers(mr.N_ACTIONS))


def _succeeded(ep: Episode) -> bool:
    return ep.task.sparse and ep.rewards.sum() >= 1.0


@dataclass
class DemoDataset:
    """Immutable collection of expert episodes with flat (episode, t) indexing."""

    manifest: dict
    episodes: list[Episode]
    offsets: np.ndarray = field(init=False)
    tiles: np.ndarray = field(init=False)
    status: np.ndarray = field(init=False)

    def __post_init__(self):
        lengths = np.array([ep.length + 1 for ep in self.episodes], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(lengths)])
        self.tiles = np.concatenate([ep.tiles for ep in self.episodes]) if self.episodes else np.zeros((0, 0, 0), np.uint8)
        self.status = np.concatenate([ep.status for ep in self.episodes]) if self.episodes else np.zeros((0, 3), np.float32)
        self.ep_len = lengths - 1
        # flat index -> episode and time
        self.flat_episode = np.repeat(np.arange(len(self.episodes)), lengths)
        self.flat_t = np.arange(len(self.tiles)) - self.offsets[self.flat_episode]
        anchor_ok = self.flat_t < self.ep_len[self.flat_episode]
        self.anchor_index = np.flatnonzero(anchor_ok)
        for arr in (self.offsets, self.tiles, self.status, self.flat_episode, self.flat_t, self.anchor_index):
            arr.flags.writeable = False
        for ep in self.episodes:
            for arr in (ep.tiles, ep.status, ep.rewards):
                arr.flags.writeable = False

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def n_states(self) -> int:
        return len(self.tiles)

    def locate(self, episode: int, t: int) -> int:
        if not 0 <= t <= self.episodes[episode].length:
            raise IndexError(f"t={t} outside episode {episode}")
        return int(self.offsets[episode] + t)

    def split(self, heldout_fraction: float, seed: int = 0) -> tuple["DemoDataset", "DemoDataset"]:
        """Deterministic train/held-out split by episode."""
        n = len(self.episodes)
        n_held = max(1, int(round(n * heldout_fraction))) if n > 1 else 0
        perm = np.random.default_rng(seed).permutation(n)
        held = sorted(perm[:n_held].tolist())
        train = sorted(perm[n_held:].tolist())
        return (DemoDataset(self.manifest, [self.episodes[i] for i in train]),
                DemoDataset(self.manifest, [self.episodes[i] for i in held]))


def generate_dataset(config: mr.DungeonConfig, tasks, episodes_per_task: int, seed: int,
                     check_success: bool = True) -> DemoDataset:
    """Expert episodes for each task, seeds ``seed, seed + 1, ...`` per task."""
    tasks = [mr.TaskSpec.parse(t) if isinstance(t, str) else t for t in tasks]
    episodes = []
    for task in tasks:
        task.validate(config)
        eps = [generate_expert_episode(config, task, seed + i) for i in range(episodes_per_task)]
        if task.sparse and check_success:
            rate = np.mean([_succeeded(ep) for ep in eps])
            if rate < MIN_SPARSE_SUCCESS:
                raise RuntimeError(f"expert succeeds on only {rate:.1%} of {task.name} seeds; "
                                   "generation config rejected")
            kept, nxt = [], seed + episodes_per_task
            for ep in eps:
                while not _succeeded(ep):
                    log.info("expert failed on %s seed %d, regenerating with %d", task.name, ep.seed, nxt)
                    ep = generate_expert_episode(config, task, nxt)
                    nxt += 1
                kept.append(ep)
            eps = kept
        episodes.extend(eps)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": {k: getattr(config, k) for k in ("width", "height", "n_levels",
                                                   "n_items_per_level", "horizon")},
        "tasks": [t.name for t in tasks],
        "episodes_per_task": episodes_per_task,
        "episode_count": len(episodes),
        "seed": seed,
    }
    return DemoDataset(manifest, episodes)


def config_from_manifest(manifest: dict, seed: int = 0) -> mr.DungeonConfig:
    return mr.DungeonConfig(seed=seed, **manifest["config"])


# --- binary persistence ----------------------------------------------------

def dataset_bytes(dataset: DemoDataset) -> bytes:
    if not dataset.episodes:
        raise ValueError("refusing to write an empty dataset")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    text = json.dumps(dataset.manifest, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(dataset.episodes)))
    for ep in dataset.episodes:
        buf.write(struct.pack("<BQI", ep.task.code, ep.seed, ep.length))
        for t in range(ep.length + 1):
            buf.write(ep.tiles[t].astype(np.uint8).tobytes())
            buf.write(ep.status[t].astype("<f4").tobytes())
        buf.write(ep.rewards.astype("<f4").tobytes())
    return buf.getvalue()


def write_dataset(dataset: DemoDataset, path) -> None:
    data = dataset_bytes(dataset)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetFormatError(f"truncated while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def dataset_from_bytes(data: bytes) -> DemoDataset:
    rd = _Reader(data)
    if rd.take(4, "magic") != MAGIC:
        raise DatasetFormatError("bad magic", 0)
    (version,) = rd.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    (n_text,) = rd.unpack("<I", "manifest length")
    at = rd.pos
    try:
        manifest = json.loads(rd.take(n_text, "manifest").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"unreadable manifest: {exc}", at) from None
    h, w = manifest["config"]["height"], manifest["config"]["width"]
    (count,) = rd.unpack("<I", "episode count")
    episodes = []
    for _ in range(count):
        at = rd.pos
        code, seed, T = rd.unpack("<BQI", "episode header")
        try:
            task = mr.TaskSpec.from_code(code)
        except (IndexError, ValueError):
            raise DatasetFormatError(f"unknown task code {code}", at) from None
        tiles = np.empty((T + 1, h, w), dtype=np.uint8)
        status = np.empty((T + 1, 3), dtype=np.float32)
        for t in range(T + 1):
            tiles[t] = np.frombuffer(rd.take(h * w, "tiles"), dtype=np.uint8).reshape(h, w)
            status[t] = np.frombuffer(rd.take(12, "status"), dtype="<f4")
        rewards = np.frombuffer(rd.take(4 * T, "rewards"), dtype="<f4").astype(np.float32)
        episodes.append(Episode(task, seed, tiles, status, rewards))
    if rd.pos != len(data):
        raise DatasetFormatError("trailing bytes after last episode", rd.pos)
    return DemoDataset(manifest, episodes)


def read_dataset(path) -> DemoDataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


# --- offset distributions ----------------------------------------------------

def geometric_pmf(gamma: float, n: int) -> np.ndarray:
    """pmf over offsets 1..n proportional to gamma**(d - 1)."""
    d = np.arange(n)
    w = gamma ** d
    return w / w.sum()


def log_uniform_pmf(n: int) -> np.ndarray:
    """pmf over 1..n of floor(exp(U(0, log(n + 1))))."""
    d = np.arange(1, n + 1, dtype=np.float64)
    return (np.log1p(d) - np.log(d)) / np.log(n + 1)


def sample_truncated_geometric(rng: np.random.Generator, gamma: float, upper) -> np.ndarray:
    """Inverse-CDF draws of offsets in [1, upper] with pmf proportional to gamma**(d - 1)."""
    upper = np.asarray(upper)
    if np.any(upper < 1):
        raise ValueError("upper bound must be >= 1")
    u = rng.random(upper.shape)
    if gamma <= 0.0:
        return np.ones(upper.shape, dtype=np.int64)
    # P[D <= d] = (1 - gamma**d) / (1 - gamma**upper)
    d = np.ceil(np.log1p(-u * (1.0 - gamma ** upper)) / np.log(gamma)).astype(np.int64)
    return np.clip(d, 1, upper)


def sample_log_uniform(rng: np.random.Generator, upper) -> np.ndarray:
    upper = np.asarray(upper)
    if np.any(upper < 1):
        raise ValueError("upper bound must be >= 1")
    u = rng.random(upper.shape)
    d = np.floor(np.exp(u * np.log(upper + 1.0))).astype(np.int64)
    return np.clip(d, 1, upper)


@dataclass(frozen=True)
class OffsetSampler:
    kind: str            # "truncated_geometric" or "log_uniform"
    gamma: float = 0.95

    def sample(self, rng: np.random.Generator, upper) -> np.ndarray:
        if self.kind == "truncated_geometric":
            return sample_truncated_geometric(rng, self.gamma, upper)
        if self.kind == "log_uniform":
            return sample_log_uniform(rng, upper)
        raise ValueError(f"unknown offset sampler {self.kind!r}")

    def pmf(self, n: int) -> np.ndarray:
        return geometric_pmf(self.gamma, n) if self.kind == "truncated_geometric" else log_uniform_pmf(n)


def compare_offset_distributions(gamma: float, n: int) -> list[dict]:
    """Rows of ``{dt, geometric, log_uniform}`` pmf values over offsets 1..n."""
    geo, lu = geometric_pmf(gamma, n), log_uniform_pmf(n)
    return [{"dt": d + 1, "geometric": float(geo[d]), "log_uniform": float(lu[d])} for d in range(n)]


# --- pair samplers -------------------------------------------------------------

def _anchors(dataset: DemoDataset, rng: np.random.Generator, n: int, group: int = 1):
    """Uniform anchors; with ``group > 1`` they come in runs of ``group``
    consecutive steps of one episode (wrapping inside short episodes)."""
    if dataset.n_states == 0 or len(dataset.anchor_index) == 0:
        raise ValueError("dataset has no valid anchor positions")
    if group <= 1:
        idx = dataset.anchor_index[rng.integers(len(dataset.anchor_index), size=n)]
    else:
        n_groups = -(-n // group)
        starts = dataset.anchor_index[rng.integers(len(dataset.anchor_index), size=n_groups)]
        ep = np.repeat(dataset.flat_episode[starts], group)[:n]
        t0 = np.repeat(dataset.flat_t[starts], group)[:n]
        t = (t0 + np.tile(np.arange(group), n_groups)[:n]) % dataset.ep_len[ep]
        idx = dataset.offsets[ep] + t
    room = dataset.ep_len[dataset.flat_episode[idx]] - dataset.flat_t[idx]
    return idx, room


def sample_contrastive_indices(dataset: DemoDataset, rng: np.random.Generator, gamma: float,
                               batch: int, n_negatives: int = 0, group: int = 1):
    """Flat indices of anchors, same-episode geometric-offset positives and
    uniform negatives drawn from every state of the dataset.

    With ``group > 1`` anchors are runs of consecutive steps, so each row's
    in-batch negatives include the futures of its temporal neighbours.

    Returns (anchor (B,), positive (B,), negatives (B, n_negatives), offsets (B,)).
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    anchor, room = _anchors(dataset, rng, batch, group)
    dt = sample_truncated_geometric(rng, gamma, room)
    negatives = rng.integers(dataset.n_states, size=(batch, n_negatives))
    return anchor, anchor + dt, negatives, dt


def sample_contrastive(dataset: DemoDataset, rng: np.random.Generator, gamma: float, K: int):
    """One anchor, its positive and K - 1 negatives, as observations."""
    if K < 2:
        raise ValueError("K must be >= 2")
    a, p, neg, _ = sample_contrastive_indices(dataset, rng, gamma, 1, K - 1)
    obs = lambda i: mr.Observation(dataset.tiles[i], dataset.status[i].astype(np.float64))
    return obs(a[0]), obs(p[0]), [obs(i) for i in neg[0]]


def sample_progress_indices(dataset: DemoDataset, rng: np.random.Generator, batch: int,
                            signed: bool = True):
    """Flat index pairs (a, b) and signed offsets for the progress regression.

    ``|dt|`` is log-uniform over [1, T - t]; with ``signed`` the pair is
    swapped (and the offset negated) with probability one half.
    """
    anchor, room = _anchors(dataset, rng, batch)
    dt = sample_log_uniform(rng, room)
    later = anchor + dt
    if signed:
        flip = rng.random(batch) < 0.5
    else:
        flip = np.zeros(batch, dtype=bool)
    a = np.where(flip, later, anchor)
    b = np.where(flip, anchor, later)
    return a, b, np.where(flip, -dt, dt)


def sample_progress_pair(dataset: DemoDataset, rng: np.random.Generator, signed: bool = True):
    a, b, dt = sample_progress_indices(dataset, rng, 1, signed)
    obs = lambda i: mr.Observation(dataset.tiles[i], dataset.status[i].astype(np.float64))
    return obs(a[0]), obs(b[0]), int(dt[0])
