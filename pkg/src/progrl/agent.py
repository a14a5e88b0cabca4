"""Online advantage actor-critic with an optional frozen pre-trained torso and
progress-based reward shaping."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import minirogue as mr
from .pretrain import EMBED_DIM, IN_CHANNELS, VIEW_RADIUS, featurize, torso_stack
from .progress import ProgressSpec, batch_progress_reward

log = logging.getLogger(__name__)

ARMS = ("base", "pretrain", "ele", "pretrain_ele", "pm_torso_init", "pretrain_finetune")
# arm -> (torso source, frozen, shaping)
ARM_TABLE = {
    "base": (None, False, False),
    "pretrain": ("encoder", True, False),
    "ele": (None, False, True),
    "pretrain_ele": ("encoder", True, True),
    "pm_torso_init": ("progress", True, True),
    "pretrain_finetune": ("encoder", False, False),
}
METRIC_COLUMNS = ["env_steps", "eval_mean_return", "eval_std_return", "policy_loss",
                  "value_loss", "entropy", "shaped_reward_mean"]


@dataclass
class AgentConfig:
    task: str = "depth2"
    arm: str = "base"
    gamma: float = 0.99
    rollout_len: int = 16
    n_envs: int = 8
    ent_coef: float = 0.01
    value_coef: float = 0.5
    lr: float = 1e-3
    shaping_lambda: float = 0.01
    shaping_k: int = 8
    normalize_rewards: bool = True
    max_grad_norm: float | None = None
    budget: int = 300_000
    eval_interval: int = 10_000
    eval_episodes: int = 20
    dungeon: mr.DungeonConfig = field(default_factory=mr.DungeonConfig)
    dtype: str = "float32"

    def __post_init__(self):
        if self.arm not in ARM_TABLE:
            raise ValueError(f"unknown arm {self.arm!r}; choose from {ARMS}")
        if self.shaping_lambda < 0:
            raise ValueError("shaping lambda must be >= 0")
        if self.shaping_k < 1:
            raise ValueError("shaping k must be >= 1")
        mr.TaskSpec.parse(self.task).validate(self.dungeon)

    @property
    def torso_source(self):
        return ARM_TABLE[self.arm][0]

    @property
    def frozen(self) -> bool:
        return ARM_TABLE[self.arm][1]

    @property
    def shaping(self) -> bool:
        return ARM_TABLE[self.arm][2]


@dataclass(frozen=True)
class PolicyValueNet:
    radius: int = VIEW_RADIUS

    @property
    def torso(self):
        return torso_stack(self.radius)

    trunk = (dc.dense("trunk", EMBED_DIM, EMBED_DIM), dc.relu())
    pi = (dc.dense("pi", EMBED_DIM, mr.N_ACTIONS),)
    v = (dc.dense("v", EMBED_DIM, 1),)

    def init(self, seed: int, dtype=np.float64) -> dc.ParamStore:
        stack = self.torso + list(self.trunk) + list(self.pi) + list(self.v)
        return dc.init_params(stack, np.random.default_rng(seed), dtype=dtype)

    def torso_names(self) -> list[str]:
        return [f"{l.name}.{p}" for l in self.torso if l.kind in ("dense", "conv2d") for p in "Wb"]

    def forward(self, params: dc.ParamStore, x: np.ndarray):
        z, t_tape = dc.forward(self.torso, params, x)
        h, h_tape = dc.forward(list(self.trunk), params, z)
        logits, p_tape = dc.forward(list(self.pi), params, h)
        value, v_tape = dc.forward(list(self.v), params, h)
        return logits, value[:, 0], (t_tape, h_tape, p_tape, v_tape)

    def backward(self, params, tape, d_logits, d_value, train_torso: bool = True):
        t_tape, h_tape, p_tape, v_tape = tape
        g_pi, dh1 = dc.backward(list(self.pi), params, p_tape, d_logits)
        g_v, dh2 = dc.backward(list(self.v), params, v_tape, d_value[:, None])
        g_trunk, dz = dc.backward(list(self.trunk), params, h_tape, dh1 + dh2)
        grads = {**g_trunk, **g_pi, **g_v}
        if train_torso:
            g_torso, _ = dc.backward(self.torso, params, t_tape, dz, need_input_grad=False)
            grads.update(g_torso)
        return grads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def import_torso(net: PolicyValueNet, params: dc.ParamStore, source: dc.ParamStore, kind: str) -> None:
    """Copy torso weights from an encoder or progress checkpoint into ``params``.

    The progress torso sees both observations stacked along channels; the
    slice acting on the later observation is what gets transplanted.
    """
    for name in net.torso_names():
        value = source[name]
        if kind == "progress" and name == "torso.c1.W":
            value = value[..., IN_CHANNELS:]
        params[name] = value


@dataclass
class RolloutBuffer:
    tiles: np.ndarray         # (T, n, H, W) observation the action was taken in
    status: np.ndarray        # (T, n, 3)
    actions: np.ndarray       # (T, n)
    raw_rewards: np.ndarray   # (T, n)
    values: np.ndarray        # (T, n)
    logps: np.ndarray         # (T, n)
    dones: np.ndarray         # (T, n)
    next_tiles: np.ndarray    # (T, n, H, W) state reached by the action
    next_status: np.ndarray
    lag_tiles: np.ndarray     # state k steps before next_*, valid where shape_mask
    lag_status: np.ndarray
    shape_mask: np.ndarray    # (T, n) episode age >= k
    shaped_rewards: np.ndarray | None = None

    @classmethod
    def empty(cls, T: int, n: int, h: int, w: int) -> "RolloutBuffer":
        z = lambda *shape, dt=np.float64: np.zeros(shape, dtype=dt)
        return cls(z(T, n, h, w, dt=np.uint8), z(T, n, 3), z(T, n, dt=np.int64), z(T, n), z(T, n),
                   z(T, n), z(T, n, dt=bool), z(T, n, h, w, dt=np.uint8), z(T, n, 3),
                   z(T, n, h, w, dt=np.uint8), z(T, n, 3), z(T, n, dt=bool))


def shape_rewards(buffer: RolloutBuffer, progress_fn, lam: float) -> RolloutBuffer:
    """shaped = raw + lam * g(s_lag, s_next) on steps whose episode age is >= k.

    ``progress_fn(tiles_prev, status_prev, tiles_now, status_now)`` returns g
    for a batch of pairs; it is not called when ``lam`` is zero.
    """
    shaped = buffer.raw_rewards.copy()
    mask = buffer.shape_mask
    if lam > 0 and mask.any():
        g = progress_fn(buffer.lag_tiles[mask], buffer.lag_status[mask],
                        buffer.next_tiles[mask], buffer.next_status[mask])
        shaped[mask] += lam * np.asarray(g, dtype=np.float64)
    buffer.shaped_rewards = shaped
    return buffer


def compute_returns_advantages(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                               bootstrap: np.ndarray, gamma: float, normalize: bool = True):
    """n-step discounted returns cut at episode ends, bootstrapped at the window edge.

    All arrays are (T, n); ``bootstrap`` is (n,). Returns (returns, advantages).
    """
    T = rewards.shape[0]
    returns = np.zeros_like(rewards, dtype=np.float64)
    running = np.asarray(bootstrap, dtype=np.float64).copy()
    for t in range(T - 1, -1, -1):
        running = rewards[t] + gamma * running * (1.0 - dones[t])
        returns[t] = running
    adv = returns - values
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return returns, adv


def a2c_loss(net: PolicyValueNet, params: dc.ParamStore, x: np.ndarray, actions: np.ndarray,
             advantages: np.ndarray, returns: np.ndarray, config: AgentConfig, train_torso: bool = True):
    """Total loss, its parts and gradients for one batch.

    loss = -mean(log pi(a|s) adv) + value_coef * mean((V - R)^2) - ent_coef * mean(H)
    """
    logits, value, tape = net.forward(params, x)
    N = len(actions)
    logp_all = log_softmax(logits.astype(np.float64))
    p = np.exp(logp_all)
    rows = np.arange(N)
    logp_a = logp_all[rows, actions]
    entropy_each = -(p * logp_all).sum(axis=1)
    value = value.astype(np.float64)
    policy_loss = -float(np.mean(logp_a * advantages))
    value_loss = float(np.mean((value - returns) ** 2))
    entropy = float(np.mean(entropy_each))
    total = policy_loss + config.value_coef * value_loss - config.ent_coef * entropy

    onehot = np.zeros_like(p)
    onehot[rows, actions] = 1.0
    d_logits = -(onehot - p) * advantages[:, None] / N
    d_logits += config.ent_coef * p * (logp_all + entropy_each[:, None]) / N
    d_value = 2.0 * config.value_coef * (value - returns) / N
    dtype = logits.dtype
    grads = net.backward(params, tape, d_logits.astype(dtype), d_value.astype(dtype), train_torso)
    parts = {"policy_loss": policy_loss, "value_loss": value_loss, "entropy": entropy, "total": total}
    return total, parts, grads


def clip_by_global_norm(grads: dict, max_norm: float | None) -> dict:
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        return {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}
    return grads


def a2c_update(net: PolicyValueNet, params: dc.ParamStore, x, actions, advantages, returns,
               config: AgentConfig):
    """One optimizer step on the actor-critic loss; frozen torso is left untouched."""
    train_torso = not config.frozen
    total, parts, grads = a2c_loss(net, params, x, actions, advantages, returns, config, train_torso)
    if not np.isfinite(total):
        raise dc.DivergenceError(
            f"a2c loss is not finite: {parts}; adv mean {np.mean(advantages):.3g}, "
            f"returns range [{np.min(returns):.3g}, {np.max(returns):.3g}]")
    if not train_torso:
        grads = {k: v for k, v in grads.items() if not k.startswith("torso.")}
    dc.adam_step(params, clip_by_global_norm(grads, config.max_grad_norm), config.lr)
    return params, parts


class RunningMeanStd:
    """Streaming mean/variance (parallel-merge form)."""

    def __init__(self):
        self.mean, self.var, self.count = 0.0, 1.0, 1e-4

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size == 0:
            return
        b_mean, b_var, b_count = float(x.mean()), float(x.var()), x.size
        delta = b_mean - self.mean
        total = self.count + b_count
        self.mean += delta * b_count / total
        m2 = self.var * self.count + b_var * b_count + delta * delta * self.count * b_count / total
        self.var, self.count = m2 / total, total


class VecEnv:
    """n MiniRogue instances stepped in lockstep with automatic resets."""

    def __init__(self, config: mr.DungeonConfig, task: mr.TaskSpec, n: int, seed_rng: np.random.Generator):
        self.config, self.task, self.n, self.seed_rng = config, task, n, seed_rng
        self.states = [None] * n
        h, w = config.height, config.width
        self.tiles = np.zeros((n, h, w), dtype=np.uint8)
        self.status = np.zeros((n, 3))
        self.ep_return = np.zeros(n)
        self.completed: list[float] = []
        for i in range(n):
            self._reset(i)

    def _reset(self, i: int) -> None:
        seed = int(self.seed_rng.integers(2 ** 62))
        state, obs = mr.reset(self.config.with_seed(seed), self.task)
        self.states[i] = state
        self.tiles[i], self.status[i] = obs.tiles, obs.status
        self.ep_return[i] = 0.0

    def step(self, actions):
        """Returns (next_tiles, next_status, rewards, dones) before auto-reset."""
        h, w = self.tiles.shape[1:]
        nt, ns = np.zeros((self.n, h, w), dtype=np.uint8), np.zeros((self.n, 3))
        rewards, dones = np.zeros(self.n), np.zeros(self.n, dtype=bool)
        for i, a in enumerate(actions):
            res = mr.step(self.states[i], a)
            nt[i], ns[i] = res.observation.tiles, res.observation.status
            rewards[i], dones[i] = res.reward, res.done
            self.ep_return[i] += res.reward
            if res.done:
                self.completed.append(float(self.ep_return[i]))
                self._reset(i)
            else:
                self.tiles[i], self.status[i] = nt[i], ns[i]
        return nt, ns, rewards, dones


def sample_actions(logits: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    logp = log_softmax(logits.astype(np.float64))
    cdf = np.cumsum(np.exp(logp), axis=1)
    u = rng.random(len(logits)) * cdf[:, -1]
    actions = np.minimum((cdf < u[:, None]).sum(axis=1), logits.shape[1] - 1)
    return actions, logp[np.arange(len(actions)), actions]


def evaluate(net: PolicyValueNet, params: dc.ParamStore, config: AgentConfig,
             rng: np.random.Generator) -> np.ndarray:
    """Raw returns of ``eval_episodes`` sampled-policy episodes on fresh seeds."""
    task = mr.TaskSpec.parse(config.task)
    n = config.eval_episodes
    states, obs = zip(*(mr.reset(config.dungeon.with_seed(int(rng.integers(2 ** 62))), task)
                        for _ in range(n)))
    states = list(states)
    tiles = np.stack([o.tiles for o in obs])
    status = np.stack([o.status for o in obs])
    returns = np.zeros(n)
    live = np.ones(n, dtype=bool)
    while live.any():
        idx = np.flatnonzero(live)
        x = featurize(tiles[idx], status[idx], dtype=config.dtype)
        logits, _, _ = net.forward(params, x)
        actions, _ = sample_actions(logits, rng)
        for j, a in zip(idx, actions):
            res = mr.step(states[j], a)
            returns[j] += res.reward
            tiles[j], status[j] = res.observation.tiles, res.observation.status
            live[j] = not res.done
    return returns


def build_params(config: AgentConfig, seed: int, encoder: dc.ParamStore | None = None,
                 progress: dc.ParamStore | None = None):
    cfg = config.dungeon
    net = PolicyValueNet()
    params = net.init(seed, dtype=config.dtype)
    src = config.torso_source
    if src == "encoder":
        if encoder is None:
            raise dc.ConfigError(f"arm {config.arm} needs an encoder checkpoint")
        import_torso(net, params, encoder, "encoder")
    elif src == "progress":
        if progress is None:
            raise dc.ConfigError(f"arm {config.arm} needs a progress checkpoint")
        import_torso(net, params, progress, "progress")
    if config.shaping and progress is None:
        raise dc.ConfigError(f"arm {config.arm} needs a progress checkpoint for shaping")
    return net, params


def train_online(config: AgentConfig, seed: int, encoder: dc.ParamStore | None = None,
                 progress: dc.ParamStore | None = None, metrics: str | None = None,
                 on_update=None):
    """Run the online phase; returns (params, metric rows).

    ``on_update(params)`` is called after every optimizer step when given.
    """
    net, params = build_params(config, seed, encoder, progress)
    cfg = config.dungeon
    task = mr.TaskSpec.parse(config.task)
    pspec = ProgressSpec()
    if config.shaping:
        progress = progress.copy()
        for e in progress.entries.values():
            e.value = e.value.astype(config.dtype)
        progress_fn = lambda *a: batch_progress_reward(pspec, progress, *a)
    else:
        progress_fn = None
    act_rng = np.random.default_rng([seed, 10])
    eval_rng = np.random.default_rng([seed, 20])
    env = VecEnv(cfg, task, config.n_envs, np.random.default_rng([seed, 30]))
    n, T, k = config.n_envs, config.rollout_len, config.shaping_k
    history = [[(env.tiles[i].copy(), env.status[i].copy())] for i in range(n)]
    ret_rms, disc_ret = RunningMeanStd(), np.zeros(n)

    rows: list[dict] = []
    acc = {"policy_loss": [], "value_loss": [], "entropy": [], "shaped": []}

    def record(env_steps):
        returns = evaluate(net, params, config, eval_rng)
        mean = lambda xs: float(np.mean(xs)) if xs else float("nan")
        rows.append({"env_steps": env_steps, "eval_mean_return": float(returns.mean()),
                     "eval_std_return": float(returns.std()),
                     "policy_loss": mean(acc["policy_loss"]), "value_loss": mean(acc["value_loss"]),
                     "entropy": mean(acc["entropy"]), "shaped_reward_mean": mean(acc["shaped"])})
        for v in acc.values():
            v.clear()
        log.info("%s/%s seed %d steps %d eval %.3f", config.task, config.arm, seed, env_steps,
                 rows[-1]["eval_mean_return"])

    record(0)
    env_steps, next_eval = 0, config.eval_interval
    h, w = cfg.height, cfg.width
    while env_steps < config.budget:
        buf = RolloutBuffer.empty(T, n, h, w)
        for t in range(T):
            buf.tiles[t], buf.status[t] = env.tiles, env.status
            x = featurize(env.tiles, env.status, dtype=config.dtype)
            logits, value, _ = net.forward(params, x)
            actions, logp = sample_actions(logits, act_rng)
            buf.actions[t], buf.values[t], buf.logps[t] = actions, value, logp
            nt, ns, rewards, dones = env.step(actions)
            buf.raw_rewards[t], buf.dones[t] = rewards, dones
            buf.next_tiles[t], buf.next_status[t] = nt, ns
            for i in range(n):
                hist = history[i]
                hist.append((nt[i], ns[i]))
                if len(hist) > k + 1:
                    hist.pop(0)
                if len(hist) == k + 1:
                    buf.shape_mask[t, i] = True
                    buf.lag_tiles[t, i], buf.lag_status[t, i] = hist[0]
                if dones[i]:
                    history[i] = [(env.tiles[i].copy(), env.status[i].copy())]
        env_steps += T * n
        if config.shaping:
            shape_rewards(buf, progress_fn, config.shaping_lambda)
        else:
            buf.shaped_rewards = buf.raw_rewards.copy()
        rewards = buf.shaped_rewards
        acc["shaped"].append(float(rewards.mean()))
        if config.normalize_rewards:
            for t in range(T):
                disc_ret = disc_ret * config.gamma + rewards[t]
                ret_rms.update(disc_ret)
                disc_ret[buf.dones[t]] = 0.0
            rewards = np.clip(rewards / math.sqrt(ret_rms.var + 1e-8), -10.0, 10.0)
        _, boot, _ = net.forward(params, featurize(env.tiles, env.status, dtype=config.dtype))
        returns, adv = compute_returns_advantages(rewards, buf.values, buf.dones.astype(np.float64),
                                                  boot, config.gamma)
        x = featurize(buf.tiles.reshape(T * n, h, w), buf.status.reshape(T * n, 3), dtype=config.dtype)
        params, parts = a2c_update(net, params, x, buf.actions.ravel(), adv.ravel(), returns.ravel(), config)
        for key in ("policy_loss", "value_loss", "entropy"):
            acc[key].append(parts[key])
        if on_update is not None:
            on_update(params)
        if env_steps >= next_eval or env_steps >= config.budget:
            record(env_steps)
            while next_eval <= env_steps:
                next_eval += config.eval_interval
    if metrics:
        write_metrics(metrics, rows)
    return params, rows


def write_metrics(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(float(row[k])) if k != "env_steps" else int(row[k])
                             for k in METRIC_COLUMNS})


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "env_steps" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]
