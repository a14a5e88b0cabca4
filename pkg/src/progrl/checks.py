"""Finite-difference gradient checks for every layer kind and every training loss.

Each check builds a small random float64 instance from a seed and reports the
worst relative error between analytic and central-difference gradients.
"""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from . import agent, pretrain, progress
from . import diffcore as dc
from . import minirogue as mr

GRAD_TOL = 1e-4
EPS = 1e-6


def _stack_check(stack, x_shape, seed: int) -> float:
    rng = np.random.default_rng(seed)
    params = dc.init_params(stack, rng)
    x = rng.standard_normal(x_shape)
    return dc.finite_diff_check(stack, params, x, eps=EPS, seed=seed)


def check_dense(seed: int) -> float:
    return _stack_check([dc.dense("d", 5, 3)], (4, 5), seed)


def check_conv2d(seed: int) -> float:
    return _stack_check([dc.conv2d("c", 3, 2)], (2, 4, 5, 3), seed)


def check_relu(seed: int) -> float:
    return _stack_check([dc.dense("a", 4, 6), dc.relu(), dc.dense("b", 6, 2)], (5, 4), seed)


def check_flatten(seed: int) -> float:
    return _stack_check([dc.conv2d("c", 2, 3), dc.flatten(), dc.dense("d", 3 * 3 * 4, 2)], (2, 3, 4, 2), seed)


def _random_features(rng: np.random.Generator, n: int, channels: int = pretrain.IN_CHANNELS) -> np.ndarray:
    side = 2 * pretrain.VIEW_RADIUS + 1
    return rng.random((n, side, side, channels))


def check_contrastive(seed: int, probes: int = 4) -> float:
    rng = np.random.default_rng(seed)
    spec = pretrain.EncoderSpec()
    params = spec.init(seed)
    xa, xp = _random_features(rng, 4), _random_features(rng, 4)
    _, grads, _ = pretrain.contrastive_batch_loss(spec, params, xa, xp)
    return dc.check_gradients(lambda: pretrain.contrastive_batch_loss(spec, params, xa, xp)[0],
                              params, grads, EPS, probes, rng)


def check_ele(seed: int, probes: int = 4) -> float:
    rng = np.random.default_rng(seed)
    spec = progress.ProgressSpec()
    params = spec.init(seed, zero_head=False)
    x = _random_features(rng, 4, 2 * pretrain.IN_CHANNELS)
    dt = rng.integers(-60, 61, size=4)
    _, grads = progress.ele_loss(spec, params, x, dt)
    return dc.check_gradients(lambda: progress.ele_loss(spec, params, x, dt)[0],
                              params, grads, EPS, probes, rng)


def check_a2c(seed: int, probes: int = 4) -> float:
    rng = np.random.default_rng(seed)
    net = agent.PolicyValueNet()
    params = net.init(seed)
    config = agent.AgentConfig()
    x = _random_features(rng, 6)
    actions = rng.integers(0, mr.N_ACTIONS, size=6)
    adv, ret = rng.standard_normal(6), rng.standard_normal(6)
    _, _, grads = agent.a2c_loss(net, params, x, actions, adv, ret, config)
    return dc.check_gradients(lambda: agent.a2c_loss(net, params, x, actions, adv, ret, config)[0],
                              params, grads, EPS, probes, rng)


CHECKS: dict[str, Callable[[int], float]] = {
    "dense layer": check_dense,
    "conv2d layer": check_conv2d,
    "relu layer": check_relu,
    "flatten layer": check_flatten,
    "contrastive loss": check_contrastive,
    "progress loss": check_ele,
    "actor-critic loss": check_a2c,
}


def gradient_suite(seeds: Iterable[int] = range(20), tol: float = GRAD_TOL) -> list[tuple[str, bool, str]]:
    """One (name, passed, detail) row per check, worst error over all seeds."""
    seeds = list(seeds)
    rows = []
    for name, fn in CHECKS.items():
        worst = max(fn(s) for s in seeds)
        rows.append((f"{name} gradients, {len(seeds)} seeds", bool(worst <= tol), f"max rel err {worst:.2e}"))
    return rows
