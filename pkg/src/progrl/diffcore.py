"""Small differentiable-layer core with explicit backward rules.

Layers operate on batched float arrays and keep the dtype of their
parameters (float64 by default; training loops may opt into float32).
Convolutions use NHWC layout, a fixed 3x3 kernel, stride 1 and zero
padding 1, so spatial size is preserved through every conv layer.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CKPT_FORMAT = "progrl-ckpt"
CKPT_VERSION = 1

LAYER_KINDS = ("dense", "conv2d", "relu", "flatten")


class ConfigError(ValueError):
    """Raised for malformed layer stacks or shape mismatches."""


class DivergenceError(FloatingPointError):
    """Raised when a NaN or inf shows up in gradients or losses."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    dims: tuple = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("dense", "conv2d") and (not self.name or len(self.dims) != 2):
            raise ConfigError(f"{self.kind} layer needs a name and (in, out) dims")


def dense(name: str, n_in: int, n_out: int) -> LayerSpec:
    return LayerSpec("dense", name, (n_in, n_out))


def conv2d(name: str, c_in: int, c_out: int) -> LayerSpec:
    return LayerSpec("conv2d", name, (c_in, c_out))


def relu() -> LayerSpec:
    return LayerSpec("relu")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


@dataclass
class ParamEntry:
    value: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamStore:
    """Ordered name -> parameter map carrying Adam moments."""

    entries: dict = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray, dtype=None) -> None:
        if name in self.entries:
            raise ConfigError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=dtype or _float_dtype(value))
        self.entries[name] = ParamEntry(value, np.zeros_like(value), np.zeros_like(value))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name].value

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        entry = self.entries[name]
        value = np.asarray(value, dtype=entry.value.dtype)
        if value.shape != entry.value.shape:
            raise ConfigError(f"shape mismatch for {name}: {value.shape} vs {entry.value.shape}")
        entry.value = value.copy()

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return list(self.entries)

    def values(self) -> dict[str, np.ndarray]:
        return {k: e.value for k, e in self.entries.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, e in self.entries.items():
            out.entries[k] = ParamEntry(e.value.copy(), e.m.copy(), e.v.copy(), e.step)
        return out


def _float_dtype(value) -> np.dtype:
    dt = np.asarray(value).dtype
    return dt if dt in (np.float32, np.float64) else np.dtype(np.float64)


def init_params(stack: list[LayerSpec], rng: np.random.Generator,
                store: ParamStore | None = None, dtype=np.float64) -> ParamStore:
    """Glorot-uniform weights, zero biases, for every parametric layer."""
    store = ParamStore() if store is None else store
    for layer in stack:
        if layer.kind == "dense":
            n_in, n_out = layer.dims
            lim = np.sqrt(6.0 / (n_in + n_out))
            store.add(f"{layer.name}.W", rng.uniform(-lim, lim, size=(n_out, n_in)), dtype)
            store.add(f"{layer.name}.b", np.zeros(n_out), dtype)
        elif layer.kind == "conv2d":
            c_in, c_out = layer.dims
            fan_in, fan_out = 9 * c_in, 9 * c_out
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            store.add(f"{layer.name}.W", rng.uniform(-lim, lim, size=(c_out, 3, 3, c_in)), dtype)
            store.add(f"{layer.name}.b", np.zeros(c_out), dtype)
    return store


def _im2col(x: np.ndarray) -> np.ndarray:
    # (N, H, W, C) -> (N, H, W, 3, 3, C) with zero padding 1
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _conv_input_grad(g: np.ndarray, W: np.ndarray) -> np.ndarray:
    # full correlation of the output gradient with the flipped kernel
    n, h, w, c_out = g.shape
    flipped = W[:, ::-1, ::-1, :].transpose(1, 2, 0, 3).reshape(9 * c_out, -1)
    return (_im2col(g).reshape(n * h * w, 9 * c_out) @ flipped).reshape(n, h, w, W.shape[3])


def _check_input(i: int, layer: LayerSpec, x: np.ndarray) -> None:
    if layer.kind == "dense" and (x.ndim != 2 or x.shape[1] != layer.dims[0]):
        raise ConfigError(f"layer {i} ({layer.name}): expected (N, {layer.dims[0]}), got {x.shape}")
    if layer.kind == "conv2d" and (x.ndim != 4 or x.shape[3] != layer.dims[0]):
        raise ConfigError(f"layer {i} ({layer.name}): expected (N, H, W, {layer.dims[0]}), got {x.shape}")


def forward(stack: list[LayerSpec], params: ParamStore, x: np.ndarray):
    """Run the stack on a batch. Returns (output, tape).

    A dense-first stack also accepts a single unbatched vector; the output
    is then unbatched as well.
    """
    x = np.asarray(x, dtype=_float_dtype(x))
    squeeze = False
    if stack and stack[0].kind == "dense" and x.ndim == 1:
        x, squeeze = x[None, :], True
    tape = []
    for i, layer in enumerate(stack):
        _check_input(i, layer, x)
        if layer.kind == "dense":
            W, b = params[f"{layer.name}.W"], params[f"{layer.name}.b"]
            tape.append(x)
            x = x @ W.T
            x += b
        elif layer.kind == "conv2d":
            W, b = params[f"{layer.name}.W"], params[f"{layer.name}.b"]
            cols = _im2col(x)
            tape.append(cols)
            n, h, w = x.shape[:3]
            x = cols.reshape(n * h * w, 9 * layer.dims[0]) @ W.reshape(W.shape[0], -1).T
            x += b
            x = x.reshape(n, h, w, layer.dims[1])
        elif layer.kind == "relu":
            mask = x > 0
            tape.append(mask)
            # earlier layers never cache their outputs, so in place is safe past layer 0
            x = np.maximum(x, 0.0, out=x if i > 0 else None)
        else:
            tape.append(x.shape)
            x = x.reshape(x.shape[0], int(np.prod(x.shape[1:])))
    if squeeze:
        x = x[0]
    return x, (squeeze, tape)


def backward(stack: list[LayerSpec], params: ParamStore, tape, grad_output: np.ndarray,
             need_input_grad: bool = True):
    """Backpropagate ``grad_output`` through the stack.

    Returns (param_grads, grad_input); gradients are summed over the batch.
    ``grad_input`` is None when ``need_input_grad`` is false.
    """
    squeeze, caches = tape
    if len(caches) != len(stack):
        raise ConfigError(f"tape has {len(caches)} entries for {len(stack)} layers")
    g = np.asarray(grad_output, dtype=_float_dtype(grad_output))
    if squeeze:
        g = g[None, :]
    grads: dict[str, np.ndarray] = {}
    for i in range(len(stack) - 1, -1, -1):
        layer, cache = stack[i], caches[i]
        if cache is None:
            raise ConfigError(f"missing tape entry for layer {i}")
        if layer.kind == "dense":
            W = params[f"{layer.name}.W"]
            grads[f"{layer.name}.W"] = g.T @ cache
            grads[f"{layer.name}.b"] = g.sum(axis=0)
            if i == 0 and not need_input_grad:
                g = None
                break
            g = g @ W
        elif layer.kind == "conv2d":
            W = params[f"{layer.name}.W"]
            n, h, w = cache.shape[:3]
            g2 = g.reshape(n * h * w, W.shape[0])
            grads[f"{layer.name}.W"] = (g2.T @ cache.reshape(n * h * w, 9 * W.shape[3])).reshape(W.shape)
            grads[f"{layer.name}.b"] = g2.sum(axis=0)
            if i == 0 and not need_input_grad:
                g = None
                break
            g = _conv_input_grad(g, W)
        elif layer.kind == "relu":
            g = g * cache
        else:
            g = g.reshape(cache)
    if squeeze and g is not None:
        g = g[0]
    return dict(reversed(list(grads.items()))), g


def softmax_cross_entropy_rows(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over rows of ``logits`` (N, K) with integer targets.

    Returns (mean loss, grad wrt logits).
    """
    logits = np.asarray(logits, dtype=_float_dtype(logits))
    if logits.ndim != 2 or logits.shape[1] == 0:
        raise ConfigError("softmax_cross_entropy needs at least one class")
    targets = np.asarray(targets)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    logp = z - logsumexp[:, None]
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    return loss, grad / n


def softmax_cross_entropy(logits: np.ndarray, target: int):
    """-log softmax(logits)[target] and its gradient, for one logit vector."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise ConfigError("softmax_cross_entropy needs a non-empty logit vector")
    if not 0 <= target < logits.size:
        raise ConfigError(f"target {target} out of range for {logits.size} classes")
    loss, grad = softmax_cross_entropy_rows(logits[None, :], np.array([target]))
    return float(loss), grad[0]


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """Bias-corrected Adam update, in place, on the entries named in ``grads``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
    for name, g in grads.items():
        e = store.entries[name]
        if g.shape != e.value.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {e.value.shape} for {name}")
        e.step += 1
        e.m = beta1 * e.m + (1.0 - beta1) * g
        e.v = beta2 * e.v + (1.0 - beta2) * (g * g)
        denom = np.sqrt(e.v / (1.0 - beta2 ** e.step))
        denom += eps
        e.value = e.value - (lr / (1.0 - beta1 ** e.step)) * e.m / denom
    return store


def numeric_gradient(fn: Callable[[], float], arr: np.ndarray, index: tuple, eps: float) -> float:
    """Central difference of ``fn`` wrt one element of ``arr`` (perturbed in place)."""
    old = arr[index]
    arr[index] = old + eps
    fp = fn()
    arr[index] = old - eps
    fm = fn()
    arr[index] = old
    return (fp - fm) / (2.0 * eps)


def relative_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    """|a - n| / (|a| + |n|), with the denominator floored so that exactly-zero
    gradients (e.g. a bias the loss is invariant to) are judged by round-off."""
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), floor)


def check_gradients(loss_fn: Callable[[], float], params: ParamStore,
                    analytic: dict[str, np.ndarray], eps: float = 1e-5,
                    max_per_param: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Max relative error between ``analytic`` grads and central differences.

    ``loss_fn`` must read the current parameter values from ``params``.
    With ``max_per_param`` only a random subset of entries per array is probed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for name, grad in analytic.items():
        arr = params.entries[name].value
        flat_idx = np.arange(arr.size)
        if max_per_param is not None and arr.size > max_per_param:
            flat_idx = rng.choice(arr.size, size=max_per_param, replace=False)
        for k in flat_idx:
            idx = np.unravel_index(k, arr.shape)
            num = numeric_gradient(loss_fn, arr, idx, eps)
            worst = max(worst, relative_error(float(grad[idx]), num))
    return worst


def finite_diff_check(stack: list[LayerSpec], params: ParamStore, x: np.ndarray,
                      eps: float = 1e-5, head: np.ndarray | None = None,
                      max_per_param: int | None = None, seed: int = 0) -> float:
    """Gradient check of the stack under a fixed random linear scalar head."""
    rng = np.random.default_rng(seed)
    out, tape = forward(stack, params, x)
    if head is None:
        head = rng.standard_normal(out.shape)
    grads, _ = backward(stack, params, tape, head)

    def loss() -> float:
        return float(np.sum(forward(stack, params, x)[0] * head))

    return check_gradients(loss, params, grads, eps, max_per_param, rng)


def save_checkpoint(path, params: ParamStore, rng_seed: int, extra: dict | None = None) -> None:
    doc = {"format": CKPT_FORMAT, "version": CKPT_VERSION, "rng_seed": int(rng_seed)}
    if extra:
        doc["meta"] = extra
    doc["params"] = {
        name: {"shape": list(e.value.shape), "dtype": e.value.dtype.name,
               "data": [float(v) for v in e.value.ravel()]}
        for name, e in params.entries.items()
    }
    # float repr is the shortest string that round-trips exactly
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CKPT_FORMAT or doc.get("version") != CKPT_VERSION:
        raise ConfigError(f"{path}: not a {CKPT_FORMAT} v{CKPT_VERSION} checkpoint")
    store = ParamStore()
    for name, item in doc["params"].items():
        data = np.array(item["data"], dtype=np.float64).reshape(item["shape"])
        store.add(name, data, np.dtype(item.get("dtype", "float64")))
    header = {k: v for k, v in doc.items() if k != "params"}
    return store, header
