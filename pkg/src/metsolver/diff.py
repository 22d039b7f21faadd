"""Minimal dense-tensor engine: reverse-mode autodiff, AdamW, lr schedules.

Define-by-run: every op closes over its inputs and records a pullback;
backward() walks the graph from the loss in reverse topological order.
All data is float64.  A `no_grad()` context skips graph recording for
inference-only forwards.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import DisconnectedGraph, ShapeMismatch

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_pullback")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._pullback = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    def item(self) -> float:
        return float(self.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents, pullback):
    if _grad_enabled and any(p.requires_grad or p._pullback is not None for p in parents):
        out._parents = tuple(parents)
        out._pullback = pullback
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- ops ---------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def pull(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _record(out, (a, b), pull)


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def pull(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), pull)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data * c)

    def pull(g):
        _accumulate(a, g * c)

    return _record(out, (a,), pull)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def pull(g):
        if b.data.ndim == 1:
            _accumulate(a, _unbroadcast(np.multiply.outer(g, b.data), a.shape))
            _accumulate(b, _unbroadcast((a.data * np.expand_dims(g, -1)).reshape(-1, b.data.shape[0]).sum(0), b.shape))
            return
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accumulate(a, _unbroadcast(ga, a.shape))
        _accumulate(b, _unbroadcast(gb, b.shape))

    return _record(out, (a, b), pull)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)

    def pull(g):
        _accumulate(a, g * (1.0 - y * y))

    return _record(out, (a,), pull)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y)

    def pull(g):
        _accumulate(a, g * y * (1.0 - y))

    return _record(out, (a,), pull)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)

    def pull(g):
        _accumulate(a, g * y)

    return _record(out, (a,), pull)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))

    def pull(g):
        _accumulate(a, g / a.data)

    return _record(out, (a,), pull)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def pull(g):
        _accumulate(a, g * (a.data > 0))

    return _record(out, (a,), pull)


def softmax(a) -> Tensor:
    """Softmax over the last axis; -inf entries give exact zeros."""
    a = _as_tensor(a)
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def pull(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        _accumulate(a, (g - dot) * y)

    return _record(out, (a,), pull)


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    y = shifted - lse
    out = Tensor(y)

    def pull(g):
        _accumulate(a, g - np.exp(y) * np.sum(g, axis=-1, keepdims=True))

    return _record(out, (a,), pull)


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where mask is True by a constant (usually -inf)."""
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    out = Tensor(np.where(mask, value, a.data))

    def pull(g):
        _accumulate(a, _unbroadcast(np.where(mask, 0.0, g), a.shape))

    return _record(out, (a,), pull)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def pull(g):
        n = a.data.shape[-1]
        _accumulate(gain, _unbroadcast(g * xhat, gain.shape))
        _accumulate(bias, _unbroadcast(g, bias.shape))
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * np.mean(gx * xhat, axis=-1, keepdims=True))
        _accumulate(a, dx)

    return _record(out, (a, gain, bias), pull)


def embedding(table, ids) -> Tensor:
    """Row lookup: table (V, d) indexed by an integer array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])

    def pull(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        _accumulate(table, acc)

    return _record(out, (table,), pull)


def concat(parts, axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def pull(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(sl)])

    return _record(out, tuple(parts), pull)


def slice_(a, key) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data[key])

    def pull(g):
        acc = np.zeros_like(a.data)
        acc[key] = g
        _accumulate(a, acc)

    return _record(out, (a,), pull)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def pull(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _record(out, (a,), pull)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.swapaxes(a.data, ax1, ax2))

    def pull(g):
        _accumulate(a, np.swapaxes(g, ax1, ax2))

    return _record(out, (a,), pull)


def sum_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis))

    def pull(g):
        if axis is None:
            _accumulate(a, np.full_like(a.data, g))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _record(out, (a,), pull)


def mean_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def gather_log_prob(logp, ids) -> Tensor:
    """Select logp[..., ids[...]] along the last axis (one id per row)."""
    logp = _as_tensor(logp)
    ids = np.asarray(ids, dtype=np.int64)
    idx = np.indices(ids.shape)
    out = Tensor(logp.data[(*idx, ids)])

    def pull(g):
        acc = np.zeros_like(logp.data)
        np.add.at(acc, (*idx, ids), g)
        _accumulate(logp, acc)

    return _record(out, (logp,), pull)


def backward(loss: Tensor):
    """Gradient of a scalar loss w.r.t. every reachable parameter.

    Clears the recorded graph as it goes; raises DisconnectedGraph when no
    trainable tensor is reachable from the loss.
    """
    if loss.data.size != 1:
        raise ShapeMismatch("backward expects a scalar loss")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    if not any(n.requires_grad for n in topo):
        raise DisconnectedGraph("loss does not reach any trainable parameter")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._pullback is not None and node.grad is not None:
            node._pullback(node.grad)
        node._parents = ()
        node._pullback = None
        if not node.requires_grad:
            node.grad = None


# --- parameters and optimization --------------------------------------------


class ParameterStore:
    """Named trainable tensors plus per-parameter AdamW moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def reset_moments(self):
        for k in self._m:
            self._m[k][:] = 0.0
            self._v[k][:] = 0.0

    def count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for k, t in self.params.items():
            if k not in arrays:
                raise KeyError(f"missing parameter {k!r}")
            if arrays[k].shape != t.data.shape:
                raise ShapeMismatch(f"parameter {k!r}: {arrays[k].shape} != {t.data.shape}")
            t.data = arrays[k].astype(np.float64).copy()
            self._m[k][:] = 0.0
            self._v[k][:] = 0.0

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for k, t in self.params.items():
            out.add(k, t.data.copy())
        return out


@dataclass(frozen=True)
class Schedule:
    """Learning rate: linear warmup to base_lr, then decay.

    decay "inv_sqrt" gives base_lr * sqrt(warmup/step) past warmup (the two
    laws meet at the warmup boundary); "constant" holds base_lr.  Steps are
    1-based.
    """

    base_lr: float
    warmup_steps: int = 0
    decay: str = "inv_sqrt"

    def __call__(self, step: int) -> float:
        step = max(int(step), 1)
        if self.warmup_steps > 0 and step <= self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        if self.decay == "constant":
            return self.base_lr
        if self.decay == "inv_sqrt":
            ref = max(self.warmup_steps, 1)
            return self.base_lr * math.sqrt(ref / step)
        raise ValueError(f"unknown decay law {self.decay!r}")


def adamw_step(
    store: ParameterStore,
    schedule: Schedule,
    step: int,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One decoupled-weight-decay Adam update; parameters without gradients stay put."""
    lr = schedule(step)
    for name, t in store.params.items():
        if t.grad is None:
            continue
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1 - beta1) * t.grad
        v *= beta2
        v += (1 - beta2) * t.grad**2
        mhat = m / (1 - beta1**step)
        vhat = v / (1 - beta2**step)
        t.data -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * t.data)


def finite_difference_check(loss_fn, store: ParameterStore, eps: float = 1e-5, max_per_param: int = 64, seed: int = 0) -> float:
    """Max mixed relative error |ad - fd| / max(|ad|, |fd|, 1) over sampled entries.

    Central differences with the given eps; at most max_per_param entries per
    tensor are probed (seeded choice) so large models stay checkable.
    """
    store.zero_grad()
    backward(loss_fn())
    grads = {k: t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for k, t in store.params.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for name, t in store.params.items():
            flat = t.data.reshape(-1)
            n = flat.size
            picks = np.arange(n) if n <= max_per_param else rng.choice(n, size=max_per_param, replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(loss_fn().data)
                flat[i] = orig - eps
                lo = float(loss_fn().data)
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                ad = grads[name].reshape(-1)[i]
                err = abs(ad - fd) / max(abs(ad), abs(fd), 1.0)
                worst = max(worst, err)
    return worst
