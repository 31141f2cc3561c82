"""Minimal dense tensor with tape-based reverse-mode differentiation.

Only the operations the vision transformer needs are provided. Arrays are
numpy float32 by default; every op preserves the dtype of its inputs so the
gradient checker can run the same graph in float64.
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float32
LN_EPS = 1e-5
KL_EPS = 1e-7


class ShapeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class DataError(ValueError):
    pass


class ContractError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _lift(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype or DTYPE)


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Ordered record of differentiable ops executed while the tape is active.

    Use as a context manager; ops only record while some input requires grad.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad``; ``params`` the loss does
        not reach get zero gradients."""
        if loss.data.size != 1 or loss.ndim != 0:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever remains belongs to leaves
        leaves = _leaves(self.nodes)
        seen = {id(t) for t in leaves}
        leaves += [t for t in params if id(t) not in seen]
        for t in leaves:
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g if t.grad is None else t.grad + g
        self.clear()


def _leaves(nodes: Iterable[_Node]) -> list[Tensor]:
    produced = {id(n.output) for n in nodes}
    seen: set[int] = set()
    out = []
    for n in nodes:
        for t in n.inputs:
            if t.requires_grad and id(t) not in produced and id(t) not in seen:
                seen.add(id(t))
                out.append(t)
    return out


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape() -> Optional[GradTape]:
    tapes = _stack()
    return tapes[-1] if tapes else None


def _record(inputs: Sequence[Tensor], out_data: np.ndarray, backward: Callable) -> Tensor:
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(tuple(inputs), out, backward))
    return out


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    tape = current_tape()
    if tape is None:
        raise UsageError("backward called without an active GradTape")
    tape.backward(loss, params)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    return _record(
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _record(
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _record(
        (a, b),
        a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _record((a,), a.data * c, lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record((a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record((a,), np.log(a.data), lambda g: (g / a.data,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    dt = x.dtype.type
    inner = dt(_GELU_C) * (x + dt(0.044715) * x * x * x)
    t = np.tanh(inner)
    out = dt(0.5) * x * (dt(1.0) + t)

    def bw(g):
        dinner = dt(_GELU_C) * (dt(1.0) + dt(3 * 0.044715) * x * x)
        d = dt(0.5) * (dt(1.0) + t) + dt(0.5) * x * (dt(1.0) - t * t) * dinner
        return (g * d,)

    return _record((a,), out, bw)


# ---------------------------------------------------------------------------
# shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if b.ndim == 2 and a.ndim > 2:
            k, n = b.shape
            ga = np.matmul(g, b.data.T)
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record((a, b), out, bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _record((a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record((a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def index(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _record((a,), a.data[idx], bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record(tensors, out, lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None) -> Tensor:
    out = np.sum(a.data, axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)

    return _record((a,), np.asarray(out, dtype=a.data.dtype), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# fused numerics


def _stable_softmax(x: np.ndarray, temperature: float) -> np.ndarray:
    z = (x - x.max(axis=-1, keepdims=True)) / x.dtype.type(temperature)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``logits / temperature``."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    s = _stable_softmax(logits.data, temperature)
    inv_t = logits.data.dtype.type(1.0 / temperature)

    def bw(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot) * inv_t,)

    return _record((logits,), s, bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: last axis {d} vs gain {gain.shape} bias {bias.shape}")
    xd = x.data
    dt = xd.dtype.type
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = dt(1.0) / np.sqrt(var + dt(eps))
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record((x, gain, bias), out, bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    b, c = logits.shape
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        raise DataError(f"label out of range [0, {c}) at index {int(bad[0])}: {int(labels[bad[0]])}")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    nll = lse[:, 0] - x[rows, labels]
    out = np.asarray(nll.mean(), dtype=x.dtype)

    def bw(g):
        p = np.exp(x - lse)
        p[rows, labels] -= 1
        return (p * (g / b),)

    return _record((logits,), out, bw)


def _check_prob_rows(p: np.ndarray, what: str) -> None:
    s = p.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > 1e-4) or np.any(p < 0):
        raise ContractError(f"{what}: rows must be probability vectors (sums {s.min():.6f}..{s.max():.6f})")


def kl_div(p: Tensor, q: Tensor, eps: float = KL_EPS) -> Tensor:
    """Batch-mean KL(p || q) over rows, entries clamped to ``eps`` before the log."""
    if p.shape != q.shape or p.ndim != 2:
        raise ShapeError(f"kl_div shapes {p.shape} vs {q.shape}")
    _check_prob_rows(p.data, "kl_div p")
    _check_prob_rows(q.data, "kl_div q")
    b = p.shape[0]
    dt = p.data.dtype.type
    pc = np.maximum(p.data, dt(eps))
    qc = np.maximum(q.data, dt(eps))
    logratio = np.log(pc) - np.log(qc)
    out = np.asarray((p.data * logratio).sum() / dt(b), dtype=p.data.dtype)

    def bw(g):
        g = g / dt(b)
        gp = g * (logratio + np.where(p.data > eps, dt(1.0), p.data / dt(eps)))
        gq = -g * np.where(q.data > eps, p.data / qc, dt(0.0))
        return gp, gq

    return _record((p, q), out, bw)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar loss from the current contents of ``params``.
    With ``max_coords``, tensors larger than that are probed at a seeded
    random subset of that many coordinates; smaller ones are probed fully.
    """
    rng = np.random.default_rng(seed)
    params = list(params)
    for p in params:
        p.grad = None
    with GradTape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        af = a.reshape(-1)
        coords = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            an = float(af[i])
            err = abs(an - num) / max(abs(an), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
