"""Minimal reverse-mode automatic differentiation on top of numpy.

Operations are recorded onto the innermost active :class:`Tape`.  Leaf
tensors created with ``requires_grad=True`` accumulate gradients in
``.grad``; intermediate gradients live only for the duration of a backward
pass.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(linear(x, w, b))
    tape.backward(loss)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Raised for misuse of the backward machinery."""


class Tensor:
    """A numpy array that can take part in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


@dataclass
class Tape:
    """Ordered record of the differentiable operations of one forward pass."""

    training: bool = True
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, node: Node) -> None:
        node.out.node_id = len(self.nodes)
        self.nodes.append(node)

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
        backward(loss, self, params)


_TAPES: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(out, tuple(inputs), backward_fn, op))
    return out


def backward(loss: Tensor, tape: Tape | None = None, params: Iterable[Tensor] | None = None) -> None:
    """Propagate d(loss)/d(.) to every leaf recorded on ``tape``.

    Leaf gradients accumulate across calls; callers reset them between
    optimisation steps.  Any tensor in ``params`` that the loss does not
    reach receives an all-zero gradient.
    """
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise GradientError("no tape to differentiate")
    if loss.data.size != 1:
        raise GradientError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.node_id is None and loss.requires_grad:
        _accumulate_leaf(loss, grads[id(loss)])
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node_id is None:
                _accumulate_leaf(t, gi)
            else:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(np.broadcast_to(x.data, shape), (x,),
                 lambda g: (_unbroadcast(g, x.shape),), "broadcast")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    sizes = [x.shape[ax] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([x.data for x in xs], axis=ax), xs, bw, "concat")


def take(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """``x[..., index, ...]`` along ``axis`` for an integer index array."""
    ax = axis % x.ndim
    idx = np.asarray(index)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None),) * ax + (idx,), g)
        return (gx,)

    return _make(np.take(x.data, idx, axis=ax), (x,), bw, "take")


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Batched gather: ``out[b, i, m] = x[b, index[b, i, m]]``.

    ``x`` is ``[B, N, C]`` and ``index`` is ``[B, N, k]``; the result is
    ``[B, N, k, C]``.  The gradient is scattered back by index.
    """
    B, N, C = x.shape
    idx = np.asarray(index)
    if idx.shape[0] != B:
        raise ShapeError(f"gather: index batch {idx.shape} vs features {x.shape}")
    flat = (idx + (np.arange(B) * N)[:, None, None]).reshape(-1)
    src = x.data.reshape(B * N, C)

    def bw(g):
        gx = np.zeros((B * N, C), dtype=g.dtype)
        np.add.at(gx, flat, g.reshape(-1, C))
        return (gx.reshape(B, N, C),)

    return _make(src[flat].reshape(idx.shape + (C,)), (x,), bw, "gather")


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Maximum over ``axis``; ties send the gradient to the lowest index."""
    ax = axis % x.ndim
    if x.shape[ax] == 0:
        raise ShapeError(f"reduce_max over empty axis {ax} of {x.shape}")
    arg = np.argmax(x.data, axis=ax)
    out = np.take_along_axis(x.data, np.expand_dims(arg, ax), axis=ax).squeeze(ax)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return _make(out, (x,), bw, "max")


def safe_norm(x: Tensor, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm with a zero subgradient at the origin."""
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(n > 0, x.data / np.where(n > 0, n, 1.0), 0.0)
        return (g * unit,)

    return _make(n if keepdims else n.squeeze(axis), (x,), bw, "norm")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity (the same object) outside training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``."""
    d_in = x.shape[-1]
    if weight.ndim != 2 or weight.shape[0] != d_in:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out.reshape(lead + (weight.shape[1],)), inputs, bw, "linear")


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer (not trainable)."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool) -> Tensor:
    """Normalise each channel (last axis) over every other position.

    In training mode the batch statistics are used and the running
    statistics are updated in place (unbiased variance, as is customary);
    in evaluation mode the running statistics are used.
    """
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    m = x.data.size // C
    if not training:
        inv = 1.0 / np.sqrt(state.var + state.eps)
        scale = (gamma.data * inv).astype(x.dtype)
        xhat = (x.data - state.mean) * inv
        out = xhat * gamma.data + beta.data

        def bw_eval(g):
            return g * scale, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes)

        return _make(out.astype(x.dtype), (x, gamma, beta), bw_eval, "batch_norm")

    if m < 2:
        raise ValueError(f"batch_norm needs at least 2 values per channel in training, got {m}")
    mu = x.data.mean(axis=axes)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=axes)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    mom = state.momentum
    state.mean = (1 - mom) * state.mean + mom * mu
    state.var = (1 - mom) * state.var + mom * var * (m / (m - 1))

    def bw(g):
        gg = np.sum(g * xhat, axis=axes)
        gb = np.sum(g, axis=axes)
        gx = (gamma.data * inv / m) * (m * g - gb - xhat * gg)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "batch_norm")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``.

    ``logits`` has classes on the last axis; every other axis is batch.
    """
    labels = np.asarray(labels)
    C = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        bad = labels[(labels < 0) | (labels >= C)][0]
        raise ValueError(f"label {bad} out of range [0, {C})")
    logp = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    n = labels.size
    return mul(reduce_sum(mul(logp, onehot)), -1.0 / n)


# ---------------------------------------------------------------------------
# Parameters and optimisation
# ---------------------------------------------------------------------------


class ParamSet:
    """Named trainable tensors with their momentum buffers."""

    def __init__(self, params: Iterable[tuple[str, Tensor]] = ()):
        self._params: dict[str, Tensor] = {}
        self.momentum: dict[str, np.ndarray] = {}
        for name, p in params:
            self.add(name, p)

    def add(self, name: str, p: Tensor) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._params[name] = p
        if p.requires_grad:
            self.momentum[name] = np.zeros_like(p.data)
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def num_scalars(self) -> int:
        return int(sum(p.data.size for p in self._params.values() if p.requires_grad))


def sgd_momentum_step(params: ParamSet, lr: float, momentum: float = 0.9) -> None:
    """Heavy-ball SGD: ``v <- momentum*v + g``; ``p <- p - lr*v``."""
    missing = [n for n, p in params if p.requires_grad and p.grad is None]
    if missing:
        raise GradientError(f"no gradient for parameters: {', '.join(missing)}")
    for name, p in params:
        if not p.requires_grad:
            continue
        v = params.momentum[name]
        v *= momentum
        v += p.grad
        if lr != 0.0:
            p.data -= lr * v


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_difference_check(fn: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6,
                            coords: int | Sequence[int] | None = None, floor: float | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` must map ``x`` to a scalar deterministically; ``x`` is perturbed
    in place, so ``fn`` may also close over ``x`` (e.g. a model parameter)
    and ignore its argument.  ``coords`` is a count of randomly sampled flat
    indices, an explicit index list, or ``None`` for every coordinate.

    The error at each coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    gradients smaller than ``floor`` are therefore compared absolutely,
    which keeps exact zeros (e.g. a bias feeding batch norm) from turning
    central-difference round-off into a relative error of one.  The default
    floor is ``1e-4 * max(1, |fn(x)|)`` since that round-off grows with the
    magnitude of the function value.
    """
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    was = x.requires_grad
    x.requires_grad = True
    saved_grad = x.grad
    x.grad = None
    try:
        with Tape(training=False) as tape:
            y = fn(x)
        base = float(y.data)
        if float(fn(x).data) != base:
            raise GradientError("function is not deterministic under repeated evaluation")
        backward(y, tape, params=[x])
        analytic = x.grad.reshape(-1).copy()
        if floor is None:
            floor = 1e-4 * max(1.0, abs(base))
    finally:
        x.grad = saved_grad
        x.requires_grad = was

    size = x.data.size
    if coords is None:
        idx = np.arange(size)
    elif isinstance(coords, (int, np.integer)):
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = rng.choice(size, size=min(int(coords), size), replace=False)
    else:
        idx = np.asarray(coords, dtype=np.int64)

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(x).data)
        flat[i] = orig - step
        fm = float(fn(x).data)
        flat[i] = orig
        numeric = (fp - fm) / (2 * step)
        a = analytic[i]
        denom = max(abs(a), abs(numeric), floor)
        worst = max(worst, abs(a - numeric) / denom)
    return worst
