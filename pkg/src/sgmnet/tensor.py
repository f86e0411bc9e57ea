"""Dense float32 tensors with a reverse-mode gradient tape.

Every differentiable op builds its output with :func:`_record`, attaching the
parent tensors and a closure that maps the output adjoint to parent adjoints.
``Tensor.backward`` linearises the reachable graph into a :class:`Tape`
(topological order), replays the adjoints in reverse and then drops the graph
references, so a tape lives for exactly one forward/backward pass.
"""

from __future__ import annotations

import contextlib
import threading
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when operand extents are incompatible."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class _Node:
    __slots__ = ("parents", "backward_fn", "op")

    def __init__(self, parents: tuple, backward_fn: Callable, op: str):
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: _Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        tape = Tape.from_output(self)
        tape.replay(self, np.asarray(grad, dtype=DTYPE))
        tape.release()

    # -- operator sugar ------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


class Tape:
    """Topologically ordered record of the ops reachable from one output."""

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.parents:
                    if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def replay(self, out: Tensor, seed: np.ndarray) -> None:
        adjoints: dict[int, np.ndarray] = {id(out): seed}
        for t in reversed(self.entries):
            g = adjoints.pop(id(t), None)
            if g is None:
                continue
            if t._node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            t.grad = g
            parent_grads = t._node.backward_fn(g)
            for p, pg in zip(t._node.parents, parent_grads):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=DTYPE)
                if pg.shape != p.shape:
                    raise DimensionError(f"{t._node.op}: adjoint shape {pg.shape} != input shape {p.shape}")
                key = id(p)
                adjoints[key] = adjoints[key] + pg if key in adjoints else pg

    def release(self) -> None:
        for t in self.entries:
            t._node = None
        self.entries = []

    def ops(self) -> list[str]:
        return [t._node.op for t in self.entries if t._node is not None]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence, backward_fn: Callable, op: str) -> Tensor:
    track = is_grad_enabled() and any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._node = _Node(tuple(parents), backward_fn, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)), "div")


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    return _record(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# -- reductions and shape ----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    # float64 accumulation makes the result independent of summation order in practice
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _record(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _record(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _record(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def expand_dims(a: Tensor, axis: int) -> Tensor:
    return reshape(a, np.expand_dims(a.data, axis).shape)


def getitem(a: Tensor, idx) -> Tensor:
    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([expand_dims(as_tensor(t), axis) for t in tensors], axis=axis)


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        return _matmul_shared(a, b)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _record(out, (a, b), bw, "matmul")


def _matmul_shared(a: Tensor, b: Tensor) -> Tensor:
    # (..., K) @ (K, N): one flat GEMM each way instead of a broadcast loop
    K, N = b.shape
    flat = a.data.reshape(-1, K)
    out = (flat @ b.data).reshape(a.shape[:-1] + (N,))

    def bw(g):
        g2 = g.reshape(-1, N)
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = flat.T @ g2 if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalisation / probability ------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _record(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (B, C)."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(len(labels)), labels))
    return mul(mean(picked), -1.0)


def mse(pred: Tensor, target) -> Tensor:
    diff = sub(pred, as_tensor(target))
    return mean(mul(diff, diff))


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine along ``axis``; a zero-norm operand yields 0 (with a warning) and no gradient."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = np.broadcast_arrays(a.data, b.data)
    na = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=axis, keepdims=True))
    dot = (ad * bd).sum(axis=axis, keepdims=True)
    degenerate = (na == 0) | (nb == 0)
    if degenerate.any():
        warnings.warn("cosine similarity of a zero-norm vector treated as 0", RuntimeWarning, stacklevel=2)
    safe_a = np.where(degenerate, 1.0, na)
    safe_b = np.where(degenerate, 1.0, nb)
    cos = np.where(degenerate, 0.0, dot / (safe_a * safe_b))

    def bw(g):
        g = np.where(degenerate, 0.0, np.expand_dims(g, axis))
        ga = g * (bd / (safe_a * safe_b) - cos * ad / (safe_a * safe_a))
        gb = g * (ad / (safe_a * safe_b) - cos * bd / (safe_b * safe_b))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(np.squeeze(cos, axis=axis), (a, b), bw, "cosine")


# -- convolutional primitives -----------------------------------------------------

def _as_batch(x: Tensor, op: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{op}: expected C×H×W or B×C×H×W input, got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """3×3 cross-correlation, stride 1, zero padding 1 (spatial extent preserved)."""
    x, squeeze = _as_batch(as_tensor(x), "conv2d")
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: kernel must be C_out×C_in×3×3, got {kernel.shape}")
    B, C, H, W = x.shape
    C_out = kernel.shape[0]
    if kernel.shape[1] != C:
        raise DimensionError(f"conv2d: input has {C} channels but kernel {kernel.shape} expects {kernel.shape[1]}")
    # channel-last im2col: cols[b, y, x, i, j, c] = xpad[b, y+i, x+j, c]
    xp = np.zeros((B, H + 2, W + 2, C), dtype=DTYPE)
    xp[:, 1:-1, 1:-1, :] = x.data.transpose(0, 2, 3, 1)
    cols = np.empty((B, H, W, 3, 3, C), dtype=DTYPE)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, i, j, :] = xp[:, i:i + H, j:j + W, :]
    cols = cols.reshape(B * H * W, 9 * C)
    kmat = np.ascontiguousarray(kernel.data.transpose(0, 2, 3, 1)).reshape(C_out, 9 * C)
    out = cols @ kmat.T
    if bias is not None:
        out += bias.data
    # NCHW view over channel-last memory; downstream elementwise ops keep that layout
    out = out.reshape(B, H, W, C_out).transpose(0, 3, 1, 2)

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * H * W, C_out)
        gk = gb = gx = None
        if kernel.requires_grad:
            gk = (gm.T @ cols).reshape(C_out, 3, 3, C).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        if x.requires_grad:
            gcols = (gm @ kmat).reshape(B, H, W, 3, 3, C)
            gxp = np.zeros((B, H + 2, W + 2, C), dtype=DTYPE)
            for i in range(3):
                for j in range(3):
                    gxp[:, i:i + H, j:j + W, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2)
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    y = _record(out, parents, bw, "conv2d")
    return reshape(y, y.shape[1:]) if squeeze else y


def maxpool2(x: Tensor) -> Tensor:
    """Non-overlapping 2×2 max pool; ties route the gradient to the first element in scan order."""
    x, squeeze = _as_batch(as_tensor(x), "maxpool2")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"maxpool2: spatial extents must be even, got {H}×{W}")
    d = x.data
    quads = (d[:, :, 0::2, 0::2], d[:, :, 0::2, 1::2], d[:, :, 1::2, 0::2], d[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def bw(g):
        gx = np.zeros_like(d)
        taken = np.zeros(out.shape, dtype=bool)
        for q, (r, c) in zip(quads, ((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (q == out) & ~taken
            taken |= hit
            gx[:, :, r::2, c::2] = g * hit
        return (gx,)

    y = _record(out, (x,), bw, "maxpool2")
    return reshape(y, y.shape[1:]) if squeeze else y


class RunningStats:
    """Batchnorm running mean/variance buffers (not trainable)."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels, dtype=DTYPE)
        self.var = np.ones(channels, dtype=DTYPE)
        self.momentum = momentum


BN_EPS = 1e-5


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, train: bool,
                relu_after: bool = False) -> Tensor:
    """Per-channel normalisation of a B×C×H×W tensor (also accepts C×H×W).

    ``relu_after`` fuses a ReLU into the same tape entry.
    """
    x, squeeze = _as_batch(as_tensor(x), "batchnorm2d")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batchnorm2d: affine params {gamma.shape}/{beta.shape} vs {C} channels")
    g4 = gamma.data.reshape(1, C, 1, 1)
    if train:
        n = B * H * W
        if n < 2:
            raise DimensionError("batchnorm2d: train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = stats.momentum
        stats.mean = ((1 - m) * stats.mean + m * mu).astype(DTYPE)
        stats.var = ((1 - m) * stats.var + m * var * n / (n - 1)).astype(DTYPE)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x.data - mu.reshape(1, C, 1, 1)) * inv.reshape(1, C, 1, 1)

        def bw(g):
            if relu_after:
                g = g * active
            gbeta = g.sum(axis=(0, 2, 3))
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            scale = (gamma.data * inv).reshape(1, C, 1, 1)
            gx = g - (gbeta / n).reshape(1, C, 1, 1)
            gx -= xhat * (ggamma / n).reshape(1, C, 1, 1)
            gx *= scale
            return gx, ggamma, gbeta
    else:
        inv = 1.0 / np.sqrt(stats.var + BN_EPS)
        xhat = (x.data - stats.mean.reshape(1, C, 1, 1)) * inv.reshape(1, C, 1, 1)

        def bw(g):
            if relu_after:
                g = g * active
            return (g * g4 * inv.reshape(1, C, 1, 1),
                    (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    out = xhat * g4 + beta.data.reshape(1, C, 1, 1)
    if relu_after:
        active = out > 0
        np.maximum(out, 0, out=out)
    y = _record(out.astype(DTYPE, copy=False), (x, gamma, beta), bw, "batchnorm2d")
    return reshape(y, y.shape[1:]) if squeeze else y


def parameters_checksum(tensors: Iterable[Tensor]) -> str:
    """Hex digest over the raw bytes of ``tensors`` (order-sensitive)."""
    import hashlib

    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
