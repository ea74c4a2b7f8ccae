"""Tape-based reverse-mode automatic differentiation over numpy float64 arrays.

Every differentiable op appends one record to the active :class:`Tape`; records
are appended in execution order, so the tape is topologically sorted by
construction and :func:`backward` is a single reverse sweep.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class Tensor:
    """Float64 array with an optional gradient buffer.

    ``grad`` is populated only for leaves (``requires_grad`` and not produced
    by a recorded op), which in practice means parameters and inputs that a
    caller explicitly marked.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        d = np.asarray(data, dtype=DTYPE)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = d if d.flags.c_contiguous else np.ascontiguousarray(d)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of the differentiable ops executed while it was active."""

    nodes: list[Node] = field(default_factory=list)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
        self.nodes.append(Node(tuple(inputs), output, backward_fn, op))

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)


_DEFAULT_TAPE = Tape()
_TAPE_STACK: list[Tape] = []
_GRAD_ENABLED = [True]


def active_tape() -> Tape:
    return _TAPE_STACK[-1] if _TAPE_STACK else _DEFAULT_TAPE


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        active_tape().record(op, inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` and consume the tape."""
    tape = tape if tape is not None else active_tape()
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not tape.nodes:
        raise RuntimeError("backward called on an empty tape")
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    for node in reversed(tape.nodes):
        g = adjoints.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = adjoints.get(key)
                adjoints[key] = gi if prev is None else prev + gi
    tape.reset()


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; values below ``floor`` are clamped (zero gradient there)."""
    xd = x.data
    if floor > 0.0:
        mask = xd >= floor
        safe = np.where(mask, xd, floor)
        return _make(np.log(safe), (x,), lambda g: (np.where(mask, g / safe, 0.0),), "log")
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    _kink_probe(xd)
    mask = xd > 0
    # xd * mask keeps NaN visible; np.where would silently map it to 0
    return _make(xd * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xd = x.data
    _kink_probe(xd)
    scale = np.where(xd > 0, 1.0, slope)
    return _make(xd * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def _check_axis(x: Tensor, axis: int) -> None:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")


# ----------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    n = x.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(np.asarray(x.data.mean(axis=axis)), (x,), bw, "mean")


# ------------------------------------------------------------ shape plumbing


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def take(x: Tensor, index) -> Tensor:
    """Select rows of the leading axis (integer index array or slice)."""
    shape = x.shape
    idx = index if isinstance(index, slice) else np.asarray(index, dtype=np.intp)

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        if isinstance(idx, slice):
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), bw, "take")


# --------------------------------------------------------------------- affine


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with x [N,D], weight [D,O], bias [O]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match {weight.shape[1]} outputs")
    xd, wd = x.data, weight.data
    return _make(xd @ wd + bias.data, (x, weight, bias),
                 lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)), "linear")


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integral output size: ({size} + 2*{pad} - {k}) / {stride} + 1 "
            f"= {span / stride + 1:g}")
    return span // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp [N,C,Hp,Wp] -> view [N,C,Ho,Wo,kh,kw]
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _corr(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Cross-correlate x [N,C,H,W] with w [F,C,kh,kw] -> [N,F,Ho,Wo]."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _windows(xp, kh, kw, stride, ho, wo).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(f, -1).T
    return out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)


def _corr_adjoint_input(g: np.ndarray, w: np.ndarray, in_hw: tuple[int, int],
                        stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`_corr` w.r.t. its input: g [N,F,Ho,Wo] -> [N,C,H,W]."""
    n, f, ho, wo = g.shape
    _, c, kh, kw = w.shape
    h, wd = in_hw
    # [N,Ho,Wo,F] @ [F, C*kh*kw]
    cols = (g.transpose(0, 2, 3, 1).reshape(-1, f) @ w.reshape(f, -1))
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * (ho - 1) + 1 : stride,
               j : j + stride * (wo - 1) + 1 : stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return xp[:, :, pad : pad + h, pad : pad + wd]


def _corr_adjoint_kernel(x: np.ndarray, g: np.ndarray, ksize: tuple[int, int],
                         stride: int, pad: int) -> np.ndarray:
    """Gradient of :func:`_corr` w.r.t. the kernel: -> [F,C,kh,kw]."""
    n, c, _, _ = x.shape
    _, f, ho, wo = g.shape
    kh, kw = ksize
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _windows(xp, kh, kw, stride, ho, wo).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(n * ho * wo, c * kh * kw)
    gk = g.transpose(1, 0, 2, 3).reshape(f, -1) @ cols
    return gk.reshape(f, c, kh, kw)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x [N,C,H,W] with kernel [F,C,kh,kw] plus per-filter bias."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input C={x.shape[1]} vs kernel C={kernel.shape[1]}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d bias {bias.shape} does not match F={kernel.shape[0]}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    xd, kd = x.data, kernel.data
    out = _corr(xd, kd, stride, pad) + bias.data[None, :, None, None]

    def bw(g):
        return (_corr_adjoint_input(g, kd, xd.shape[2:], stride, pad),
                _corr_adjoint_kernel(xd, g, kd.shape[2:], stride, pad),
                g.sum(axis=(0, 2, 3)))

    return _make(out, (x, kernel, bias), bw, "conv2d")


def conv_transpose_output_size(size: int, k: int, stride: int, pad: int) -> int:
    out = (size - 1) * stride - 2 * pad + k
    if out < 1:
        raise ShapeError(f"conv2d_transpose output size {out} is not positive")
    return out


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor,
                     stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution: x [N,C,H,W], kernel [C,F,kh,kw] -> [N,F,H'',W''].

    Exactly the adjoint of :func:`conv2d` with the same kernel and geometry.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d_transpose expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[0]:
        raise ShapeError(
            f"conv2d_transpose channel mismatch: input C={x.shape[1]} vs kernel C={kernel.shape[0]}")
    if bias.shape != (kernel.shape[1],):
        raise ShapeError(f"conv2d_transpose bias {bias.shape} does not match F={kernel.shape[1]}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d_transpose needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    xd, kd = x.data, kernel.data
    kh, kw = kd.shape[2:]
    ho = conv_transpose_output_size(xd.shape[2], kh, stride, pad)
    wo = conv_transpose_output_size(xd.shape[3], kw, stride, pad)
    out = _corr_adjoint_input(xd, kd, (ho, wo), stride, pad) + bias.data[None, :, None, None]

    def bw(g):
        return (_corr(g, kd, stride, pad),
                _corr_adjoint_kernel(g, xd, (kh, kw), stride, pad),
                g.sum(axis=(0, 2, 3)))

    return _make(out, (x, kernel, bias), bw, "conv2d_transpose")


# -------------------------------------------------------------- normalization


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.9) -> "RunningStats":
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE), momentum)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
              train: bool = True, eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm over axes (N, H, W) of a 4-d input, or N of a 2-d one.

    Train mode normalizes with the biased batch variance and folds the batch
    statistics into ``stats`` as ``m <- momentum*m + (1-momentum)*batch``.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta {gamma.shape}/{beta.shape} vs C={c}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    xd = x.data
    if train:
        n = xd.size // c
        if n < 2:
            raise DegenerateBatchError(
                f"batchnorm in train mode needs N*H*W >= 2 per channel, got {n}")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = stats.momentum
        stats.mean = m * stats.mean + (1.0 - m) * mu
        stats.var = m * stats.var + (1.0 - m) * var
    else:
        mu, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = gd * xhat + beta.data.reshape(bshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * gd
        if train:
            n = xd.size // c
            dx = (inv.reshape(bshape) / n) * (
                n * gx - gx.sum(axis=axes, keepdims=True)
                - xhat * (gx * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = gx * inv.reshape(bshape)
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), bw, "batchnorm")


# ------------------------------------------------------------ kink monitoring

_KINK_LOG: list[list[np.ndarray]] = []


@contextlib.contextmanager
def record_kinks() -> Iterator[list[np.ndarray]]:
    """Collect the sign pattern of every relu/leaky-relu input inside the block.

    Finite-difference checks compare patterns at the two probe points; a change
    means the perturbation straddled a kink and the difference quotient is not
    a valid derivative estimate.
    """
    log_: list[np.ndarray] = []
    _KINK_LOG.append(log_)
    try:
        yield log_
    finally:
        _KINK_LOG.remove(log_)


def _kink_probe(xd: np.ndarray) -> None:
    if _KINK_LOG:
        _KINK_LOG[-1].append(xd > 0)
