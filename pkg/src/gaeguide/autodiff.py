"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation is a :class:`Function` subclass. Applying one
creates a new :class:`Tensor` that remembers the function instance and its
inputs, so the graph can be walked backwards from a scalar loss.

Forward kernels for matrix products go through ``np.einsum`` instead of BLAS:
BLAS picks different accumulation orders depending on the number of rows, and
the attack code relies on each row of a batch being computed bit-identically
no matter how many other rows share the call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class AutodiffError(Exception):
    """Base class for errors raised by the autodiff core."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op} produced non-finite values")


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(op)


class Tensor:
    """Dense array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_ctx")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _ctx: Function | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx = _ctx

    # -- basic properties --
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar --
    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __add__(self, other) -> Tensor:
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other) -> Tensor:
        return add(_lift(other, self), neg(self))

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return neg(self)

    def __truediv__(self, other: float) -> Tensor:
        return scale(self, 1.0 / float(other))

    def sum(self) -> Tensor:
        return sum_all(self)

    def mean(self) -> Tensor:
        return mean(self)

    def relu(self) -> Tensor:
        return relu(self)

    def log(self) -> Tensor:
        return log(self)

    def exp(self) -> Tensor:
        return exp(self)

    def softmax(self) -> Tensor:
        return softmax(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


class Function:
    """A differentiable operation; one instance per application."""

    name = "function"

    def __init__(self, *inputs: Tensor, **kwargs):
        self.inputs = inputs
        self.kwargs = kwargs

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs, **kwargs)
        out = fn.forward(*(t.data for t in inputs))
        _check_finite(cls.name, out)
        requires_grad = any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, dtype=out.dtype, _ctx=fn if requires_grad else None)

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(self.name, a.shape, b.shape)
        self.a, self.b = a, b
        return np.einsum("ij,jk->ik", a, b)

    def backward(self, grad):
        ga = np.einsum("ik,jk->ij", grad, self.b) if self.inputs[0].requires_grad else None
        gb = self.a.T @ grad if self.inputs[1].requires_grad else None
        return ga, gb


class Add(Function):
    """Elementwise add; the second operand may be a trailing-axis bias."""

    name = "add"

    def forward(self, a, b):
        if a.shape != b.shape and not (b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]):
            raise ShapeError(self.name, a.shape, b.shape)
        self.bias = a.shape != b.shape
        return a + b

    def backward(self, grad):
        gb = grad
        if self.bias:
            gb = grad.reshape(-1, grad.shape[-1]).sum(axis=0)
        return grad, gb


class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(self.name, a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Scale(Function):
    name = "scale"

    def forward(self, a):
        return a * self.kwargs["factor"]

    def backward(self, grad):
        return (grad * self.kwargs["factor"],)


class ReLU(Function):
    name = "relu"

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0).astype(a.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.mask,)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        with np.errstate(over="ignore"):
            self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    name = "log"

    def forward(self, a):
        if (a <= 0).any():
            raise NonFiniteError(self.name)
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class SumAll(Function):
    name = "sum"

    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, grad):
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, a):
        if a.size == 0:
            raise ShapeError(self.name, a.shape)
        self.shape = a.shape
        return np.asarray(a.mean(), dtype=a.dtype)

    def backward(self, grad):
        return (np.broadcast_to(grad / np.prod(self.shape), self.shape).copy(),)


class Reshape(Function):
    name = "reshape"

    def forward(self, a):
        self.shape = a.shape
        try:
            return a.reshape(self.kwargs["shape"])
        except ValueError:
            raise ShapeError(self.name, a.shape, tuple(self.kwargs["shape"])) from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    # log1p over the non-max terms keeps -log p accurate when p is close to 1
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    top = shifted.argmax(axis=-1)
    np.put_along_axis(e, top[..., None], 0.0, axis=-1)
    return shifted - np.log1p(e.sum(axis=-1, keepdims=True))


class Softmax(Function):
    name = "softmax"

    def forward(self, a):
        if a.ndim < 1 or a.shape[-1] == 0:
            raise ShapeError(self.name, a.shape)
        self.out = _softmax_rows(a)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=-1, keepdims=True)),)


class LogSoftmax(Function):
    name = "log_softmax"

    def forward(self, a):
        if a.ndim < 1 or a.shape[-1] == 0:
            raise ShapeError(self.name, a.shape)
        out = _log_softmax_rows(a)
        self.probs = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.probs * grad.sum(axis=-1, keepdims=True),)


class CrossEntropy(Function):
    """Softmax cross-entropy against integer labels, fused for stability."""

    name = "cross_entropy"

    def forward(self, logits):
        labels = self.kwargs["labels"]
        if logits.ndim != 2 or logits.shape[1] < 2 or labels.shape != (logits.shape[0],):
            raise ShapeError(self.name, logits.shape, labels.shape)
        logp = _log_softmax_rows(logits)
        self.probs = np.exp(logp)
        picked = logp[np.arange(len(labels)), labels]
        if self.kwargs["reduction"] == "sum":
            return np.asarray(-picked.sum(), dtype=logits.dtype)
        return np.asarray(-picked.mean(), dtype=logits.dtype)

    def backward(self, grad):
        labels = self.kwargs["labels"]
        g = self.probs.copy()
        g[np.arange(len(labels)), labels] -= 1.0
        if self.kwargs["reduction"] == "mean":
            g /= len(labels)
        return (g * grad,)


class Conv2d(Function):
    """3x3, stride-1 convolution over NCHW input with zero padding."""

    name = "conv2d"

    def forward(self, x, w):
        pad = self.kwargs["padding"]
        if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
            raise ShapeError(self.name, x.shape, w.shape)
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        if xp.shape[2] < 3 or xp.shape[3] < 3:
            raise ShapeError(self.name, x.shape, w.shape)
        self.x_shape = x.shape
        # windows: (N, Cin, Hout, Wout, 3, 3)
        self.windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
        self.w = w
        return np.einsum("nchwij,ocij->nohw", self.windows, w)

    def backward(self, grad):
        gx = gw = None
        if self.inputs[1].requires_grad:
            gw = np.einsum("nohw,nchwij->ocij", grad, self.windows)
        if self.inputs[0].requires_grad:
            pad = self.kwargs["padding"]
            n, c, h, w = self.x_shape
            gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad.dtype)
            hout, wout = grad.shape[2:]
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i : i + hout, j : j + wout] += np.einsum("nohw,oc->nchw", grad, self.w[:, :, i, j])
            gx = gxp[:, :, pad : pad + h, pad : pad + w]
        return gx, gw


# -- functional API --

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def relu(a: Tensor) -> Tensor:
    return ReLU.apply(a)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor) -> Tensor:
    return Log.apply(a)


def sum_all(a: Tensor) -> Tensor:
    return SumAll.apply(a)


def mean(a: Tensor) -> Tensor:
    return Mean.apply(a)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def softmax(a: Tensor) -> Tensor:
    return Softmax.apply(a)


def log_softmax(a: Tensor) -> Tensor:
    return LogSoftmax.apply(a)


def conv2d(x: Tensor, w: Tensor, padding: int = 1) -> Tensor:
    return Conv2d.apply(x, w, padding=padding)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Mean (or summed) negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if logits.ndim == 2:
        n_classes = logits.shape[1]
        bad = (labels < 0) | (labels >= n_classes)
        if bad.any():
            raise ValueError(f"cross_entropy: labels {labels[bad].tolist()} out of range [0, {n_classes})")
        if len(labels) == 0:
            raise ShapeError("cross_entropy", logits.shape, labels.shape)
    return CrossEntropy.apply(logits, labels=labels, reduction=reduction)


# -- graph traversal --

@dataclass(frozen=True)
class Node:
    fn: Function
    output: Tensor

    @property
    def op(self) -> str:
        return self.fn.name


def record(output: Tensor) -> list[Node]:
    """Topologically ordered operations that produced ``output``."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        t, expanded = stack.pop()
        if t._ctx is None:
            continue
        if expanded:
            order.append(Node(t._ctx, t))
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for parent in reversed(t._ctx.inputs):
            if parent._ctx is not None and id(parent) not in seen:
                stack.append((parent, False))
    return order


def replay(nodes: list[Node]) -> np.ndarray:
    """Recompute every node from current leaf values; returns the last output."""
    fresh: dict[int, np.ndarray] = {}
    out = None
    for node in nodes:
        args = [fresh.get(id(t), t.data) for t in node.fn.inputs]
        clone = type(node.fn)(*node.fn.inputs, **node.fn.kwargs)
        out = clone.forward(*args)
        fresh[id(node.output)] = out
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with requires_grad."""
    if loss.size != 1:
        raise ShapeError("backward", loss.shape)
    if not loss.requires_grad:
        return
    if loss._ctx is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record(loss)):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.fn.inputs, node.fn.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._ctx is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
