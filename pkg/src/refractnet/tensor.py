"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
result records its parents and a backward closure; creation indices increase
monotonically, so sorting the reachable nodes by index gives a topological
order without a separate graph object.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "zero_grad",
    "conv2d",
    "batch_norm",
    "relu",
    "add",
    "sub",
    "abs_",
    "matmul",
    "sum_over_axes",
    "mean_over_axes",
    "softmax",
    "reshape",
]

DTYPE = np.float64

_counter = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an op would produce NaN or Inf."""


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional float64 array that can take part in autodiff.

    Args:
        data: array-like; copied to a contiguous float64 array.
        requires_grad: mark as a leaf whose gradient should be accumulated.
        name: optional label used in error messages and checkpoints.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_index")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or '<unnamed>'}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._index = next(_counter)

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward_fn: BackwardFn, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            shapes = ", ".join(str(p.shape) for p in parents)
            raise NonFiniteError(f"{op} produced non-finite values (inputs {shapes})")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = op
        out._index = next(_counter)
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axes=None) -> "Tensor":
        return sum_over_axes(self, axes)

    def mean(self, axes=None) -> "Tensor":
        return mean_over_axes(self, axes)

    def relu(self) -> "Tensor":
        return relu(self)

    def abs(self) -> "Tensor":
        return abs_(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaf gradients accumulate across calls; use :func:`zero_grad` between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._index in nodes:
            continue
        nodes[t._index] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {loss._index: np.ones_like(loss.data)}
    for idx in sorted(nodes, reverse=True):
        t = nodes[idx]
        g = grads.pop(idx, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._index)
            grads[parent._index] = pg if prev is None else prev + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    # rows ordered (C, kh, kw), columns ordered (N, Ho, Wo)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)
    return cols, ho, wo


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    k, c, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    out = (w.reshape(k, -1) @ cols).reshape(k, x.shape[0], ho, wo)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), cols


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``kernel[K,C,kh,kw]``."""
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} or padding={padding}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d kernel {kernel.shape} larger than padded input {x.shape} (padding={padding})")

    out, cols = _conv_forward(x.data, kernel.data, stride, padding)
    wmat = kernel.data
    need_dx = x.requires_grad

    def _backward(g: np.ndarray):
        _, _, ho, wo = g.shape
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(k, -1)
        dkernel = (g2 @ cols.T).reshape(wmat.shape)
        if not need_dx:
            return None, dkernel
        if stride == 1 and padding <= kh - 1 and padding <= kw - 1:
            # full correlation with the flipped, channel-swapped kernel
            flipped = np.ascontiguousarray(wmat[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - padding,) * 2, (kw - 1 - padding,) * 2))
            gcols, _, _ = _im2col(gp, kh, kw, 1)
            dx = (flipped.reshape(c, -1) @ gcols).reshape(c, n, h, w)
            return np.ascontiguousarray(dx.transpose(1, 0, 2, 3)), dkernel
        dcols = (wmat.reshape(k, -1).T @ g2).reshape(c, kh, kw, n, ho, wo)
        dxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
        dx = dxp[:, :, padding:padding + h, padding:padding + w]
        return np.ascontiguousarray(dx.transpose(1, 0, 2, 3)), dkernel

    return Tensor._from_op(out, (x, kernel), _backward, "conv2d")


# --------------------------------------------------------------------------
# normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of ``x[N,C,H,W]``.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm params {gamma.shape}/{beta.shape} do not match {c} channels")
    xd = x.data
    g_ = gamma.data.reshape(1, c, 1, 1)

    if training:
        m = n * h * w
        if m < 2:
            raise ValueError(f"batch_norm in train mode needs N*H*W >= 2, got input {x.shape}")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (m / (m - 1))
    else:
        mu = running_mean.copy()
        var = running_var.copy()

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = xhat * g_ + beta.data.reshape(1, c, 1, 1)

    def _backward(g: np.ndarray):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        if not x.requires_grad:
            return None, dgamma, dbeta
        scale = g_ * inv_std.reshape(1, c, 1, 1)
        if training:
            m = n * h * w
            dx = scale * (g - dbeta.reshape(1, c, 1, 1) / m - xhat * dgamma.reshape(1, c, 1, 1) / m)
        else:
            dx = scale * g
        return dx, dgamma, dbeta

    return Tensor._from_op(out, (x, gamma, beta), _backward, "batch_norm")


# --------------------------------------------------------------------------
# elementwise and linear algebra


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def _check_addable(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also match the trailing dims of ``a`` (bias)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_addable(a, b, "add")
    bshape = b.shape
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, bshape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_addable(a, b, "sub")
    bshape = b.shape
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, bshape)), "sub")


def abs_(x: Tensor) -> Tensor:
    """Absolute value; the subgradient at exactly 0 is 0."""
    sign = np.sign(x.data)
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched product of 3-D operands with equal batch size."""
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul expects two 2-D or two 3-D tensors, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _backward(g: np.ndarray):
        da = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        db = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return da, db

    return Tensor._from_op(ad @ bd, (a, b), _backward, "matmul")


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-D tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def sum_over_axes(x: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def _backward(g: np.ndarray):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return Tensor._from_op(x.data.sum(axis=axes), (x,), _backward, "sum")


def mean_over_axes(x: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, x.ndim)
    shape = x.shape
    count = int(np.prod([shape[i] for i in axes])) if axes else 1
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def _backward(g: np.ndarray):
        return (np.broadcast_to(g.reshape(kept) / count, shape).copy(),)

    return Tensor._from_op(x.data.mean(axis=axes), (x,), _backward, "mean")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction."""
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), _backward, "softmax")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(src),), "reshape")
