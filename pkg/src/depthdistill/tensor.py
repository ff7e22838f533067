"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a fresh Tensor and never mutates its inputs; graph
edges are recorded only when some input requires grad. Gradients accumulate
additively into ``.grad`` — callers zero them between optimization steps.
All arithmetic is 64-bit; layout is row-major NCHW throughout.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Backward called on an invalid root (non-scalar or detached)."""


class NumericsError(ArithmeticError):
    """An operation on finite inputs produced NaN or Inf."""


# When True (default), every op output is scanned for NaN/Inf and raises
# NumericsError instead of propagating silently. Cheap relative to the
# matmul work; can be switched off for profiling.
STRICT_FINITE = True


def _finite_or_raise(arr: np.ndarray, op: str) -> None:
    # single-pass screen: any NaN/Inf survives summation (finite terms can
    # never cancel one), and values here are orders of magnitude too small
    # to overflow the sum on their own
    if STRICT_FINITE and not np.isfinite(arr.sum()):
        raise NumericsError(f"{op} produced non-finite values")


class Tensor:
    """N-dimensional float64 array node in a reverse-mode graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    # -- construction helpers -------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], vjp: Callable, op: str) -> "Tensor":
        _finite_or_raise(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- grad management ---------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same data severed from the graph."""
        return Tensor(self.data)

    def backward(self) -> None:
        """Accumulate gradients of every reachable requires_grad tensor.

        The root must hold exactly one element. Repeated calls without
        zeroing keep accumulating.
        """
        if self.data.size != 1:
            raise GraphError(f"backward root must be scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward called on a tensor detached from any graph")

        order = _toposort(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        # ids whose pending buffer is exclusively ours: safe to add into in
        # place or hand over as the final grad. vjp outputs that pass g
        # through or view another buffer stay unowned and are never written.
        owned: set[int] = {id(self)}
        for node in order:
            nid = id(node)
            g = pending.pop(nid, None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g if nid in owned and g.base is None else g.copy()
            else:
                node.grad += g
            owned.discard(nid)
            if node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                _finite_or_raise(pg, "backward")
                pid = id(parent)
                acc = pending.get(pid)
                if acc is None:
                    pending[pid] = pg
                    if pg.base is None and pg is not g:
                        owned.add(pid)
                elif pid in owned:
                    acc += pg
                else:
                    pending[pid] = acc + pg
                    owned.add(pid)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method-style ops ----------------------------------------------------

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absolute(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)

    def sum(self, axes=None):
        return sum_(self, axes)

    def mean(self):
        return mean(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order (root first), iterative to spare the stack."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, idx = stack.pop()
        if idx == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if idx < len(node._parents):
            stack.append((node, idx + 1))
            child = node._parents[idx]
            if id(child) not in seen:
                stack.append((child, 0))
        else:
            order.append(node)
    order.reverse()
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic (numpy broadcasting, unbroadcast on the way back) --


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._result(out, (a, b), vjp, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def pow_const(a: Tensor, p) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    out = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._result(out, (a,), vjp, "pow")


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)
    return Tensor._result(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return Tensor._result(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    # Two-sided form so neither branch exponentiates a positive argument.
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    lo, hi = float(lo), float(hi)
    out = np.clip(a.data, lo, hi)

    def vjp(g):
        return (g * ((a.data > lo) & (a.data < hi)),)

    return Tensor._result(out, (a,), vjp, "clamp")


# -- reductions and reshaping -------------------------------------------------


def sum_(a: Tensor, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        out = a.data.sum()

        def vjp(g):
            return (np.broadcast_to(g, a.data.shape),)

    else:
        axes = tuple(axes) if isinstance(axes, Iterable) else (axes,)
        out = a.data.sum(axis=axes)
        kept = a.data.sum(axis=axes, keepdims=True).shape

        def vjp(g):
            return (np.broadcast_to(g.reshape(kept), a.data.shape),)

    return Tensor._result(np.asarray(out), (a,), vjp, "sum")


def mean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.mean())

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape),)

    return Tensor._result(out, (a,), vjp, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.data.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return Tensor._result(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(out, tensors, vjp, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul semantics for 2-D/3-D operands (batched last-two-dims product)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return Tensor._result(out, (a, b), vjp, "matmul")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability.

    Output slices are non-negative and sum to 1 within 1e-12.
    """
    x = _as_tensor(x)
    e = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    out = np.divide(e, e.sum(axis=-1, keepdims=True), out=e)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor._result(out, (x,), vjp, "softmax")


# -- spatial ops (NCHW) --------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with OIKK kernel (odd K).

    Output spatial size is floor((H + 2*padding - K)/stride) + 1;
    differentiable w.r.t. both input and kernel.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIKK kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.data.shape
    o, i, kh, kw = w.data.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd extent, got {kh}x{kw}")
    if c != i:
        raise ShapeError(f"conv2d input channels {c} != kernel input channels {i}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d stride must be >=1 and padding >=0, got {stride}, {padding}")
    k = kh
    hp, wp = h + 2 * padding, wd + 2 * padding
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    if hp < k or wp < k:
        raise ShapeError(f"conv2d kernel {k} exceeds padded input {hp}x{wp}")

    if padding:
        xp = np.zeros((n, c, hp, wp))
        xp[:, :, padding:padding + h, padding:padding + wd] = x.data
    else:
        xp = x.data
    cols = np.empty((n, c, k, k, ho, wo))
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
    cols2 = cols.reshape(n, c * k * k, ho * wo)
    wmat = w.data.reshape(o, c * k * k)
    out = np.matmul(wmat, cols2).reshape(n, o, ho, wo)

    def vjp(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = gx = None
        if w.requires_grad:
            gw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2).reshape(n, c, k, k, ho, wo)
            dxp = np.zeros((n, c, hp, wp))
            for ki in range(k):
                for kj in range(k):
                    dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += dcols[:, :, ki, kj]
            gx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        return gx, gw

    return Tensor._result(out, (x, w), vjp, "conv2d")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias (C,) to an NCHW map."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.ndim != 4 or b.ndim != 1 or b.data.shape[0] != x.data.shape[1]:
        raise ShapeError(f"bias_add expects NCHW and (C,), got {x.shape}, {b.shape}")
    out = x.data + b.data[None, :, None, None]

    def vjp(g):
        return g, g.sum(axis=(0, 2, 3))

    return Tensor._result(out, (x, b), vjp, "bias_add")


def pool_avg2(x: Tensor) -> Tensor:
    """Average over non-overlapping 2x2 blocks; requires even H and W."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"pool_avg2 expects NCHW, got {x.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool_avg2 needs even spatial extents, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        gx = np.empty((n, c, h // 2, 2, w // 2, 2))
        gx[...] = (g * 0.25)[:, :, :, None, :, None]
        return (gx.reshape(n, c, h, w),)

    return Tensor._result(out, (x,), vjp, "pool_avg2")


def upsample_nearest2(x: Tensor) -> Tensor:
    """Double both spatial extents by replicating each pixel 2x2."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2 expects NCHW, got {x.shape}")
    n, c, h, w = x.data.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._result(np.ascontiguousarray(out), (x,), vjp, "upsample_nearest2")


@lru_cache(maxsize=128)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-D bilinear interpolation matrix, align-corners=false."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of an NCHW map (align-corners=false)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects NCHW, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize target must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.data.shape
    lrow = _interp_matrix(h, out_h)
    rcol = _interp_matrix(w, out_w)
    out = np.matmul(np.matmul(lrow, x.data), rcol.T)

    def vjp(g):
        return (np.matmul(np.matmul(lrow.T, g), rcol),)

    return Tensor._result(out, (x,), vjp, "bilinear_resize")
