"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation in the translation pipeline bottoms out here.
Tensors wrap row-major numpy arrays; each op records its parents and a
backward closure, and ``Tensor.backward`` replays the graph in reverse
topological order. Gradient accumulation is additive: callers zero grads
between optimization steps.

Conventions: relu/clamp/max subgradients at kinks are 0, sqrt's subgradient
at 0 is 0, and ``gradcheck`` verifies everything else against central finite
differences.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """N-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- elementwise binary ops -----------------------------------------------

    @staticmethod
    def _wrap(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))

    def __add__(self, other):
        a, b = self, Tensor._wrap(other)
        out_data = a.data + b.data

        def backward(out):
            g = out.grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))

        return Tensor._result(out_data, (a, b), backward)

    def __sub__(self, other):
        a, b = self, Tensor._wrap(other)
        out_data = a.data - b.data

        def backward(out):
            g = out.grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.data.shape))

        return Tensor._result(out_data, (a, b), backward)

    def __mul__(self, other):
        a, b = self, Tensor._wrap(other)
        out_data = a.data * b.data

        def backward(out):
            g = out.grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._result(out_data, (a, b), backward)

    def __truediv__(self, other):
        a, b = self, Tensor._wrap(other)
        out_data = a.data / b.data

        def backward(out):
            g = out.grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._result(out_data, (a, b), backward)

    def __radd__(self, other):
        return Tensor._wrap(other) + self

    def __rsub__(self, other):
        return Tensor._wrap(other) - self

    def __rmul__(self, other):
        return Tensor._wrap(other) * self

    def __rtruediv__(self, other):
        return Tensor._wrap(other) / self

    def __neg__(self):
        a = self

        def backward(out):
            a._accumulate(-out.grad)

        return Tensor._result(-a.data, (a,), backward)

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise ValueError("pow exponent must be a python scalar")
        a, p = self, float(exponent)
        out_data = a.data ** p

        def backward(out):
            a._accumulate(out.grad * p * a.data ** (p - 1.0))

        return Tensor._result(out_data, (a,), backward)

    def __matmul__(self, other):
        return matmul(self, Tensor._wrap(other))

    # -- elementwise unary ops ------------------------------------------------

    def relu(self):
        a = self
        mask = a.data > 0  # subgradient at 0 is 0

        def backward(out):
            a._accumulate(out.grad * mask)

        return Tensor._result(np.where(mask, a.data, 0.0), (a,), backward)

    def leaky_relu(self, slope: float = 0.2):
        a = self
        mask = a.data > 0

        def backward(out):
            a._accumulate(out.grad * np.where(mask, 1.0, slope))

        return Tensor._result(np.where(mask, a.data, slope * a.data), (a,), backward)

    def gelu(self):
        a = self
        phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))

        def backward(out):
            pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
            a._accumulate(out.grad * (phi + a.data * pdf))

        return Tensor._result(a.data * phi, (a,), backward)

    def sigmoid(self):
        a = self
        s = 1.0 / (1.0 + np.exp(-a.data))

        def backward(out):
            a._accumulate(out.grad * s * (1.0 - s))

        return Tensor._result(s, (a,), backward)

    def tanh(self):
        a = self
        t = np.tanh(a.data)

        def backward(out):
            a._accumulate(out.grad * (1.0 - t * t))

        return Tensor._result(t, (a,), backward)

    def exp(self):
        a = self
        e = np.exp(a.data)

        def backward(out):
            a._accumulate(out.grad * e)

        return Tensor._result(e, (a,), backward)

    def log(self):
        a = self
        if np.any(a.data <= 0):
            raise ValueError("log of non-positive value")

        def backward(out):
            a._accumulate(out.grad / a.data)

        return Tensor._result(np.log(a.data), (a,), backward)

    def sqrt(self):
        a = self
        if np.any(a.data < 0):
            raise ValueError("sqrt of negative value")
        r = np.sqrt(a.data)

        def backward(out):
            # subgradient at 0 defined as 0 (kink-excluded in gradcheck)
            d = np.where(a.data > 0, 0.5 / np.where(a.data > 0, r, 1.0), 0.0)
            a._accumulate(out.grad * d)

        return Tensor._result(r, (a,), backward)

    def clamp(self, lo: float | None = None, hi: float | None = None):
        a = self
        inside = np.ones(a.data.shape, dtype=bool)
        if lo is not None:
            inside &= a.data > lo
        if hi is not None:
            inside &= a.data < hi

        def backward(out):
            a._accumulate(out.grad * inside)

        return Tensor._result(np.clip(a.data, lo, hi), (a,), backward)

    # -- reductions -------------------------------------------------------------

    def sum(self, axes=None, keepdims: bool = False):
        a = self
        axes_t = _norm_axes(axes, a.data.ndim)
        _check_nonempty(a.data, axes_t)
        out_data = a.data.sum(axis=axes_t, keepdims=keepdims)

        def backward(out):
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axes_t) if axes_t is not None else g.reshape((1,) * a.data.ndim)
            a._accumulate(np.broadcast_to(g, a.data.shape))

        return Tensor._result(out_data, (a,), backward)

    def mean(self, axes=None, keepdims: bool = False):
        a = self
        axes_t = _norm_axes(axes, a.data.ndim)
        _check_nonempty(a.data, axes_t)
        n = _count(a.data.shape, axes_t)
        out_data = a.data.mean(axis=axes_t, keepdims=keepdims)

        def backward(out):
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axes_t) if axes_t is not None else g.reshape((1,) * a.data.ndim)
            a._accumulate(np.broadcast_to(g, a.data.shape) / n)

        return Tensor._result(out_data, (a,), backward)

    def var(self, axes=None, keepdims: bool = False):
        """Population variance (divide by N) over the given axes."""
        a = self
        axes_t = _norm_axes(axes, a.data.ndim)
        _check_nonempty(a.data, axes_t)
        n = _count(a.data.shape, axes_t)
        mu = a.data.mean(axis=axes_t, keepdims=True)
        centered = a.data - mu
        out_data = (centered * centered).mean(axis=axes_t, keepdims=keepdims)

        def backward(out):
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axes_t) if axes_t is not None else g.reshape((1,) * a.data.ndim)
            a._accumulate(np.broadcast_to(g, a.data.shape) * 2.0 * centered / n)

        return Tensor._result(out_data, (a,), backward)

    def max(self, axes=None, keepdims: bool = False):
        a = self
        axes_t = _norm_axes(axes, a.data.ndim)
        _check_nonempty(a.data, axes_t)
        out_data = a.data.max(axis=axes_t, keepdims=keepdims)

        def backward(out):
            g = out.grad
            top = a.data.max(axis=axes_t, keepdims=True)
            if not keepdims:
                g = np.expand_dims(g, axes_t) if axes_t is not None else g.reshape((1,) * a.data.ndim)
            mask = a.data == top
            count = mask.sum(axis=axes_t, keepdims=True)
            a._accumulate(np.broadcast_to(g, a.data.shape) * mask / count)

        return Tensor._result(out_data, (a,), backward)

    # -- shape ops ----------------------------------------------------------------

    def reshape(self, shape):
        a = self
        out_data = a.data.reshape(shape)

        def backward(out):
            a._accumulate(out.grad.reshape(a.data.shape))

        return Tensor._result(out_data, (a,), backward)

    def transpose(self, axes):
        a = self
        inv = np.argsort(axes)

        def backward(out):
            a._accumulate(np.transpose(out.grad, inv))

        return Tensor._result(np.transpose(a.data, axes), (a,), backward)

    def __getitem__(self, key):
        a = self
        out_data = a.data[key]

        def backward(out):
            g = np.zeros_like(a.data)
            g[key] = out.grad
            a._accumulate(g)

        return Tensor._result(out_data, (a,), backward)

    # -- reverse pass ----------------------------------------------------------------

    def backward(self):
        """Populate grads of all requires_grad ancestors of this scalar."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node)


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative postorder; graphs from long training steps exceed the
    # recursion limit
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _norm_axes(axes, ndim):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


def _count(shape, axes_t):
    if axes_t is None:
        return int(np.prod(shape)) if shape else 1
    n = 1
    for a in axes_t:
        n *= shape[a]
    return n


def _check_nonempty(data, axes_t):
    if data.size == 0:
        raise ValueError("reduction over empty tensor")
    if axes_t is not None:
        for a in axes_t:
            if data.shape[a] == 0:
                raise ValueError("reduction over empty axis")


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors; grads are dA = g @ B^T, dB = A^T @ g."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._result(out_data, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (max-subtracted)."""
    a = x
    axis = axis % a.data.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(out):
        g = out.grad
        a._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Tensor._result(y, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    parts = [Tensor._wrap(t) for t in tensors]
    axis = axis % parts[0].data.ndim
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(out):
        offset = 0
        for p, s in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(offset, offset + s)
                p._accumulate(out.grad[tuple(idx)])
            offset += s

    return Tensor._result(out_data, tuple(parts), backward)


# -- spatial ops ------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation of a C×H×W input with C_out×C_in/g×k×k weights."""
    c_in, h, wd = x.data.shape
    c_out, c_g, k, k2 = w.data.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k}x{k2}")
    if c_in % groups or c_out % groups or c_g != c_in // groups:
        raise ValueError(
            f"channel/group mismatch: C_in={c_in} C_out={c_out} groups={groups} w_cin={c_g}")
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (wd + 2 * pad - k) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ValueError("kernel larger than padded input")

    if k == 1 and stride == 1 and pad == 0 and groups == 1:
        return _conv1x1(x, w)

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wnd = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # (g, C_in/g * k * k, out_h * out_w), contiguous
    cols = np.ascontiguousarray(
        wnd.reshape(groups, c_g, out_h, out_w, k, k).transpose(0, 1, 4, 5, 2, 3)
    ).reshape(groups, c_g * k * k, out_h * out_w)
    wg = w.data.reshape(groups, c_out // groups, c_g * k * k)
    out_data = np.matmul(wg, cols).reshape(c_out, out_h, out_w)

    def backward(out):
        g3 = out.grad.reshape(groups, c_out // groups, out_h * out_w)
        if w.requires_grad:
            w._accumulate(np.matmul(g3, cols.transpose(0, 2, 1)).reshape(w.data.shape))
        if x.requires_grad:
            dcols = np.matmul(wg.transpose(0, 2, 1), g3)
            dc = dcols.reshape(c_in, k, k, out_h, out_w)
            dxp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
            for ki in range(k):
                for kj in range(k):
                    dxp[:, ki:ki + stride * out_h:stride,
                        kj:kj + stride * out_w:stride] += dc[:, ki, kj]
            x._accumulate(dxp[:, pad:pad + h, pad:pad + wd] if pad else dxp)

    return Tensor._result(out_data, (x, w), backward)


def _conv1x1(x: Tensor, w: Tensor) -> Tensor:
    c_in, h, wd = x.data.shape
    c_out = w.data.shape[0]
    w2 = w.data.reshape(c_out, c_in)
    xf = x.data.reshape(c_in, h * wd)
    out_data = (w2 @ xf).reshape(c_out, h, wd)

    def backward(out):
        g2 = out.grad.reshape(c_out, h * wd)
        if w.requires_grad:
            w._accumulate((g2 @ xf.T).reshape(w.data.shape))
        if x.requires_grad:
            x._accumulate((w2.T @ g2).reshape(x.data.shape))

    return Tensor._result(out_data, (x, w), backward)


def pad2d_replicate(x: Tensor, pad: int) -> Tensor:
    """Edge-replicating spatial pad of a C×H×W tensor."""
    c, h, w = x.data.shape
    ri = np.clip(np.arange(h + 2 * pad) - pad, 0, h - 1)
    ci = np.clip(np.arange(w + 2 * pad) - pad, 0, w - 1)
    out_data = x.data[:, ri[:, None], ci[None, :]]

    def backward(out):
        g = np.zeros_like(x.data)
        np.add.at(g, (slice(None), ri[:, None], ci[None, :]), out.grad)
        x._accumulate(g)

    return Tensor._result(out_data, (x,), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    c, h, w = x.data.shape
    out_data = x.data.repeat(factor, axis=1).repeat(factor, axis=2)

    def backward(out):
        x._accumulate(out.grad.reshape(c, h, factor, w, factor).sum(axis=(2, 4)))

    return Tensor._result(out_data, (x,), backward)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    c, h, w = x.data.shape
    if h % k or w % k:
        raise ValueError(f"pool size {k} must divide spatial dims {h}x{w}")
    out_data = x.data.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))

    def backward(out):
        g = out.grad / (k * k)
        x._accumulate(g.repeat(k, axis=1).repeat(k, axis=2))

    return Tensor._result(out_data, (x,), backward)


# -- verification ------------------------------------------------------------------


def gradcheck(f, x: Tensor, eps: float = 1e-5) -> float:
    """Compare analytic grads of a scalar function against central differences.

    Returns the max over components of |analytic - numeric| divided by
    max(1, |analytic|, |numeric|). ``f`` must be deterministic and pure.
    """
    xt = Tensor(x.data.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ValueError("gradcheck target must be scalar")
    out.backward()
    analytic = (xt.grad if xt.grad is not None else np.zeros_like(xt.data)).ravel()

    base = x.data.ravel()
    numeric = np.empty_like(base)
    for i in range(base.size):
        d = base.copy()
        d[i] += eps
        fp = float(f(Tensor(d.reshape(x.data.shape))).data.reshape(()))
        d[i] -= 2 * eps
        fm = float(f(Tensor(d.reshape(x.data.shape))).data.reshape(()))
        numeric[i] = (fp - fm) / (2 * eps)

    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise ValueError("non-finite values in gradcheck")
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
