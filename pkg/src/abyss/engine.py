"""Minimal reverse-mode autodiff over numpy arrays.

Covers exactly what the models need: conv2d (stride 1 and 2), nearest
upsampling, elementwise arithmetic, ReLU, sigmoid, exp/log, matrix multiply,
mean/sum reductions, reshape/transpose, row gather and stop-gradient. The
convolution inner loops live in :mod:`abyss.kernels`; everything else is
plain numpy. Gradients are accumulated on every node touched by
``backward()`` so intermediate gradients can be inspected in tests.

Float32 and float64 graphs are both supported; gradient checks run the
same code at float64.
"""

import contextlib

import numpy as np

from . import kernels
from .errors import ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
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

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True) if g.dtype != t.data.dtype else g.copy()
    else:
        t.grad += g


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def relu(x: Tensor):
    mask = x.data > 0
    data = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g):
        _accumulate(x, g * mask)

    return _make(data, (x,), backward)


def sigmoid(x: Tensor):
    data = 1.0 / (1.0 + np.exp(-x.data))
    data = data.astype(x.data.dtype, copy=False)

    def backward(g):
        _accumulate(x, g * data * (1.0 - data))

    return _make(data, (x,), backward)


def exp(x: Tensor):
    data = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * data)

    return _make(data, (x,), backward)


def log(x: Tensor):
    data = np.log(x.data)

    def backward(g):
        _accumulate(x, g / x.data)

    return _make(data, (x,), backward)


def sum_(x: Tensor, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return _make(data, (x,), backward)


def mean_(x: Tensor, axis=None, keepdims=False):
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= x.data.shape[ax]
    s = sum_(x, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


def reshape(x: Tensor, shape):
    data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(data, (x,), backward)


def transpose(x: Tensor, axes):
    data = x.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        _accumulate(x, g.transpose(inv))

    return _make(data, (x,), backward)


def matmul(a: Tensor, b: Tensor):
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(data, (a, b), backward)


def gather_rows(table: Tensor, idx: np.ndarray):
    """Select rows of a (K, D) table by integer index array (N,)."""
    idx = np.asarray(idx, dtype=np.int64)
    data = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accumulate(table, gt)

    return _make(data, (table,), backward)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------


def _dilate(g: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return g
    B, O, OH, OW = g.shape
    out = np.zeros((B, O, (OH - 1) * stride + 1, (OW - 1) * stride + 1), dtype=g.dtype)
    out[:, :, ::stride, ::stride] = g
    return out


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0):
    """Cross-correlation of x (B,C,H,W) with w (O,C,KH,KW), zero padding."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.data.shape[1]} vs kernel {w.data.shape[1]}")
    kh, kw = w.data.shape[2], w.data.shape[3]
    xp = _pad_hw(x.data, padding)
    data = kernels.conv2d_valid(xp, w.data, stride)
    if bias is not None:
        data = data + bias.data.reshape(1, -1, 1, 1)

    H, W = x.data.shape[2], x.data.shape[3]

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad or x._parents:
            wt = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gd = _dilate(g, stride)
            if kh > 1 or kw > 1:
                gd = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gx_full = kernels.conv2d_valid(gd, wt, 1)
            gx = gx_full[:, :, padding:padding + H, padding:padding + W]
            _accumulate(x, np.ascontiguousarray(gx))
        if w.requires_grad or w._parents:
            gw = kernels.conv2d_grad_weight(xp, g, kh, kw, stride)
            _accumulate(w, gw)
        if bias is not None and (bias.requires_grad or bias._parents):
            _accumulate(bias, g.sum(axis=(0, 2, 3)))

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(data, parents, backward)


def upsample_nearest(x: Tensor, s: int):
    """Repeat each pixel s times along both spatial axes."""
    if s < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {s}")
    if s == 1:
        return x
    data = np.repeat(np.repeat(x.data, s, axis=2), s, axis=3)

    def backward(g):
        B, C, H, W = x.data.shape
        _accumulate(x, g.reshape(B, C, H, s, W, s).sum(axis=(3, 5)))

    return _make(data, (x,), backward)


def global_avg_pool(x: Tensor):
    """Mean over the spatial axes: (B,C,H,W) -> (B,C)."""
    return mean_(x, axis=(2, 3))


def softmax(x: Tensor, axis: int = -1):
    shifted = sub(x, Tensor(x.data.max(axis=axis, keepdims=True)))
    e = exp(shifted)
    return div(e, sum_(e, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """First-order optimizer with adaptive per-parameter moment scaling.

    lr_scale maps parameter names to learning-rate multipliers (used to let
    codebook entries track encoder outputs faster than the conv weights).
    """

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, lr_scale: dict | None = None):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lr_scale = lr_scale or {}
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def reset_moments(self, name: str, rows=None):
        """Clear first/second moments (optionally only selected rows)."""
        if rows is None:
            self._m[name][:] = 0.0
            self._v[name][:] = 0.0
        else:
            self._m[name][rows] = 0.0
            self._v[name][rows] = 0.0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[k]
            v = self._v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            lr = self.lr * self.lr_scale.get(k, 1.0)
            p.data -= (lr * update).astype(p.data.dtype, copy=False)
