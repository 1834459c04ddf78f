"""Reverse-mode automatic differentiation over numpy arrays.

A small tape: every op builds a `Tensor` that remembers its parents and a
closure computing input gradients from the output gradient.  `backward()` on
a scalar loss walks the graph in reverse topological order and accumulates
gradients into every reachable tensor with ``requires_grad=True``.

Only the ops needed by this package are provided.  All of them preserve the
input dtype and are deterministic.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        """A view of the same data, cut off from the graph."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- backward pass -----------------------------------------------------

    def backward(self, grad=None):
        """Accumulate gradients of `self` into every ancestor that requires them."""
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without explicit grad needs a scalar output")
            grad = np.ones_like(self.data)

        # iterative DFS topological sort (graphs can be deep)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for p, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = g
                else:
                    p.grad = p.grad + g
            if node is not self:
                node.grad = None  # free intermediate gradients


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def constant(x, dtype=None):
    a = np.asarray(x, dtype=dtype)
    return Tensor(a)


def parameter(x):
    return Tensor(np.asarray(x), requires_grad=True)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -----------------------------------------------------------


def add(a, b):
    return _make(a.data + b.data, (a, b),
                 lambda d: (_unbroadcast(d, a.data.shape), _unbroadcast(d, b.data.shape)))


def sub(a, b):
    return _make(a.data - b.data, (a, b),
                 lambda d: (_unbroadcast(d, a.data.shape), _unbroadcast(-d, b.data.shape)))


def mul(a, b):
    return _make(a.data * b.data, (a, b),
                 lambda d: (_unbroadcast(d * b.data, a.data.shape),
                            _unbroadcast(d * a.data, b.data.shape)))


def div(a, b):
    out = a.data / b.data

    def bwd(d):
        return (_unbroadcast(d / b.data, a.data.shape),
                _unbroadcast(-d * out / b.data, b.data.shape))

    return _make(out, (a, b), bwd)


def neg(a):
    return _make(-a.data, (a,), lambda d: (-d,))


def absolute(a):
    return _make(np.abs(a.data), (a,), lambda d: (d * np.sign(a.data),))


def square(a):
    return _make(a.data * a.data, (a,), lambda d: (2.0 * d * a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda d: (d / (2.0 * out),))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda d: (d * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda d: (d / a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda d: (d * (1.0 - out * out),))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda d: (d * out * (1.0 - out),))


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.data.dtype, copy=False), (a,),
                 lambda d: (d * mask,))


def leaky_relu(a, slope=0.2):
    mask = a.data > 0
    out = np.where(mask, a.data, slope * a.data).astype(a.data.dtype, copy=False)
    return _make(out, (a,), lambda d: (np.where(mask, d, slope * d),))


def clip(a, lo, hi):
    """Clamp values; gradient passes only through the un-clamped region."""
    mask = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda d: (d * mask,))


# -- reductions ------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(d):
        if axis is None:
            return (np.broadcast_to(d, a.data.shape).copy(),)
        if not keepdims:
            d = np.expand_dims(d, axis)
        return (np.broadcast_to(d, a.data.shape).copy(),)

    return _make(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(d):
        if axis is None:
            return (np.broadcast_to(d / n, a.data.shape).copy(),)
        if not keepdims:
            d = np.expand_dims(d, axis)
        return (np.broadcast_to(d / n, a.data.shape).copy(),)

    return _make(out, (a,), bwd)


def mean_abs(a):
    """Mean of |a| over every axis (the L1 reduction used by the losses)."""
    return tmean(absolute(a))


def mean_square(a):
    return tmean(square(a))


# -- shape ops ---------------------------------------------------------------


def reshape(a, shape):
    orig = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda d: (d.reshape(orig),))


def concat(tensors, axis):
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(d):
        return tuple(np.ascontiguousarray(g) for g in np.split(d, splits, axis=axis))

    return _make(out, tuple(tensors), bwd)


def pad2d(a, pads):
    """Zero-pad the two trailing axes; pads = (top, bottom, left, right)."""
    t, b, l, r = pads
    out = np.pad(a.data, ((0, 0), (0, 0), (t, b), (l, r)))
    h, w = a.data.shape[-2:]
    return _make(out, (a,), lambda d: (np.ascontiguousarray(d[..., t:t + h, l:l + w]),))


def crop2d(a, r0, r1, c0, c1):
    """Slice rows [r0:r1) and cols [c0:c1) of the two trailing axes."""
    out = np.ascontiguousarray(a.data[..., r0:r1, c0:c1])

    def bwd(d):
        g = np.zeros_like(a.data)
        g[..., r0:r1, c0:c1] = d
        return (g,)

    return _make(out, (a,), bwd)


def flip_w(a):
    """Reverse the last axis (horizontal mirror for NCHW images)."""
    out = np.ascontiguousarray(a.data[..., ::-1])

    def bwd(d):
        return (np.ascontiguousarray(d[..., ::-1]),)

    return _make(out, (a,), bwd)


def transpose2d(a):
    """Transpose a 2-D tensor."""
    if a.ndim != 2:
        raise ValueError(f"transpose2d expects 2 axes, got shape {a.shape}")
    out = np.ascontiguousarray(a.data.T)

    def bwd(d):
        return (np.ascontiguousarray(d.T),)

    return _make(out, (a,), bwd)


def batch_slice(a, i):
    """Select sample ``i`` of the leading axis, keeping that axis (length 1)."""
    out = np.ascontiguousarray(a.data[i:i + 1])

    def bwd(d):
        g = np.zeros_like(a.data)
        g[i:i + 1] = d
        return (g,)

    return _make(out, (a,), bwd)


def slice_cols(a, c0, c1):
    """Slice columns [c0:c1) of a 2-D tensor."""
    out = np.ascontiguousarray(a.data[:, c0:c1])

    def bwd(d):
        g = np.zeros_like(a.data)
        g[:, c0:c1] = d
        return (g,)

    return _make(out, (a,), bwd)


def matmul(a, b):
    out = a.data @ b.data

    def bwd(d):
        return (d @ b.data.T if a.requires_grad else None,
                a.data.T @ d if b.requires_grad else None)

    return _make(out, (a, b), bwd)


# -- image ops ---------------------------------------------------------------


def _im2col(xp, kh, kw, stride, oh, ow):
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution (cross-correlation), NCHW layout.

    x: [N, C, H, W]; w: [F, C, KH, KW]; b: [F] or None.
    """
    n, c, h, wd = x.data.shape
    f, c2, kh, kw = w.data.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {c2}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d output would be empty for input {h}x{wd} kernel {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wm = w.data.reshape(f, -1)
    out = np.matmul(wm, cols)  # [N, F, OH*OW]
    if b is not None:
        out = out + b.data.reshape(1, f, 1)
    out = out.reshape(n, f, oh, ow)

    def bwd(d):
        d2 = d.reshape(n, f, oh * ow)
        gw = gb = gx = None
        if b is not None and b.requires_grad:
            gb = d2.sum(axis=(0, 2))
        if w.requires_grad:
            cols_r = _im2col(xp, kh, kw, stride, oh, ow)
            gw = np.tensordot(d2, cols_r, axes=([0, 2], [0, 2])).reshape(f, c, kh, kw)
        if x.requires_grad:
            dcols = np.matmul(wm.T, d2).reshape(n, c, kh, kw, oh, ow)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
            gx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
            gx = np.ascontiguousarray(gx)
        if b is not None:
            return (gx, gw, gb)
        return (gx, gw)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bwd)


def upsample_nearest2x(a):
    out = a.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = a.data.shape
    return _make(out, (a,),
                 lambda d: (d.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def avg_pool2x2(a):
    n, c, h, w = a.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2x2 needs even spatial dims, got {h}x{w}")
    out = a.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bwd(d):
        g = (d / 4.0)[:, :, :, None, :, None]
        return (np.broadcast_to(g, (n, c, h // 2, 2, w // 2, 2)).reshape(n, c, h, w).copy(),)

    return _make(out, (a,), bwd)


def linear_interp_matrix(out_size, in_size, dtype=np.float64):
    """Row-stochastic 1-D bilinear interpolation matrix [out_size, in_size].

    Half-pixel (corner-aligned pixel centers) convention; edges clamped.
    """
    m = np.zeros((out_size, in_size), dtype=dtype)
    if in_size == 1:
        m[:, 0] = 1.0
        return m
    scale = in_size / out_size
    for o in range(out_size):
        src = (o + 0.5) * scale - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        i0c = min(max(i0, 0), in_size - 1)
        i1c = min(max(i0 + 1, 0), in_size - 1)
        m[o, i0c] += 1.0 - frac
        m[o, i1c] += frac
    return m


def resize_bilinear(a, out_h, out_w):
    """Bilinear spatial resize of an NCHW tensor."""
    n, c, h, w = a.data.shape
    if out_h == h and out_w == w:
        return _make(a.data.copy(), (a,), lambda d: (d,))
    rm = linear_interp_matrix(out_h, h, dtype=a.data.dtype)
    cm = linear_interp_matrix(out_w, w, dtype=a.data.dtype)
    out = np.einsum("ph,qw,nchw->ncpq", rm, cm, a.data, optimize=True)

    def bwd(d):
        return (np.einsum("ph,qw,ncpq->nchw", rm, cm, d, optimize=True),)

    return _make(out, (a,), bwd)


def finite_difference_grad(f, arrays, rel_step=1e-6):
    """Central finite-difference gradients of scalar ``f(arrays)``.

    ``f`` must treat its inputs as read-only between calls.  Returns a list
    of gradient arrays matching ``arrays``.  Step per entry scales with the
    entry magnitude to balance truncation and rounding error at float64.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = rel_step * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads
