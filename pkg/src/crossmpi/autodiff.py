"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every learnable part of the pipeline is expressed with the ``Tensor`` class
below.  A ``Tensor`` wraps an ``ndarray``, remembers the tensors it was
computed from, and knows how to push a gradient back to them.  Calling
``backward()`` on a scalar result walks the graph once in reverse
topological order.

Only the operations the model actually needs are implemented; each op keeps
the forward in plain vectorized numpy so float32/float64 behave identically
apart from precision.  Convolution is im2col plus a BLAS matmul, which is
where essentially all training time goes.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "as_tensor",
    "concat",
    "matmul",
    "conv2d",
    "softmax",
    "leaky_relu",
    "clamp",
    "nearest_up2",
    "nearest_down2",
    "maxpool2",
    "grid_sample_bilinear",
    "resize_separable",
    "numeric_gradient",
]


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


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
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad += grad

    def backward(self, grad=None):
        """Backpropagate from this tensor; default seed is ones (scalars)."""
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other, dtype=self.dtype)
        data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._make(data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            self._accumulate(-g)

        return Tensor._make(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-as_tensor(other, dtype=self.dtype))

    def __rsub__(self, other):
        return as_tensor(other, dtype=self.dtype) + (-self)

    def __mul__(self, other):
        other = as_tensor(other, dtype=self.dtype)
        data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return self * (1.0 / other)

    def __getitem__(self, key):
        data = self.data[key]

        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            self._accumulate(full)

        return Tensor._make(data, (self,), backward)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        data = self.data.reshape(shape)

        def backward(g):
            self._accumulate(g.reshape(old))

        return Tensor._make(data, (self,), backward)

    def transpose(self, axes):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        data = self.data.transpose(axes)

        def backward(g):
            self._accumulate(g.transpose(inv))

        return Tensor._make(data, (self,), backward)

    # -- reductions / elementwise ---------------------------------------------

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape).astype(self.dtype))
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape).astype(self.dtype))

        return Tensor._make(data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.shape[a] for a in axis]))
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def abs(self):
        data = np.abs(self.data)
        sign = np.sign(self.data)

        def backward(g):
            self._accumulate(g * sign)

        return Tensor._make(data, (self,), backward)

    def exp(self):
        data = np.exp(self.data)

        def backward(g):
            self._accumulate(g * data)

        return Tensor._make(data, (self,), backward)


class Parameter(Tensor):
    """A tensor that always requires gradients (a learnable weight)."""

    def __init__(self, data):
        super().__init__(np.asarray(data), requires_grad=True)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor(arr)


# -- free-function ops --------------------------------------------------------


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(a, b)
                t._accumulate(g[tuple(idx)])

    return Tensor._make(data, tensors, backward)


def matmul(a, b):
    """Matrix product with numpy batch semantics (used for plane attention)."""
    a, b = as_tensor(a), as_tensor(b)
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._make(data, (a, b), backward)


def leaky_relu(x, slope=0.1):
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)

    def backward(g):
        x._accumulate(g * scale)

    return Tensor._make(x.data * scale, (x,), backward)


def clamp(x, lo, hi):
    """Clip to [lo, hi]; gradient passes through wherever x is inside the range."""
    x = as_tensor(x)
    data = np.clip(x.data, lo, hi)
    mask = ((x.data >= lo) & (x.data <= hi)).astype(x.dtype)

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._make(data, (x,), backward)


def softmax(x, axis):
    """Numerically stable softmax; the running maximum is treated as constant."""
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate(y * (g - dot))

    return Tensor._make(y, (x,), backward)


def _conv_tap_slices(h, w, kh, kw, dilation):
    """Per-tap (source, destination) slice pairs realizing 'same' zero padding."""
    ph = dilation * (kh - 1) // 2
    pw = dilation * (kw - 1) // 2
    taps = []
    for i in range(kh):
        for j in range(kw):
            oy, ox = i * dilation - ph, j * dilation - pw
            src = (slice(max(0, oy), min(h, h + oy)), slice(max(0, ox), min(w, w + ox)))
            dst = (slice(max(0, -oy), min(h, h - oy)), slice(max(0, -ox), min(w, w - ox)))
            taps.append((src, dst))
    return taps


def conv2d(x, weight, bias=None, dilation=1):
    """2-D convolution (cross-correlation), stride 1, 'same' zero padding.

    x: (N, C, H, W); weight: (O, C, kh, kw); bias: (O,) or None.  Lowered to
    a single GEMM over an im2col buffer laid out (C*kh*kw, N*H*W).
    """
    x = as_tensor(x)
    w = as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cw}")
    parents = (x, w) if bias is None else (x, w, bias)
    wflat = w.data.reshape(o, c * kh * kw)

    if kh == kw == 1:
        xflat = x.data.reshape(n, c, h * wd)
        out = np.matmul(w.data.reshape(o, c), xflat)
        data = out.reshape(n, o, h, wd)
        if bias is not None:
            data += bias.data[None, :, None, None]

        def backward(g):
            gflat = g.reshape(n, o, h * wd)
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=(0, 2, 3)))
            if w.requires_grad:
                gw = np.matmul(gflat, xflat.transpose(0, 2, 1)).sum(axis=0)
                w._accumulate(gw.reshape(w.shape))
            if x.requires_grad:
                x._accumulate(np.matmul(w.data.reshape(o, c).T, gflat).reshape(x.shape))

        return Tensor._make(data, parents, backward)

    taps = _conv_tap_slices(h, wd, kh, kw, dilation)
    xt = x.data.transpose(1, 0, 2, 3)  # (C, N, H, W) view
    cols = np.zeros((c, kh * kw, n, h, wd), dtype=x.dtype)
    for t, (src, dst) in enumerate(taps):
        cols[:, t, :, dst[0], dst[1]] = xt[:, :, src[0], src[1]]
    cols = cols.reshape(c * kh * kw, n * h * wd)
    out = np.matmul(wflat, cols).reshape(o, n, h, wd)
    data = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if bias is not None:
        data += bias.data[None, :, None, None]

    def backward(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * h * wd)
        if w.requires_grad:
            w._accumulate(np.matmul(gt, cols.T).reshape(w.shape))
        if x.requires_grad:
            gcols = np.matmul(wflat.T, gt).reshape(c, kh * kw, n, h, wd)
            gx = np.zeros_like(xt)
            for t, (src, dst) in enumerate(taps):
                gx[:, :, src[0], src[1]] += gcols[:, t, :, dst[0], dst[1]]
            x._accumulate(gx.transpose(1, 0, 2, 3))

    return Tensor._make(data, parents, backward)


def nearest_up2(x):
    """2x nearest-neighbour upsampling (pixel replication) on (N, C, H, W)."""
    x = as_tensor(x)
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return Tensor._make(data, (x,), backward)


def nearest_down2(x):
    """2x nearest-neighbour downsampling (top-left subsampling) on (N, C, H, W)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"nearest_down2 needs even spatial dims, got {h}x{w}")
    data = x.data[:, :, 0::2, 0::2]

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, :, 0::2, 0::2] = g
        x._accumulate(full)

    return Tensor._make(np.ascontiguousarray(data), (x,), backward)


def maxpool2(x):
    """2x2 max pooling, stride 2; ties route the gradient to the first maximum."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // 2, w // 2, 4)
    am = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, am[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        x._accumulate(gx.reshape(x.shape))

    return Tensor._make(data, (x,), backward)


def grid_sample_bilinear(x, sample_x, sample_y):
    """Bilinearly sample (N, C, H, W) at continuous pixel coords (row = y, col = x).

    ``sample_x``/``sample_y`` are (out_h, out_w) float arrays shared across N
    and C.  Out-of-range taps contribute zero.  Linear in the pixel values,
    hence exactly differentiable with respect to them.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    sx = np.asarray(sample_x, dtype=x.dtype)
    sy = np.asarray(sample_y, dtype=x.dtype)
    out_h, out_w = sx.shape

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    taps = []
    for dy, dx_, wt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yi, xi = y0 + dy, x0 + dx_
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        wt = np.where(valid, wt, 0.0).astype(x.dtype)
        taps.append((np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1), wt))

    data = np.zeros((n, c, out_h, out_w), dtype=x.dtype)
    for yi, xi, wt in taps:
        data += x.data[:, :, yi, xi] * wt

    def backward(g):
        gx = np.zeros((n * c, h * w), dtype=x.dtype)
        rows = np.arange(n * c)[:, None]
        gmat = g.reshape(n * c, out_h * out_w)
        for yi, xi, wt in taps:
            cols_idx = (yi * w + xi).reshape(-1)[None, :]
            np.add.at(gx, (rows, cols_idx), gmat * wt.reshape(-1)[None, :])
        x._accumulate(gx.reshape(x.shape))

    return Tensor._make(data, (x,), backward)


def resize_separable(x, row_matrix, col_matrix):
    """Apply precomputed 1-D resampling matrices along H then W of (N, C, H, W)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    rm = np.asarray(row_matrix, dtype=x.dtype)
    cm = np.asarray(col_matrix, dtype=x.dtype)
    flat = x.data.reshape(n * c, h, w)
    data = np.matmul(np.matmul(rm, flat), cm.T).reshape(n, c, rm.shape[0], cm.shape[0])

    def backward(g):
        gf = g.reshape(n * c, rm.shape[0], cm.shape[0])
        gx = np.matmul(np.matmul(rm.T, gf), cm)
        x._accumulate(gx.reshape(x.shape))

    return Tensor._make(data, (x,), backward)


def numeric_gradient(fn, arr, eps=1e-6):
    """Central-difference gradient of scalar ``fn`` w.r.t. every entry of ``arr``."""
    arr = np.asarray(arr, dtype=np.float64)
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + eps
        hi = fn(arr)
        arr[idx] = orig - eps
        lo = fn(arr)
        arr[idx] = orig
        grad[idx] = (hi - lo) / (2 * eps)
        it.iternext()
    return grad
