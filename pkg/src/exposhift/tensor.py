"""Tiny reverse-mode autodiff engine over numpy arrays.

The graph is recorded dynamically: every op returns a Tensor holding a
backward closure and references to its parents.  float32 is the working
precision; wrap code in ``precision("float64")`` when running
finite-difference gradient verification.  Every primitive checks its
output for NaN/Inf and raises NonFiniteError immediately.

A single graph must stay on one thread; independent graphs are fine in
parallel.
"""

from __future__ import annotations

import contextlib

import numpy as np


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype).type
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors default to."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def _check_finite(data, op):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: produced non-finite values")


# overflow/invalid become NonFiniteError via _check_finite; keep numpy quiet
def _quiet():
    return np.errstate(all="ignore")


def _unbroadcast(g, shape):
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """Dense array plus optional gradient buffer and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        # explicit float32/float64 arrays keep their dtype; everything else
        # (lists, scalars, ints) adopts the current default
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # ---- basic introspection -------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return np.array(self.data, copy=True)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # ---- autodiff core ---------------------------------------------------

    def backward(self):
        """Reverse-mode sweep; self must be scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # ---- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = _coerce(other, self)
        a, b = self, other

        def bwd(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))

        return _from_op(a.data + b.data, (a, b), bwd, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _coerce(other, self)
        a, b = self, other

        def bwd(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(-g, b.data.shape))

        return _from_op(a.data - b.data, (a, b), bwd, "sub")

    def __rsub__(self, other):
        return _coerce(other, self).__sub__(self)

    def __mul__(self, other):
        other = _coerce(other, self)
        a, b = self, other

        def bwd(g):
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

        return _from_op(a.data * b.data, (a, b), bwd, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _coerce(other, self)
        a, b = self, other

        def bwd(g):
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        with _quiet():
            out = a.data / b.data
        return _from_op(out, (a, b), bwd, "div")

    def __rtruediv__(self, other):
        return _coerce(other, self).__truediv__(self)

    def __neg__(self):
        a = self

        def bwd(g):
            _accum(a, -g)

        return _from_op(-a.data, (a,), bwd, "neg")

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self

        def bwd(g):
            _accum(a, g * p * a.data ** (p - 1))

        with _quiet():
            out = a.data ** p
        return _from_op(out, (a,), bwd, "pow")

    def __matmul__(self, other):
        other = _coerce(other, self)
        a, b = self, other
        out = np.matmul(a.data, b.data)

        def bwd(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(a, _unbroadcast(ga, a.data.shape))
            _accum(b, _unbroadcast(gb, b.data.shape))

        return _from_op(out, (a, b), bwd, "matmul")

    # ---- elementwise functions ---------------------------------------------

    def exp(self):
        a = self
        with _quiet():
            out = np.exp(a.data)

        def bwd(g):
            _accum(a, g * out)

        return _from_op(out, (a,), bwd, "exp")

    def log(self):
        a = self

        def bwd(g):
            _accum(a, g / a.data)

        with _quiet():
            out = np.log(a.data)
        return _from_op(out, (a,), bwd, "log")

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)

        def bwd(g):
            # subgradient 0 at exactly 0 keeps piecewise magnitudes finite
            ga = np.zeros_like(out)
            np.divide(0.5 * g, out, out=ga, where=out > 0)
            _accum(a, ga)

        return _from_op(out, (a,), bwd, "sqrt")

    def abs(self):
        a = self

        def bwd(g):
            _accum(a, g * np.sign(a.data))

        return _from_op(np.abs(a.data), (a,), bwd, "abs")

    def relu(self):
        a = self

        def bwd(g):
            _accum(a, g * (a.data > 0))

        return _from_op(np.maximum(a.data, 0), (a,), bwd, "relu")

    def sigmoid(self):
        a = self
        x = a.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)

        def bwd(g):
            _accum(a, g * out * (1.0 - out))

        return _from_op(out, (a,), bwd, "sigmoid")

    def clip(self, lo, hi):
        a = self
        mask = (a.data >= lo) & (a.data <= hi)

        def bwd(g):
            _accum(a, g * mask)

        return _from_op(np.clip(a.data, lo, hi), (a,), bwd, "clip")

    # ---- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            _accum(a, _expand_reduced(g, a.data.shape, axis, keepdims))

        return _from_op(np.asarray(out), (a,), bwd, "sum")

    def mean(self, axis=None, keepdims=False):
        a = self
        out = a.data.mean(axis=axis, keepdims=keepdims)
        n = a.data.size if axis is None else np.prod(
            [a.data.shape[ax] for ax in _norm_axes(axis, a.data.ndim)])

        def bwd(g):
            _accum(a, _expand_reduced(g, a.data.shape, axis, keepdims) / n)

        return _from_op(np.asarray(out), (a,), bwd, "mean")

    # ---- shape manipulation ---------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape

        def bwd(g):
            _accum(a, g.reshape(old))

        return _from_op(a.data.reshape(shape), (a,), bwd, "reshape")

    def transpose(self, *axes):
        a = self
        inv = np.argsort(axes)

        def bwd(g):
            _accum(a, g.transpose(inv))

        return _from_op(a.data.transpose(axes), (a,), bwd, "transpose")

    def __getitem__(self, idx):
        a = self

        def bwd(g):
            ga = np.zeros_like(a.data)
            ga[idx] = g
            _accum(a, ga)

        return _from_op(a.data[idx].copy(), (a,), bwd, "slice")

    def take(self, indices, axis=0):
        """Gather rows along the first axis (integer indices, repeats allowed)."""
        if axis != 0:
            raise ValueError("take supports axis=0 only")
        a = self
        idx = np.asarray(indices, dtype=np.intp)

        def bwd(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accum(a, ga)

        return _from_op(a.data[idx], (a,), bwd, "take")


def _accum(t, g):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _from_op(data, parents, backward, op):
    data = np.asarray(data)
    with _quiet():
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand_reduced(g, shape, axis, keepdims):
    """Broadcast a reduced gradient back to the pre-reduction shape."""
    g = np.asarray(g)
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape).copy()
    axes = _norm_axes(axis, len(shape))
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


# ---------------------------------------------------------------------------
# free functions


def concat(tensors, axis=0):
    tensors = list(tensors)
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _from_op(out, tuple(tensors), bwd, "concat")


def minimum(a, b):
    """Elementwise min; ties route the gradient to the first argument."""
    b = _coerce(b, a)
    mask = a.data <= b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * mask, a.data.shape))
        _accum(b, _unbroadcast(g * ~mask, b.data.shape))

    return _from_op(np.minimum(a.data, b.data), (a, b), bwd, "minimum")


def softmax(x, axis):
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(x, s * (g - dot))

    return _from_op(s, (x,), bwd, "softmax")


def linear(x, w, b):
    """Affine map x @ w.T + b for x[..., in], w[out, in], b[out]."""
    if x.data.shape[-1] != w.data.shape[1]:
        raise ShapeError(
            f"linear: input width {x.data.shape[-1]} != weight width {w.data.shape[1]}")
    return x @ w.transpose(1, 0) + b


# ---------------------------------------------------------------------------
# padding


def _pad_index(n, lo, hi, mode):
    base = np.arange(-lo, n + hi)
    if mode == "replicate":
        return np.clip(base, 0, n - 1)
    if mode == "reflect":
        if n == 1:
            return np.zeros_like(base)
        idx = np.abs(base)
        return np.where(idx >= n, 2 * (n - 1) - idx, idx)
    raise ValueError(f"unknown pad mode {mode!r}")


def pad2d(x, pads, mode="zero"):
    """Pad the two trailing axes of an NCHW tensor; pads = (top, bottom, left, right)."""
    t, b, l, r = pads
    a = x
    N, C, H, W = a.data.shape
    if mode == "zero":
        out = np.pad(a.data, ((0, 0), (0, 0), (t, b), (l, r)))

        def bwd(g):
            _accum(a, g[:, :, t:t + H, l:l + W])

        return _from_op(out, (a,), bwd, "pad2d")

    rows = _pad_index(H, t, b, mode)
    cols = _pad_index(W, l, r, mode)
    out = a.data[:, :, rows][:, :, :, cols]

    def bwd(g):
        gh = np.zeros((N, C, H, W + l + r), dtype=g.dtype)
        np.add.at(gh, (slice(None), slice(None), rows), g)
        gw = np.zeros((N, C, H, W), dtype=g.dtype)
        np.add.at(gw, (slice(None), slice(None), slice(None), cols), gh)
        _accum(a, gw)

    return _from_op(out, (a,), bwd, "pad2d")


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, b, stride=1, padding=0):
    """Cross-correlation over NCHW input with OIHW weights and per-channel bias."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D NCHW, got {x.data.ndim}-D")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D OIHW, got {w.data.ndim}-D")
    N, C, H, W = x.data.shape
    Co, Ci, k, k2 = w.data.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {k}x{k2}")
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if Ci != C:
        raise ShapeError(f"conv2d: input channels {C} != weight input channels {Ci}")
    if b.data.shape != (Co,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({Co},)")
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: spatial size {H}x{W} too small for kernel {k} stride {stride}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = np.empty((N, C, k, k, Ho, Wo), dtype=x.data.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride]
    cols_mat = cols.reshape(N, C * k * k, Ho * Wo)
    w_mat = w.data.reshape(Co, C * k * k)
    out = np.matmul(w_mat, cols_mat).reshape(N, Co, Ho, Wo) + b.data.reshape(1, Co, 1, 1)

    def bwd(g):
        g_mat = g.reshape(N, Co, Ho * Wo)
        if b.requires_grad:
            _accum(b, g_mat.sum(axis=(0, 2)))
        if w.requires_grad:
            gw = np.tensordot(g_mat, cols_mat, axes=([0, 2], [0, 2]))
            _accum(w, gw.reshape(w.data.shape))
        if x.requires_grad:
            gcols = np.matmul(w_mat.T, g_mat).reshape(N, C, k, k, Ho, Wo)
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride] += \
                        gcols[:, :, ki, kj]
            if padding:
                gxp = gxp[:, :, padding:padding + H, padding:padding + W]
            _accum(x, gxp)

    return _from_op(out, (x, w, b), bwd, "conv2d")


def instance_norm(x, eps=1e-5):
    """Normalize each (sample, channel) slice to zero mean / unit variance."""
    if x.data.ndim != 4:
        raise ShapeError("instance_norm expects NCHW input")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    s = np.sqrt(var + eps)
    xhat = (x.data - mu) / s

    def bwd(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gx = (g - gm - xhat * (g * xhat).mean(axis=(2, 3), keepdims=True)) / s
        _accum(x, gx)

    return _from_op(xhat, (x,), bwd, "instance_norm")


def self_attention(x, wq, bq, wk, bk, wv, bv, gamma):
    """Non-local block: x + gamma * V softmax(K^T Q) over flattened positions."""
    N, C, H, W = x.data.shape
    q = conv2d(x, wq, bq).reshape(N, C, H * W)
    k = conv2d(x, wk, bk).reshape(N, C, H * W)
    v = conv2d(x, wv, bv).reshape(N, C, H * W)
    logits = k.transpose(0, 2, 1) @ q          # [N, P, P], rows index keys
    attn = softmax(logits, axis=1)
    out = (v @ attn).reshape(N, C, H, W)
    return x + gamma * out


# ---------------------------------------------------------------------------
# resampling


def _apply_axis(mat, t, axis, op):
    """Apply mat[out, src] along one axis of a tensor, with exact transpose grad."""
    a = t
    out = np.moveaxis(np.moveaxis(a.data, axis, -1) @ mat.T, -1, axis)

    def bwd(g):
        _accum(a, np.moveaxis(np.moveaxis(g, axis, -1) @ mat, -1, axis))

    return _from_op(out, (a,), bwd, op)


def _pool_matrix(n, out, dtype):
    m = np.zeros((out, n), dtype=dtype)
    for i in range(out):
        lo = (i * n) // out
        hi = -(-((i + 1) * n) // out)   # ceil
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def bilinear_matrix(n_src, n_dst, dtype=np.float64):
    """Row-stochastic interpolation matrix, half-pixel-centre convention."""
    m = np.zeros((n_dst, n_src), dtype=dtype)
    scale = n_src / n_dst
    for i in range(n_dst):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_src - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_src - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m


def adaptive_avg_pool2d(x, out_h, out_w):
    """Average-pool NCHW input into out_h x out_w contiguous bins."""
    N, C, H, W = x.data.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"adaptive_avg_pool2d: zero output extent {out_h}x{out_w}")
    if out_h > H or out_w > W:
        raise ShapeError(f"adaptive_avg_pool2d: output {out_h}x{out_w} exceeds input {H}x{W}")
    t = _apply_axis(_pool_matrix(H, out_h, x.data.dtype), x, 2, "adaptive_pool")
    return _apply_axis(_pool_matrix(W, out_w, x.data.dtype), t, 3, "adaptive_pool")


def avg_downsample(x, factor):
    """Mean-pool NCHW input by an integer factor on both spatial axes."""
    if factor < 1:
        raise ShapeError("avg_downsample: factor must be >= 1")
    if factor == 1:
        return x
    N, C, H, W = x.data.shape
    if H % factor or W % factor:
        raise ShapeError(f"avg_downsample: {H}x{W} not divisible by factor {factor}")
    t = _apply_axis(_pool_matrix(H, H // factor, x.data.dtype), x, 2, "avg_downsample")
    return _apply_axis(_pool_matrix(W, W // factor, x.data.dtype), t, 3, "avg_downsample")


def bilinear_upsample(x, factor):
    """Upsample NCHW input by an integer factor (half-pixel centres, edge clamp)."""
    if factor < 1:
        raise ShapeError("bilinear_upsample: factor must be >= 1")
    if factor == 1:
        return x
    N, C, H, W = x.data.shape
    t = _apply_axis(bilinear_matrix(H, H * factor, x.data.dtype), x, 2, "bilinear_upsample")
    return _apply_axis(bilinear_matrix(W, W * factor, x.data.dtype), t, 3, "bilinear_upsample")


def windowed_min2d(x, window):
    """Sliding-window minimum with replicate padding, same output size.

    The window for output pixel p covers rows/cols p-(window-1)//2 .. p+window//2.
    Gradient routes to the first minimising input pixel in row-major order.
    """
    if window < 1:
        raise ShapeError("windowed_min2d: window must be >= 1")
    if window == 1:
        return x
    a = x
    N, C, H, W = a.data.shape
    lo = (window - 1) // 2
    hi = window // 2
    rows = np.clip(np.arange(-lo, H + hi), 0, H - 1)
    cols = np.clip(np.arange(-lo, W + hi), 0, W - 1)
    xp = a.data[:, :, rows][:, :, :, cols]

    win = np.lib.stride_tricks.sliding_window_view(xp, window, axis=3)
    col_arg = win.argmin(axis=4)                       # first min within each row window
    row_min = np.take_along_axis(xp, col_arg + np.arange(W), axis=3)
    vwin = np.lib.stride_tricks.sliding_window_view(row_min, window, axis=2)
    row_arg = vwin.argmin(axis=4)                      # first min across window rows
    out = np.take_along_axis(row_min, row_arg + np.arange(H)[:, None], axis=2)

    pr = row_arg + np.arange(H)[:, None]               # padded row holding the min
    pc = np.take_along_axis(col_arg, pr, axis=2) + np.arange(W)
    src_r = rows[pr]
    src_c = cols[pc]

    def bwd(g):
        ga = np.zeros_like(a.data)
        nc = np.arange(N * C).reshape(N, C, 1, 1)
        lin = (nc * H + src_r) * W + src_c
        np.add.at(ga.reshape(-1), lin.reshape(-1), g.reshape(-1))
        _accum(a, ga)

    return _from_op(out, (a,), bwd, "windowed_min2d")


# ---------------------------------------------------------------------------
# parameters


class Param:
    """A named trainable tensor; the name keys checkpoint records."""

    __slots__ = ("name", "tensor")

    def __init__(self, name, data):
        self.name = name
        self.tensor = Tensor(np.array(data, copy=True), requires_grad=True)

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


class ParamSet:
    """Ordered registry of uniquely named parameters."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name, data):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(name, data)
        self._params[name] = p
        return p

    def __getitem__(self, name):
        return self._params[name].tensor

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def arrays(self):
        return {name: p.tensor.data for name, p in self._params.items()}

    def zero_grad(self):
        for p in self._params.values():
            p.tensor.grad = None

    def load_arrays(self, arrays):
        """Overwrite parameter values in place; shapes must match exactly."""
        for name, p in self._params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            src = np.asarray(arrays[name])
            if src.shape != p.tensor.data.shape:
                raise ShapeError(
                    f"{name}: shape {src.shape} != expected {p.tensor.data.shape}")
            p.tensor.data = src.astype(p.tensor.data.dtype, copy=True)

    def set_requires_grad(self, flag):
        for p in self._params.values():
            p.tensor.requires_grad = flag


def kaiming_uniform(rng, shape, fan_in):
    """U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(_DEFAULT_DTYPE)


# ---------------------------------------------------------------------------
# gradient verification


def gradcheck(build_loss, params, rng, n_samples=20, step=1e-3, rtol=1e-3):
    """Compare reverse-mode gradients against central finite differences.

    build_loss() must rebuild the scalar loss from the live parameter
    values on every call.  Run under precision("float64").

    An element whose stencil straddles a piecewise-linear kink (relu,
    min, clip) cannot match any analytic gradient at the coarse step; it
    is detected by re-checking at step/8 against a tighter tolerance and
    replaced by a fresh sample, so every counted element passed at the
    requested step.  A genuinely wrong gradient fails at both steps.
    Returns the checked (name, index, analytic, fd, rel) tuples.
    """
    params = list(params)
    loss = build_loss()
    for p in params:
        p.tensor.grad = None
    loss.backward()
    grads = [np.array(p.tensor.grad) if p.tensor.grad is not None
             else np.zeros_like(p.tensor.data) for p in params]

    gmax = max(float(np.abs(g).max()) for g in grads)
    if gmax == 0:
        raise AssertionError("gradcheck: all gradients are zero; nothing to verify")
    candidates = []
    for pi, g in enumerate(grads):
        flat = np.abs(g).reshape(-1)
        for ei in np.nonzero(flat > 1e-5 * gmax)[0]:
            candidates.append((pi, int(ei)))
    if len(candidates) < n_samples:
        raise AssertionError(f"gradcheck: only {len(candidates)} usable elements")
    order = rng.permutation(len(candidates))

    def fd_at(pi, ei, h):
        buf = params[pi].tensor.data.reshape(-1)
        orig = buf[ei]
        buf[ei] = orig + h
        f_plus = build_loss().item()
        buf[ei] = orig - h
        f_minus = build_loss().item()
        buf[ei] = orig
        return (f_plus - f_minus) / (2 * h)

    errs = []
    skipped = 0
    for ci in order:
        if len(errs) == n_samples:
            break
        pi, ei = candidates[ci]
        an = grads[pi].reshape(-1)[ei]
        fd = fd_at(pi, ei, step)
        rel = abs(fd - an) / max(abs(fd), abs(an))
        if rel < rtol:
            errs.append((params[pi].name, ei, an, fd, rel))
            continue
        confirmed = False
        for div in (8, 64):
            fd_fine = fd_at(pi, ei, step / div)
            rel_fine = abs(fd_fine - an) / max(abs(fd_fine), abs(an))
            if rel_fine < rtol / 4:
                confirmed = True   # kink inside the coarse stencil, not an error
                break
        if confirmed:
            skipped += 1
            continue
        raise AssertionError(
            f"gradcheck failed at {params[pi].name}[{ei}]: analytic {an:.6e} "
            f"vs fd {fd:.6e} (rel {rel:.2e}); finest fd {fd_fine:.6e} "
            f"(rel {rel_fine:.2e})")
    if len(errs) < n_samples:
        raise AssertionError(
            f"gradcheck: only {len(errs)} of {n_samples} samples verified "
            f"({skipped} kink-straddling candidates skipped)")
    return errs
