"""Dense tensors with reverse-mode automatic differentiation.

Define-by-run: while gradients are enabled, every differentiable op appends
a record to a global tape. ``backward(loss)`` walks the tape in reverse
execution order, accumulates ``.grad`` arrays on every tensor that requires
them, then clears the tape. Repeated ``backward`` calls without
``zero_grads`` keep accumulating into ``.grad`` (this is how gradient
accumulation over triplet groups works).

Storage is row-major flat (numpy, C order). Default dtype is float64 so
finite-difference checks are meaningful; float32 can be selected with
``set_default_dtype`` as a speed option.

The tape is a single module-level list, so graph construction is
single-threaded. Inference with frozen parameters under ``no_grad()``
records nothing and is safe to run concurrently.
"""

from __future__ import annotations

import contextlib

import numpy as np

_F32 = np.float32
_F64 = np.float64
_default_dtype = _F64

# (output, inputs, backward_fn) records in execution order
_tape: list = []
_grad_enabled = True


def set_default_dtype(name: str) -> None:
    """Select 'f64' (default, required for gradient checks) or 'f32'."""
    global _default_dtype
    if name not in ("f32", "f64"):
        raise ValueError(f"unknown dtype {name!r}, expected 'f32' or 'f64'")
    _default_dtype = _F32 if name == "f32" else _F64


def default_dtype():
    return _default_dtype


class Tensor:
    """N-d array with an optional gradient slot.

    ``data`` is a numpy array (row-major). ``grad`` is lazily created by
    ``backward`` and has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all graph logic lives in the module-level ops
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (frozen-parameter inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def tape_size() -> int:
    return len(_tape)


def clear_tape() -> None:
    _tape.clear()


def _record(out: Tensor, inputs, backward_fn) -> Tensor:
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.append((out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every recorded tensor that requires gradients.

    ``loss`` must be a scalar produced by recorded ops. Grads accumulate
    across calls; the tape is cleared afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    loss.accumulate_grad(np.ones_like(loss.data))
    try:
        for out, fn in reversed(_tape):
            if out.grad is not None:
                fn(out.grad)
    finally:
        _tape.clear()


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(out, (a, b), bwd)


def neg(x: Tensor) -> Tensor:
    out = Tensor(-x.data)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(-g)

    return _record(out, (x,), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (not differentiated w.r.t. ``s``)."""
    s = float(s)
    out = Tensor(x.data * s)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * s)

    return _record(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0))

    return _record(out, (x,), bwd)


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    t = np.tanh(_GELU_C * (x.data + _GELU_A * x.data**3))
    out = Tensor(0.5 * x.data * (1.0 + t))

    def bwd(g):
        if x.requires_grad:
            sech2 = 1.0 - t * t
            inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data**2)
            x.accumulate_grad(g * (0.5 * (1.0 + t) + 0.5 * x.data * sech2 * inner))

    return _record(out, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    out = Tensor(y)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g / (2.0 * y))

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra / reductions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _record(out, (a, b), bwd)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if not x.requires_grad:
            return
        if axis is None:
            x.accumulate_grad(np.broadcast_to(g, x.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate_grad(np.broadcast_to(g, x.shape).copy())

    return _record(out, (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            x.accumulate_grad(y * (g - dot))

    return _record(out, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    d = x.shape[-1]

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gy = g * gamma.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gy - m1 - xhat * m2))

    return _record(out, (x, gamma, beta), bwd)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale the last axis to unit L2 norm; ``eps`` guards the zero vector."""
    s = (x.data * x.data).sum(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(s + eps)
    y = x.data * inv
    out = Tensor(y)

    def bwd(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (g - y * dot))

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))

    return _record(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g.transpose(inv))

    return _record(out, (x,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(sl)])

    return _record(out, tuple(tensors), bwd)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis -2: out[..., *idx.shape, :] = x[..., idx, :].

    ``idx`` is a constant integer array; duplicates are allowed.
    """
    idx = np.asarray(idx)
    out = Tensor(x.data[..., idx, :])

    def bwd(g):
        if not x.requires_grad:
            return
        gx = np.zeros(x.shape, dtype=g.dtype)
        lead = x.shape[:-2]
        g3 = g.reshape((int(np.prod(lead)) if lead else 1,) + idx.shape + (x.shape[-1],))
        gx3 = gx.reshape(-1, x.shape[-2], x.shape[-1])
        np.add.at(gx3, (slice(None), idx), g3)
        x.accumulate_grad(gx)

    return _record(out, (x,), bwd)


def scatter_rows(x: Tensor, idx: np.ndarray, size: int) -> Tensor:
    """Sum rows of ``x`` into a zero array of ``size`` rows along axis -2.

    Inverse of :func:`gather_rows`: out[..., idx[k], :] += x[..., k, :].
    Duplicate indices accumulate.
    """
    idx = np.asarray(idx)
    lead = x.shape[: x.ndim - idx.ndim - 1]
    d = x.shape[-1]
    out_arr = np.zeros(lead + (size, d), dtype=x.data.dtype)
    x3 = x.data.reshape((int(np.prod(lead)) if lead else 1,) + idx.shape + (d,))
    o3 = out_arr.reshape(-1, size, d)
    np.add.at(o3, (slice(None), idx), x3)
    out = Tensor(out_arr)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g[..., idx, :].reshape(x.shape))

    return _record(out, (x,), bwd)


def take_along_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[..., i, j] = x[..., i, idx[i, j]] for a constant index matrix."""
    idx = np.asarray(idx)
    full = np.broadcast_to(idx, x.shape[:-1] + (idx.shape[-1],))
    out = Tensor(np.take_along_axis(x.data, full, axis=-1))

    def bwd(g):
        if not x.requires_grad:
            return
        gx = np.zeros(x.shape, dtype=g.dtype)
        t, r = x.shape[-2], x.shape[-1]
        gx3 = gx.reshape(-1, t, r)
        g3 = g.reshape(-1, t, idx.shape[-1])
        b = np.arange(gx3.shape[0])[:, None, None]
        rows = np.arange(t)[None, :, None]
        np.add.at(gx3, (b, rows, idx[None, :, :]), g3)
        x.accumulate_grad(gx)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv_out_len(n: int, k: int, stride: int, padding: int) -> int:
    """Output extent of a conv/pool stage: floor((n + 2p - k)/s) + 1."""
    if n + 2 * padding < k:
        raise ValueError(
            f"kernel {k} larger than padded input extent {n + 2 * padding}"
        )
    return (n + 2 * padding - k) // stride + 1


_COL_INDEX_CACHE: dict = {}


def _col_indices(c, h, w, k, stride, padding):
    """Flat positions (into padded C*Hp*Wp) of every im2col cell."""
    key = (c, h, w, k, stride, padding)
    cached = _COL_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = conv_out_len(h, k, stride, padding)
    wo = conv_out_len(w, k, stride, padding)
    ii, jj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    ii = ii.reshape(-1)
    jj = jj.reshape(-1)
    cc, uu, vv = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
    cc = cc.reshape(-1)
    uu = uu.reshape(-1)
    vv = vv.reshape(-1)
    idx = (
        cc[None, :] * (hp * wp)
        + (ii[:, None] * stride + uu[None, :]) * wp
        + (jj[:, None] * stride + vv[None, :])
    )
    _COL_INDEX_CACHE[key] = idx
    return idx


def _im2col(xp: np.ndarray, k: int, stride: int):
    # xp: [B, C, Hp, Wp] -> cols [B, Ho*Wo, C*k*k]
    view = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    view = view[:, :, ::stride, ::stride]
    b, c, ho, wo = view.shape[:4]
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * k * k)
    return cols, ho, wo


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-d convolution (cross-correlation) of [B,C,H,W] with [Co,C,k,k]."""
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    bs, c, h, wd_ = xd.shape
    co, ci, k, k2 = w.shape
    if k != k2:
        raise ValueError(f"conv2d expects square kernels, got {w.shape}")
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {ci}")
    ho = conv_out_len(h, k, stride, padding)
    wo = conv_out_len(wd_, k, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, _, _ = _im2col(xp, k, stride)
    wmat = w.data.reshape(co, -1)
    y = cols @ wmat.T + b.data
    y = y.transpose(0, 2, 1).reshape(bs, co, ho, wo)
    out = Tensor(y[0] if single else y)

    def bwd(g):
        g4 = g[None] if single else g
        g2 = g4.reshape(bs, co, ho * wo).transpose(0, 2, 1)
        if b.requires_grad:
            b.accumulate_grad(g2.sum(axis=(0, 1)))
        if w.requires_grad:
            gw = np.matmul(g2.transpose(0, 2, 1), cols).sum(axis=0)
            w.accumulate_grad(gw.reshape(w.shape))
        if x.requires_grad:
            dcols = np.matmul(g2, wmat)
            idx = _col_indices(c, h, wd_, k, stride, padding)
            hp, wp = h + 2 * padding, wd_ + 2 * padding
            gxp = np.zeros((bs, c * hp * wp), dtype=g.dtype)
            np.add.at(gxp, (slice(None), idx), dcols)
            gx = gxp.reshape(bs, c, hp, wp)[
                :, :, padding : padding + h, padding : padding + wd_
            ]
            x.accumulate_grad(gx[0] if single else gx)

    return _record(out, (x, w, b), bwd)


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Windowed max over [B,C,H,W]; padding is a -inf sentinel.

    Backward routes the gradient to the argmax; ties go to the first
    (row-major) element of the window, for determinism.
    """
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    bs, c, h, w = xd.shape
    ho = conv_out_len(h, kernel, stride, padding)
    wo = conv_out_len(w, kernel, stride, padding)
    xp = np.pad(
        xd,
        ((0, 0), (0, 0), (padding, padding), (padding, padding)),
        constant_values=-np.inf,
    )
    view = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    view = view[:, :, ::stride, ::stride]
    win = view.reshape(bs, c, ho * wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    y = y.reshape(bs, c, ho, wo)
    out = Tensor(y[0] if single else y)

    def bwd(g):
        if not x.requires_grad:
            return
        g4 = (g[None] if single else g).reshape(bs, c, ho * wo)
        hp, wp = h + 2 * padding, w + 2 * padding
        ii, jj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        ii = ii.reshape(-1)
        jj = jj.reshape(-1)
        u, v = arg // kernel, arg % kernel
        flat = (
            np.arange(c)[None, :, None] * (hp * wp)
            + ((ii * stride)[None, None, :] + u) * wp
            + (jj * stride)[None, None, :]
            + v
        )
        gxp = np.zeros((bs, c * hp * wp), dtype=g.dtype)
        np.add.at(gxp, (np.arange(bs)[:, None, None], flat), g4)
        gx = gxp.reshape(bs, c, hp, wp)[:, :, padding : padding + h, padding : padding + w]
        x.accumulate_grad(gx[0] if single else gx)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def trunc_normal(shape, std: float, rng: np.random.Generator) -> np.ndarray:
    """Normal(0, std) resampled until inside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(_default_dtype)


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(_default_dtype)
