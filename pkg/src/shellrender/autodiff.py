"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records operations as they execute; :func:`backward` walks the
record once in reverse and accumulates gradients into leaf tensors that were
created with ``requires_grad=True``.  Every trainable component in this
package (MLPs, attentions, CNNs, compositing) is built from the ops below.

Training runs in single precision.  Gradient verification runs under
``precision("float64")`` because finite differences in float32 are noise
dominated.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()

_DEFAULT_DTYPE = {"dtype": np.float32}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def default_dtype():
    return _DEFAULT_DTYPE["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors ("float32"/"float64")."""
    prev = _DEFAULT_DTYPE["dtype"]
    _DEFAULT_DTYPE["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE["dtype"] = prev


def _current_tape():
    return getattr(_local, "tape", None)


class Tensor:
    """Dense n-dimensional value, optionally participating in the grad tape."""

    __slots__ = ("data", "requires_grad", "grad", "_on_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._on_tape = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """Forward value as a plain array (no tape participation)."""
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # Operator sugar; constants are wrapped as non-grad tensors.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("output", "backward_fn")

    def __init__(self, output, backward_fn):
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered operation record; execution order is already topological."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._grads: dict[int, np.ndarray] = {}

    def __enter__(self):
        if _current_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = None
        return False

    def record(self, output: Tensor, backward_fn) -> None:
        output._on_tape = True
        self.nodes.append(_Node(output, backward_fn))

    def _accumulate(self, tensor: Tensor, grad: np.ndarray) -> None:
        # Stored gradient arrays are never mutated in place (replace on
        # reaccumulation), so backward rules may hand over shared views.
        if tensor.requires_grad:
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad
        if tensor._on_tape:
            key = id(tensor)
            cur = self._grads.get(key)
            self._grads[key] = grad if cur is None else cur + grad

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from loss."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        self._grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = self._grads.pop(id(node.output), None)
            if g is None:
                continue
            node.backward_fn(g, self._accumulate)
        self._grads = {}


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    tape = tape or _current_tape()
    if tape is None or not tape.nodes:
        raise RuntimeError("backward requires a non-empty active tape")
    tape.backward(loss)


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _current_tape()
    if tape is not None and any(t.requires_grad or t._on_tape for t in inputs):
        tape.record(out, backward_fn)
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 0 and b.data.ndim != 0:
        _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)

    def bwd(g, acc):
        acc(a, g if a.data.ndim else np.array(g.sum(), dtype=g.dtype))
        acc(b, g if b.data.ndim else np.array(g.sum(), dtype=g.dtype))

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 0 and b.data.ndim != 0:
        _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)

    def bwd(g, acc):
        acc(a, g if a.data.ndim else np.array(g.sum(), dtype=g.dtype))
        acc(b, -g if b.data.ndim else np.array(-g.sum(), dtype=g.dtype))

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 0 and b.data.ndim != 0:
        _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)

    def bwd(g, acc):
        ga = g * b.data
        gb = g * a.data
        acc(a, ga if a.data.ndim else np.array(ga.sum(), dtype=g.dtype))
        acc(b, gb if b.data.ndim else np.array(gb.sum(), dtype=g.dtype))

    return _record(out, (a, b), bwd)


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 0 and b.data.ndim != 0:
        _check_same_shape("divide", a, b)
    out = Tensor(a.data / b.data)

    def bwd(g, acc):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        acc(a, ga if a.data.ndim else np.array(ga.sum(), dtype=g.dtype))
        acc(b, gb if b.data.ndim else np.array(gb.sum(), dtype=g.dtype))

    return _record(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)

    def bwd(g, acc):
        acc(a, -g)

    return _record(out, (a,), bwd)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    sign = np.sign(a.data)

    def bwd(g, acc):
        acc(a, g * sign)

    return _record(out, (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0

    def bwd(g, acc):
        acc(a, g * mask)

    return _record(out, (a,), bwd)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data >= lo) & (a.data <= hi)

    def bwd(g, acc):
        acc(a, g * mask)

    return _record(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y.astype(x.dtype, copy=False))

    def bwd(g, acc):
        acc(a, g * out.data * (1.0 - out.data))

    return _record(out, (a,), bwd)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = Tensor(np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x))))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g, acc):
        acc(a, g * sig.astype(x.dtype, copy=False))

    return _record(out, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))

    def bwd(g, acc):
        acc(a, g * out.data)

    return _record(out, (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))

    def bwd(g, acc):
        acc(a, g * (0.5 / np.maximum(out.data, 1e-12)))

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))

    def bwd(g, acc):
        acc(a, g.reshape(old))

    return _record(out, (a,), bwd)


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))

    def bwd(g, acc):
        acc(a, g.transpose(inverse))

    return _record(out, (a,), bwd)


def expand(a, axis: int, n: int) -> Tensor:
    """Insert an axis at ``axis`` and repeat the tensor ``n`` times along it."""
    a = as_tensor(a)
    out = Tensor(np.repeat(np.expand_dims(a.data, axis), n, axis=axis))

    def bwd(g, acc):
        acc(a, g.sum(axis=axis))

    return _record(out, (a,), bwd)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, acc):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            acc(t, g[tuple(idx)])

    return _record(out, tuple(ts), bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` elements along ``axis``."""
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def bwd(g, acc):
        full = np.zeros_like(a.data)
        full[idx] = g
        acc(a, full)

    return _record(out, (a,), bwd)


def _scatter_rows(idx: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n_rows`` bins (bincount per channel)."""
    out = np.empty((n_rows, values.shape[1]), dtype=values.dtype)
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(idx, weights=values[:, c], minlength=n_rows)
    return out


def take_rows(a, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor; index -1 yields a zero row."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows expects 2-D input, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    safe = np.maximum(idx, 0)
    gathered = a.data[safe]
    gathered[idx < 0] = 0
    out = Tensor(gathered)

    def bwd(g, acc):
        valid = idx >= 0
        acc(a, _scatter_rows(idx[valid], g[valid], len(a.data)))

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g, acc):
        if axis is None:
            acc(a, np.broadcast_to(g, a.data.shape).astype(g.dtype))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            acc(a, np.broadcast_to(gg, a.data.shape).copy())

    return _record(out, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g, acc):
        if axis is None:
            acc(a, np.broadcast_to(g / n, a.data.shape).astype(g.dtype))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            acc(a, np.broadcast_to(gg / n, a.data.shape).astype(g.dtype))

    return _record(out, (a,), bwd)


def variance(a, axis: int, keepdims: bool = False) -> Tensor:
    """Population variance along ``axis``."""
    a = as_tensor(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mu
    out = Tensor((centered * centered).mean(axis=axis, keepdims=keepdims))
    n = a.data.shape[axis]

    def bwd(g, acc):
        gg = g if keepdims else np.expand_dims(g, axis)
        acc(a, (2.0 / n) * centered * gg)

    return _record(out, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g, acc):
        dot = (g * y).sum(axis=axis, keepdims=True)
        acc(a, y * (g - dot))

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g, acc):
        acc(a, g @ b.data.T)
        acc(b, a.data.T @ g)

    return _record(out, (a, b), bwd)


def affine(x, w, b) -> Tensor:
    """Fused x @ w + b for (N, K) inputs; the bias row is shared across rows."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[0] or b.data.shape != (w.data.shape[1],):
        raise ShapeError(
            f"affine: incompatible shapes {x.data.shape} vs {w.data.shape} vs {b.data.shape}")
    out = Tensor(x.data @ w.data + b.data)

    def bwd(g, acc):
        acc(x, g @ w.data.T)
        acc(w, x.data.T @ g)
        acc(b, g.sum(axis=0))

    return _record(out, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# image ops


def _pad2d(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(x, kh, kw, stride):
    # x: (B, C, H, W) already padded -> (B, Ho, Wo, C*kh*kw)
    b, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, ho, wo, c, kh, kw),
        strides=(sb, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return cols.reshape(b, ho, wo, c * kh * kw), ho, wo


def _col2im(cols, b, c, h, w, kh, kw, stride):
    # cols: (B, Ho, Wo, C, kh, kw) gradient -> padded image gradient (B, C, H, W)
    out = np.zeros((b, c, h, w), dtype=cols.dtype)
    ho, wo = cols.shape[1], cols.shape[2]
    for i in range(kh):
        hs = slice(i, i + stride * ho, stride)
        for j in range(kw):
            ws = slice(j, j + stride * wo, stride)
            out[:, :, hs, ws] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def conv2d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution. x: (B, Cin, H, W); w: (Cout, Cin, kh, kw); b: (Cout,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.data.shape} vs {w.data.shape}")
    cout, cin, kh, kw = w.data.shape
    xp = _pad2d(x.data, padding)
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    bsz = x.data.shape[0]
    flat = cols.reshape(-1, cin * kh * kw)
    wflat = w.data.reshape(cout, -1).T
    y = (flat @ wflat + b.data).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)
    out = Tensor(np.ascontiguousarray(y))

    def bwd(g, acc):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        acc(w, (flat.T @ gflat).T.reshape(w.data.shape))
        acc(b, gflat.sum(axis=0))
        gcols = (gflat @ wflat.T).reshape(bsz, ho, wo, cin, kh, kw)
        gx = _col2im(gcols, bsz, cin, xp.shape[2], xp.shape[3], kh, kw, stride)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        acc(x, gx)

    return _record(out, (x, w, b), bwd)


def conv_transpose2d(x, w, b, stride: int = 2, padding: int = 1, output_padding: int = 1) -> Tensor:
    """Transposed 2-D convolution (the adjoint of conv2d against the input).

    x: (B, Cin, H, W); w: (Cin, Cout, kh, kw); b: (Cout,).  With the default
    3x3/stride-2 configuration the spatial size exactly doubles.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    cin, cout, kh, kw = w.data.shape
    if x.data.shape[1] != cin:
        raise ShapeError(f"conv_transpose2d: incompatible shapes {x.data.shape} vs {w.data.shape}")
    bsz, _, h, w_in = x.data.shape
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (w_in - 1) * stride - 2 * padding + kw + output_padding
    hp, wp = ho + 2 * padding, wo + 2 * padding

    # Forward = col2im scatter of (x rows x flipped-weight) products.
    xflat = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)  # (B*H*W, Cin)
    wflat = w.data.reshape(cin, cout * kh * kw)
    prod = (xflat @ wflat).reshape(bsz, h, w_in, cout, kh, kw)
    ypad = _col2im(prod, bsz, cout, hp, wp, kh, kw, stride)
    y = ypad[:, :, padding:padding + ho, padding:padding + wo] + b.data[None, :, None, None]
    out = Tensor(np.ascontiguousarray(y))

    def bwd(g, acc):
        gp = np.zeros((bsz, cout, hp, wp), dtype=g.dtype)
        gp[:, :, padding:padding + ho, padding:padding + wo] = g
        gcols, _, _ = _im2col(gp, kh, kw, stride)  # (B, H, W, Cout*kh*kw)
        gcols = gcols.reshape(-1, cout * kh * kw)
        acc(x, (gcols @ wflat.T).reshape(bsz, h, w_in, cin).transpose(0, 3, 1, 2))
        acc(w, (xflat.T @ gcols).reshape(w.data.shape))
        acc(b, g.sum(axis=(0, 2, 3)))

    return _record(out, (x, w, b), bwd)


def _up2_axis_weights(n_out, dtype):
    # Half-pixel convention: out center (i + 0.5)/2 in input coords.
    src = (np.arange(n_out, dtype=dtype) + 0.5) / 2.0 - 0.5
    lo = np.floor(src).astype(np.int64)
    frac = (src - lo).astype(dtype)
    lo0 = np.clip(lo, 0, n_out // 2 - 1)
    lo1 = np.clip(lo + 1, 0, n_out // 2 - 1)
    return lo0, lo1, frac


def _resize_half(x):
    # 2x2 box average == bilinear at scale 1/2 under the half-pixel convention.
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 0::2] + x[..., 1::2, 1::2])


def _resize_double(x):
    h, w = x.shape[-2], x.shape[-1]
    i0, i1, fi = _up2_axis_weights(2 * h, x.dtype)
    j0, j1, fj = _up2_axis_weights(2 * w, x.dtype)
    rows = x[..., i0, :] * (1 - fi)[:, None] + x[..., i1, :] * fi[:, None]
    return rows[..., :, j0] * (1 - fj) + rows[..., :, j1] * fj


def bilinear_resize(x, scale) -> Tensor:
    """Resize by exactly 2 or 1/2 along the trailing two axes (half-pixel grid)."""
    x = as_tensor(x)
    if scale == 2:
        out = Tensor(_resize_double(x.data))

        def bwd(g, acc):
            # Adjoint of upsampling: scatter the fixed interpolation weights.
            h, w = x.data.shape[-2], x.data.shape[-1]
            i0, i1, fi = _up2_axis_weights(2 * h, g.dtype)
            j0, j1, fj = _up2_axis_weights(2 * w, g.dtype)
            tmp = np.zeros(g.shape[:-1] + (w,), dtype=g.dtype)
            np.add.at(tmp, (..., j0), g * (1 - fj))
            np.add.at(tmp, (..., j1), g * fj)
            gx = np.zeros(x.data.shape, dtype=g.dtype)
            np.add.at(gx, (..., i0, slice(None)), tmp * (1 - fi)[:, None])
            np.add.at(gx, (..., i1, slice(None)), tmp * fi[:, None])
            acc(x, gx)

        return _record(out, (x,), bwd)
    if scale == 0.5:
        if x.data.shape[-1] % 2 or x.data.shape[-2] % 2:
            raise ShapeError(f"bilinear_resize 1/2 needs even extents, got {x.data.shape}")
        out = Tensor(_resize_half(x.data))

        def bwd(g, acc):
            gx = np.empty(x.data.shape, dtype=g.dtype)
            gx[..., 0::2, 0::2] = g * 0.25
            gx[..., 0::2, 1::2] = g * 0.25
            gx[..., 1::2, 0::2] = g * 0.25
            gx[..., 1::2, 1::2] = g * 0.25
            acc(x, gx)

        return _record(out, (x,), bwd)
    raise ValueError(f"bilinear_resize supports scale 2 or 0.5, got {scale}")


def sample_bilinear(feature_map, uv: np.ndarray) -> Tensor:
    """Bilinearly sample a (H, W, C) map at continuous pixel coords (N, 2).

    Texel (i, j) is centered at (i + 0.5, j + 0.5); coordinates are clamped to
    the valid sample rectangle.  Differentiable w.r.t. the map values only;
    the interpolation weights are fixed by uv.
    """
    m = as_tensor(feature_map)
    h, w = m.data.shape[0], m.data.shape[1]
    u = np.clip(np.asarray(uv, dtype=np.float64)[:, 0], 0.5, w - 0.5) - 0.5
    v = np.clip(np.asarray(uv, dtype=np.float64)[:, 1], 0.5, h - 0.5) - 0.5
    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 1)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0).astype(m.data.dtype)
    fv = (v - v0).astype(m.data.dtype)
    w00 = (1 - fu) * (1 - fv)
    w10 = fu * (1 - fv)
    w01 = (1 - fu) * fv
    w11 = fu * fv
    flat = m.data.reshape(h * w, -1)
    i00, i10 = v0 * w + u0, v0 * w + u1
    i01, i11 = v1 * w + u0, v1 * w + u1
    y = (flat[i00] * w00[:, None] + flat[i10] * w10[:, None]
         + flat[i01] * w01[:, None] + flat[i11] * w11[:, None])
    out = Tensor(y)

    def bwd(g, acc):
        idx = np.concatenate([i00, i10, i01, i11])
        vals = np.concatenate([g * w00[:, None], g * w10[:, None],
                               g * w01[:, None], g * w11[:, None]])
        acc(m, _scatter_rows(idx, vals, h * w).reshape(m.data.shape))

    return _record(out, (m,), bwd)


def masked_conv3d(features, neighbor_idx: np.ndarray, w, b) -> Tensor:
    """3-D convolution evaluated only at active voxels.

    features: (N_active, Cin); neighbor_idx: (N_active, 27) rows into the
    active list with -1 for inactive/out-of-grid neighbors (which contribute
    zeros); w: (27 * Cin, Cout); b: (Cout,).
    """
    feats = as_tensor(features)
    n, cin = feats.data.shape
    gathered = take_rows(feats, neighbor_idx.reshape(-1))
    stacked = reshape(gathered, (n, neighbor_idx.shape[1] * cin))
    w, b = as_tensor(w), as_tensor(b)
    return add(matmul(stacked, w), expand(b, 0, n))


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(f: Callable[..., Tensor], xs, eps: float = 1e-3,
              max_coords: int | None = None, rng: np.random.Generator | None = None,
              exclude=None, grad_floor: float = 0.0, fd_atol: float = 1e-6) -> float:
    """Max relative error between backward() grads and central differences.

    ``f`` maps the tensor(s) in ``xs`` to a scalar Tensor.  Relative error is
    |analytic - fd| / (|analytic| + |fd| + 1e-8) per coordinate.  ``exclude``
    is an optional boolean mask (per tensor) of coordinates to skip, e.g.
    relu inputs sitting exactly at 0.  ``max_coords`` subsamples coordinates
    per tensor for large parameter sets.

    Coordinates whose analytic gradient magnitude is below ``grad_floor`` sit
    under the finite-difference noise floor; for those the check asserts the
    FD value is also ~0 (within ``fd_atol``, catching dead backward paths)
    instead of comparing noise against the 1e-8 denominator term.
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    xs = list(xs)
    if exclude is None:
        exclude = [None] * len(xs)

    for x in xs:
        x.zero_grad()
    with Tape() as tape:
        loss = f(*xs)
        tape.backward(loss)

    worst = 0.0
    for x, excl in zip(xs, exclude):
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if excl is not None:
            coords = coords[~np.asarray(excl).reshape(-1)]
        if max_coords is not None and coords.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(coords, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*xs).data)
            flat[i] = orig - eps
            fm = float(f(*xs).data)
            flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            an = float(analytic.reshape(-1)[i])
            if abs(an) < grad_floor:
                if abs(fd) > fd_atol:
                    worst = max(worst, 1.0)
                continue
            rel = abs(an - fd) / (abs(an) + abs(fd) + 1e-8)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# checkpoint serialization

_MAGIC = b"SRTC"
_VERSION = 1


def save_tensors(path, tensors: dict) -> None:
    """Write named tensors as flat binary: header then name/rank/extents/f32 data."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(tensors)))
        for name, t in tensors.items():
            data = t.data if isinstance(t, Tensor) else np.asarray(t)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_tensors(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            out[name] = data.astype(default_dtype())
    return out
