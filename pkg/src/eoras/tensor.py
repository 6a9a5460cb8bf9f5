"""Dense float64 tensors with tape-based reverse-mode differentiation.

Define-by-run: while a Tape is active (``with record() as tape``), every
operation touching a tensor that requires gradients appends one entry to the
tape. ``tape.backward(loss)`` walks the entries in reverse, accumulating
gradients into ``Tensor.grad`` buffers; recording order is a topological
order by construction, so each entry is visited exactly once and gradients
sum at fan-out. One tape per forward pass; higher-order gradients are out
of scope. Without an active tape the same functions run forward-only, which
is the evaluation path.

All data is float64. Backward rules return freshly readable arrays (views
are fine); gradient accumulation never mutates in place, so views stay safe.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError

__all__ = [
    "Tensor", "Tape", "record", "active_tape",
    "add", "sub", "mul", "neg", "matmul", "reshape", "transpose",
    "broadcast_to", "concat", "take_slice", "take_rows", "permute_rows",
    "sum_", "mean_", "sigmoid", "softplus", "log", "exp", "relu", "gelu",
    "pow_const", "softmax", "layer_norm", "conv2d", "conv_transpose2d",
    "conv2d_direct", "bilinear_sample", "bilinear_sample_batch",
]


class Tensor:
    """A dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None  # assigned when recorded on a tape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    def __radd__(self, other):
        return add_const(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -other)

    def __rsub__(self, other):
        return add_const(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_const(self, other)

    def __rmul__(self, other):
        return mul_const(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor/tensor division is not provided; use mul with a reciprocal")
        return mul_const(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, key):
        return take_slice(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)


class Tape:
    """Ordered record of one forward pass."""

    __slots__ = ("entries", "_next_id")

    def __init__(self):
        # entry: (output tensor, input tensors tuple, backward fn)
        self.entries: list = []
        self._next_id = 0

    def __len__(self):
        return len(self.entries)

    def record(self, out: Tensor, inputs: tuple, backward: Callable):
        out.node_id = self._next_id
        self._next_id += 1
        self.entries.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and accumulate gradients tape-backwards."""
        if loss.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, backward in reversed(self.entries):
            g = out.grad
            if g is None:
                continue  # node does not feed the loss
            grads = backward(g)
            for inp, gi in zip(inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi


_TAPES: list[Tape] = []


class record:
    """Context manager activating a fresh Tape."""

    def __enter__(self) -> Tape:
        t = Tape()
        _TAPES.append(t)
        return t

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def _make(out_data, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor(out_data)
    if _TAPES and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        _TAPES[-1].record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)
    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)
    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))
    return _make(out, (a, b), bwd)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def add_const(x: Tensor, c) -> Tensor:
    """x + c for a scalar or plain ndarray constant (no gradient through c)."""
    return _make(x.data + c, (x,), lambda g: (_unbroadcast(g, x.data.shape),))


def mul_const(x: Tensor, c) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (_unbroadcast(g * c, x.data.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 1 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree for {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data
    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)
    return _make(out, (a, b), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Broadcast a (learned) tensor to a larger shape; backward sums back."""
    out = np.broadcast_to(x.data, shape)
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.data.shape),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.data.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(out, tuple(xs), bwd)


def take_slice(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing with scatter-back gradient."""
    out = x.data[key]
    shape = x.data.shape
    def bwd(g):
        gx = np.zeros(shape)
        gx[key] = g
        return (gx,)
    return _make(out.copy(), (x,), bwd)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather along axis 0; duplicate indices accumulate gradient."""
    out = x.data[idx]
    shape = x.data.shape
    def bwd(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)
    return _make(out, (x,), bwd)


def permute_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Reorder rows along axis -2 by a permutation (idx shaped like
    x.shape[:-1]); the gradient is the inverse permutation of g."""
    out = np.take_along_axis(x.data, idx[..., None], axis=-2)
    inv = np.argsort(idx, axis=-1)
    def bwd(g):
        return (np.take_along_axis(g, inv[..., None], axis=-2),)
    return _make(out, (x,), bwd)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.data.shape
    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return _make(out, (x,), bwd)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])
    return mul_const(sum_(x, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# nonlinearities

def _sigmoid_stable(d: np.ndarray) -> np.ndarray:
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_stable(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    sig = _sigmoid_stable(d)
    return _make(out, (x,), lambda g: (g * sig,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log requires strictly positive input")
    out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0
    return _make(out, (x,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-form GELU; the derivative matches this approximation exactly."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)
    def bwd(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * dt),)
    return _make(out, (x,), bwd)


def pow_const(x: Tensor, p: float) -> Tensor:
    out = x.data ** p
    def bwd(g):
        return (g * p * x.data ** (p - 1.0),) if p != 0 else (np.zeros_like(x.data),)
    return _make(out, (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    if not np.all(np.isfinite(d)):
        raise NumericError("softmax input must be finite")
    shifted = d - d.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)
    return _make(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1,
               eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit population variance along `axis`,
    then apply the affine (gain, bias) laid out along that axis."""
    d = x.data
    ax = axis % d.ndim
    n = d.shape[ax]
    if n < 2:
        raise ShapeError(f"layer_norm axis extent must be >= 2, got {n}")
    bshape = [1] * d.ndim
    bshape[ax] = n
    mu = d.mean(axis=ax, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    gb = gain.data.reshape(bshape)
    out = y * gb + bias.data.reshape(bshape)

    def bwd(g):
        red = tuple(i for i in range(d.ndim) if i != ax)
        dgain = (g * y).sum(axis=red) if red else (g * y)
        dbias = g.sum(axis=red) if red else g
        dy = g * gb
        dx = inv * (dy - dy.mean(axis=ax, keepdims=True)
                    - y * (dy * y).mean(axis=ax, keepdims=True))
        return dx, dgain.reshape(gain.data.shape), dbias.reshape(bias.data.shape)

    return _make(out, (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# convolution (im2col fast path + direct-loop reference)

def _conv_out_extent(n: int, k: int, stride: int, pad: int) -> int:
    out = (n + 2 * pad - k) // stride + 1
    if out <= 0:
        raise ShapeError(f"conv output extent {out} <= 0 for input {n}, kernel {k}, "
                         f"stride {stride}, pad {pad}")
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    B, C, H, W = x.shape
    Ho = _conv_out_extent(H, kh, stride, pad)
    Wo = _conv_out_extent(W, kw, stride, pad)
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise ShapeError(f"kernel ({kh},{kw}) does not fit padded input ({H},{W}) pad {pad}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((B, C, kh, kw, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    return cols.reshape(B, C * kh * kw, Ho * Wo), Ho, Wo


def _col2im(cols: np.ndarray, x_shape, kh, kw, stride, pad, Ho, Wo) -> np.ndarray:
    B, C, H, W = x_shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    cols = cols.reshape(B, C, kh, kw, Ho, Wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + H, pad:pad + W] if pad else xp


def _conv2d_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    O, C, kh, kw = w.shape
    cols, Ho, Wo = _im2col(x, kh, kw, stride, pad)
    out = (w.reshape(O, -1) @ cols).reshape(x.shape[0], O, Ho, Wo)
    return out, cols, Ho, Wo


def _conv2d_dx(g: np.ndarray, w: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    O, C, kh, kw = w.shape
    B, _, Ho, Wo = g.shape
    cols_g = w.reshape(O, -1).T @ g.reshape(B, O, Ho * Wo)
    return _col2im(cols_g, x_shape, kh, kw, stride, pad, Ho, Wo)


def _conv2d_dw(cols: np.ndarray, g: np.ndarray, w_shape) -> np.ndarray:
    B, O = g.shape[0], g.shape[1]
    gw = np.matmul(g.reshape(B, O, -1), cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(w_shape)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x [B,C,H,W] with w [O,C,kh,kw]."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.data.shape} and {w.data.shape}")
    out, cols, Ho, Wo = _conv2d_fwd(x.data, w.data, stride, pad)
    x_shape, w_shape = x.data.shape, w.data.shape
    wd = w.data
    def bwd(g):
        return (_conv2d_dx(g, wd, x_shape, stride, pad),
                _conv2d_dw(cols, g, w_shape))
    return _make(out, (x, w), bwd)


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of conv2d: forward equals conv2d's input-gradient.

    x is [B,O,h,w]; w is [O,C,kh,kw] (the same layout conv2d uses); output
    is [B,C,(h-1)*stride+kh-2*pad, ...].
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"conv_transpose2d: incompatible shapes {x.data.shape} and {w.data.shape}")
    B, O, h, wdt = x.data.shape
    _, C, kh, kw = w.data.shape
    H = (h - 1) * stride + kh - 2 * pad
    W = (wdt - 1) * stride + kw - 2 * pad
    if H <= 0 or W <= 0:
        raise ShapeError(f"conv_transpose2d output extent ({H},{W}) <= 0")
    out = _conv2d_dx(x.data, w.data, (B, C, H, W), stride, pad)
    xd, wd = x.data, w.data
    w_shape = w.data.shape
    def bwd(g):
        gx, cols_g, _, _ = _conv2d_fwd(g, wd, stride, pad)
        gw = _conv2d_dw(cols_g, xd, w_shape)
        return gx, gw
    return _make(out, (x, w), bwd)


def conv2d_direct(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct-loop convolution, the semantic reference for the im2col path."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = _conv_out_extent(H, kh, stride, pad)
    Wo = _conv_out_extent(W, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += xp[b, c, i * stride + ki, j * stride + kj] * w[o, c, ki, kj]
                    out[b, o, i, j] = acc
    return out


# ---------------------------------------------------------------------------
# bilinear sampling

def _bilinear_corners(points: np.ndarray, H: int, W: int):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    u, v = pts[:, 0], pts[:, 1]
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    du, dv = u - u0, v - v0
    corners = []
    for (ui, vi, wu, wv) in ((u0, v0, 1 - du, 1 - dv), (u0 + 1, v0, du, 1 - dv),
                             (u0, v0 + 1, 1 - du, dv), (u0 + 1, v0 + 1, du, dv)):
        inb = (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
        wgt = (wu * wv) * inb
        corners.append((np.clip(ui, 0, W - 1), np.clip(vi, 0, H - 1), wgt))
    return pts.shape[0], corners


def bilinear_sample(feat: Tensor, points: np.ndarray) -> Tensor:
    """Sample feat [C,H,W] at continuous (u,v) points [P,2]; u is the width
    coordinate. Outside [0,W-1]x[0,H-1] the sample is exactly 0 and so is
    its gradient. Differentiable w.r.t. feat only; points are geometry.
    """
    d = feat.data
    C, H, W = d.shape
    P, corners = _bilinear_corners(points, H, W)
    out = np.zeros((C, P))
    for ui, vi, wgt in corners:
        out += d[:, vi, ui] * wgt
    def bwd(g):
        gf = np.zeros((C, H, W))
        for ui, vi, wgt in corners:
            sel = wgt != 0
            if not sel.any():
                continue
            np.add.at(gf, (slice(None), vi[sel], ui[sel]), g[:, sel] * wgt[sel])
        return (gf,)
    return _make(out, (feat,), bwd)


def bilinear_sample_batch(feat: Tensor, points: np.ndarray) -> Tensor:
    """Batched variant: feat [B,C,H,W] sampled at shared points -> [B,C,P]."""
    d = feat.data
    B, C, H, W = d.shape
    P, corners = _bilinear_corners(points, H, W)
    out = np.zeros((B, C, P))
    for ui, vi, wgt in corners:
        out += d[:, :, vi, ui] * wgt
    def bwd(g):
        gf = np.zeros((B, C, H, W))
        for ui, vi, wgt in corners:
            sel = wgt != 0
            if not sel.any():
                continue
            np.add.at(gf, (slice(None), slice(None), vi[sel], ui[sel]),
                      g[:, :, sel] * wgt[sel])
        return (gf,)
    return _make(out, (feat,), bwd)
