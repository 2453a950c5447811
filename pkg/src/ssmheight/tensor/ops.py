"""Differentiable primitives over :class:`Tensor`.

Shapes are checked up front; broadcasting follows numpy's trailing-dimension
rule and the backward pass sums gradients back onto the original operand
shape.  Feature maps are laid out ``[B, C, H, W]`` throughout.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .tensor import ShapeError, Tensor, as_tensor

__all__ = [
    "elementwise", "add", "sub", "mul", "div", "neg", "pow", "exp", "log", "relu",
    "sigmoid", "silu", "softplus", "abs", "clamp", "where", "sum", "mean", "reshape",
    "transpose", "getitem", "concat", "matmul", "conv2d", "pool_adaptive_avg",
    "upsample_nearest", "upsample_bilinear", "softmax", "layer_norm", "make_op",
    "detach", "broadcast_shape", "ShapeError",
]


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap ``data`` as the output of a custom differentiable op."""
    return Tensor._from_op(data, parents, backward, op)


def detach(x: Tensor) -> Tensor:
    return Tensor(as_tensor(x).data)


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcastable") from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- binary elementwise --------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_op(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make_op(out, (a, b), backward, "div")


def where(cond, a, b) -> Tensor:
    """Select ``a`` where the (non-differentiable) mask holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(cond, dtype=bool)
    shape = np.broadcast_shapes(mask.shape, a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (
            _unbroadcast(np.where(mask, g, 0.0), sa),
            _unbroadcast(np.where(mask, 0.0, g), sb),
        )

    data = np.where(mask, a.data, b.data)
    assert data.shape == shape
    return make_op(data, (a, b), backward, "where")


# -- unary elementwise ---------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def pow(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    ad = a.data
    return make_op(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


_sigmoid = expit


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return make_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a) -> Tensor:
    """``x * sigmoid(x)``."""
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return make_op(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return make_op(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    sign = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def clamp(a, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    mask = np.ones(x.shape, dtype=bool)
    if lo is not None:
        mask &= x >= lo
    if hi is not None:
        mask &= x <= hi
    return make_op(out, (a,), lambda g: (g * mask,), "clamp")


_UNARY = {
    "neg": neg, "exp": exp, "log": log, "relu": relu, "sigmoid": sigmoid,
    "silu": silu, "softplus": softplus, "abs": abs,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name; ``pow`` takes a scalar exponent as ``b``."""
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind == "pow":
        return pow(a, b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# -- reductions and shape ops --------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_op(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return make_op(a.data[index], (a,), backward, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# -- contractions ----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched ``[..., m, k] @ [..., k, n]`` with broadcast batch dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op(ad @ bd, (a, b), backward, "matmul")


def _conv_out(n: int, k: int, s: int, p: int, d: int) -> int:
    return (n + 2 * p - d * (k - 1) - 1) // s + 1


def _window(xp: np.ndarray, i: int, j: int, ho: int, wo: int, s: int, d: int) -> np.ndarray:
    r, c = i * d, j * d
    return xp[:, :, r:r + s * (ho - 1) + 1:s, c:c + s * (wo - 1) + 1:s]


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``groups == C`` with one filter per channel takes a depthwise path; other
    group counts are split into independent dense convolutions.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects x [B,C,H,W] and kernel [Co,Ci,kh,kw], got {x.shape}, {kernel.shape}")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = kernel.shape
    if C % groups or Co % groups or Ci * groups != C:
        raise ShapeError(f"channels {C} -> {Co} incompatible with groups={groups} and kernel {kernel.shape}")
    s, p, d = int(stride), int(padding), int(dilation)
    ho, wo = _conv_out(H, kh, s, p, d), _conv_out(W, kw, s, p, d)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent ({ho}, {wo}) is nonpositive for input {x.shape}, kernel {kernel.shape}")
    if groups == 1:
        out = _conv_dense(x, kernel, s, p, d, ho, wo)
    elif Ci == 1 and Co == C:
        out = _conv_depthwise(x, kernel, s, p, d, ho, wo)
    else:
        cin, cout = C // groups, Co // groups
        outs = [
            conv2d(x[:, g * cin:(g + 1) * cin], kernel[g * cout:(g + 1) * cout], None, s, p, d, 1)
            for g in range(groups)
        ]
        out = concat(outs, axis=1)
    if bias is not None:
        out = add(out, reshape(bias, (1, Co, 1, 1)))
    return out


def _conv_dense(x: Tensor, kernel: Tensor, s, p, d, ho, wo) -> Tensor:
    B, C, H, W = x.shape
    Co, Ci, kh, kw = kernel.shape
    wmat = kernel.data.reshape(Co, Ci * kh * kw)
    if kh == kw == 1 and s == 1 and p == 0:
        cols = x.data.reshape(B, C, H * W)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
        cols = np.empty((B, C, kh, kw, ho, wo))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = _window(xp, i, j, ho, wo, s, d)
        cols = cols.reshape(B, C * kh * kw, ho * wo)
    out = (wmat @ cols).reshape(B, Co, ho, wo)

    def backward(g):
        g = g.reshape(B, Co, ho * wo)
        gk = None
        if kernel.requires_grad:
            # per-sample BLAS on transposed views; tensordot would copy both operands
            gk = g[0] @ cols[0].T
            for b in range(1, B):
                gk += g[b] @ cols[b].T
            gk = gk.reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ g
            if kh == kw == 1 and s == 1 and p == 0:
                gx = gcols.reshape(x.shape)
            else:
                gcols = gcols.reshape(B, C, kh, kw, ho, wo)
                gxp = np.zeros((B, C, H + 2 * p, W + 2 * p))
                for i in range(kh):
                    for j in range(kw):
                        _window(gxp, i, j, ho, wo, s, d)[...] += gcols[:, :, i, j]
                gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        return gx, gk

    return make_op(out, (x, kernel), backward, "conv2d")


def _conv_depthwise(x: Tensor, kernel: Tensor, s, p, d, ho, wo) -> Tensor:
    B, C, H, W = x.shape
    _, _, kh, kw = kernel.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    kd = kernel.data[:, 0]
    out = np.zeros((B, C, ho, wo))
    for i in range(kh):
        for j in range(kw):
            out += _window(xp, i, j, ho, wo, s, d) * kd[:, i, j][None, :, None, None]

    def backward(g):
        gk = None
        if kernel.requires_grad:
            gk = np.empty(kernel.shape)
            for i in range(kh):
                for j in range(kw):
                    gk[:, 0, i, j] = np.einsum("bchw,bchw->c", g, _window(xp, i, j, ho, wo, s, d))
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    _window(gxp, i, j, ho, wo, s, d)[...] += g * kd[:, i, j][None, :, None, None]
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        return gx, gk

    return make_op(out, (x, kernel), backward, "conv2d_dw")


# -- resampling ----------------------------------------------------------------

def _separable(x: Tensor, mh: np.ndarray, mw: np.ndarray, op: str) -> Tensor:
    """``y = mh @ x @ mw.T`` over the last two axes."""
    mwt = mw.T

    def backward(g):
        return (mh.T @ g @ mw,)

    return make_op(mh @ x.data @ mwt, (x,), backward, op)


def _adaptive_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def pool_adaptive_avg(x, out_h: int, out_w: int) -> Tensor:
    """Adaptive average pooling with windows ``floor(i*n/out) .. ceil((i+1)*n/out)``."""
    x = as_tensor(x)
    H, W = x.shape[-2:]
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"adaptive pool target ({out_h}, {out_w}) must be positive")
    if out_h > H or out_w > W:
        raise ShapeError(f"adaptive pool target ({out_h}, {out_w}) exceeds input extent ({H}, {W})")
    return _separable(x, _adaptive_matrix(H, out_h), _adaptive_matrix(W, out_w), "pool_adaptive_avg")


def upsample_nearest(x, factor: int) -> Tensor:
    x = as_tensor(x)
    f = int(factor)
    if f == 1:
        return x
    B, C, H, W = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (B, C, H, f, W, f)).reshape(B, C, H * f, W * f)

    def backward(g):
        return (g.reshape(B, C, H, f, W, f).sum(axis=(3, 5)),)

    return make_op(np.ascontiguousarray(out), (x,), backward, "upsample_nearest")


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centers, edge-clamped
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m


def upsample_bilinear(x, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    H, W = x.shape[-2:]
    return _separable(x, _bilinear_matrix(H, out_h), _bilinear_matrix(W, out_w), "upsample_bilinear")


# -- normalisation ---------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_op(s, (x,), backward, "softmax")


def layer_norm(x, weight=None, bias=None, axis: int = 1, eps: float = 1e-5) -> Tensor:
    """Normalise over one axis (channels by default), then apply a per-channel affine."""
    x = as_tensor(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    out = make_op(xhat, (x,), backward, "layer_norm")
    if weight is not None or bias is not None:
        shape = [1] * x.ndim
        shape[axis] = n
        if weight is not None:
            out = mul(out, reshape(weight, tuple(shape)))
        if bias is not None:
            out = add(out, reshape(bias, tuple(shape)))
    return out
