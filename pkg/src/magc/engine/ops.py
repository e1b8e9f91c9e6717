"""Differentiable operations on Tensors.

Every op validates shapes up front, computes the forward result, and (only
when a parent requires grad) attaches a closure that scatters the incoming
gradient back to its parents. No implicit broadcasting: the only shape-bending
ops are the explicit bias/expand helpers below.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special as _sp

from ..errors import NonFiniteError, ShapeError
from .tensor import Tensor, _check_finite

_LN2 = math.log(2.0)
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _needs(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data, requires_grad=_needs(a, b), parents=(a, b))
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g)
        out._backward = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data, requires_grad=_needs(a, b), parents=(a, b))
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(-g)
        out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data, requires_grad=_needs(a, b), parents=(a, b))
    if out.requires_grad:
        ad, bd = a.data, b.data
        def bwd(g):
            if a.requires_grad:
                a.accumulate_grad(g * bd)
            if b.requires_grad:
                b.accumulate_grad(g * ad)
        out._backward = bwd
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, requires_grad=a.requires_grad, parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(g * c)
    return out


def add_const(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + c, requires_grad=a.requires_grad, parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(g)
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data, requires_grad=a.requires_grad, parents=(a,))
    if out.requires_grad:
        ad = a.data
        out._backward = lambda g: a.accumulate_grad(g * (2.0 * ad))
    return out


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0
    out = Tensor(np.where(pos, a.data, a.data * slope),
                 requires_grad=a.requires_grad, parents=(a,))
    if out.requires_grad:
        def bwd(g):
            a.accumulate_grad(np.where(pos, g, g * slope))
        out._backward = bwd
    return out


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) in the overflow-safe form max(x,0) + log1p(exp(-|x|))
    x = a.data
    val = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(val.astype(x.dtype), requires_grad=a.requires_grad, parents=(a,))
    if out.requires_grad:
        sig = 1.0 / (1.0 + np.exp(-x))
        out._backward = lambda g: a.accumulate_grad(g * sig.astype(x.dtype))
    return out


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    keep = a.data > lo
    out = Tensor(np.maximum(a.data, lo), requires_grad=a.requires_grad, parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(np.where(keep, g, 0.0).astype(a.data.dtype))
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.asarray(a.data.mean(), dtype=a.data.dtype),
                 requires_grad=a.requires_grad, parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(np.full_like(a.data, float(g) / n))
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype),
                 requires_grad=a.requires_grad, parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(np.full_like(a.data, float(g)))
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences (scalar)."""
    return mean_all(square(sub(a, b)))


# ---------------------------------------------------------------------------
# structural ops

def concat(tensors, axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat: non-axis dims differ: {ref} vs {s}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor(out_data, requires_grad=_needs(*tensors), parents=tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        def bwd(g):
            ofs = 0
            for t, sz in zip(tensors, sizes):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(ofs, ofs + sz)
                    t.accumulate_grad(g[tuple(sl)])
                ofs += sz
        out._backward = bwd
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad, parents=(a,), check=False)
    if out.requires_grad:
        orig = a.data.shape
        out._backward = lambda g: a.accumulate_grad(g.reshape(orig))
    return out


def pixel_shuffle(a: Tensor, r: int) -> Tensor:
    """(N, C*r^2, H, W) -> (N, C, r*H, r*W); pure permutation of elements."""
    n, c2, h, w = a.data.shape
    if c2 % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: {c2} channels not divisible by r^2={r * r}")
    c = c2 // (r * r)
    val = (a.data.reshape(n, c, r, r, h, w)
           .transpose(0, 1, 4, 2, 5, 3)
           .reshape(n, c, h * r, w * r))
    out = Tensor(np.ascontiguousarray(val), requires_grad=a.requires_grad, parents=(a,), check=False)
    if out.requires_grad:
        def bwd(g):
            gi = (g.reshape(n, c, h, r, w, r)
                  .transpose(0, 1, 3, 5, 2, 4)
                  .reshape(n, c2, h, w))
            a.accumulate_grad(np.ascontiguousarray(gi))
        out._backward = bwd
    return out


def pixel_unshuffle(a: Tensor, r: int) -> Tensor:
    """(N, C, r*H, r*W) -> (N, C*r^2, H, W); exact inverse of pixel_shuffle."""
    n, c, hr, wr = a.data.shape
    if hr % r != 0 or wr % r != 0:
        raise ShapeError(f"pixel_unshuffle: spatial dims {(hr, wr)} not divisible by r={r}")
    h, w = hr // r, wr // r
    val = (a.data.reshape(n, c, h, r, w, r)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(n, c * r * r, h, w))
    out = Tensor(np.ascontiguousarray(val), requires_grad=a.requires_grad, parents=(a,), check=False)
    if out.requires_grad:
        def bwd(g):
            gi = (g.reshape(n, c, r, r, h, w)
                  .transpose(0, 1, 4, 2, 5, 3)
                  .reshape(n, c, hr, wr))
            a.accumulate_grad(np.ascontiguousarray(gi))
        out._backward = bwd
    return out


def avg_downsample(a: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean pooling by an integer factor."""
    n, c, h, w = a.data.shape
    if h % factor != 0 or w % factor != 0:
        raise ShapeError(f"avg_downsample: dims {(h, w)} not divisible by {factor}")
    oh, ow = h // factor, w // factor
    val = a.data.reshape(n, c, oh, factor, ow, factor).mean(axis=(3, 5))
    out = Tensor(val.astype(a.data.dtype), requires_grad=a.requires_grad, parents=(a,), check=False)
    if out.requires_grad:
        inv = 1.0 / (factor * factor)
        def bwd(g):
            gi = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3) * inv
            a.accumulate_grad(gi.astype(a.data.dtype))
        out._backward = bwd
    return out


def replicate_pad2d(a: Tensor, p: int) -> Tensor:
    """Edge-replication padding of the two trailing dims."""
    if p == 0:
        return a
    val = np.pad(a.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")
    out = Tensor(val, requires_grad=a.requires_grad, parents=(a,), check=False)
    if out.requires_grad:
        n, c, h, w = a.data.shape
        def bwd(g):
            # fold padded-border gradient back onto the replicated edge cells
            gi = g[:, :, p:p + h, p:p + w].copy()
            gi[:, :, 0, :] += g[:, :, :p, p:p + w].sum(axis=2)
            gi[:, :, -1, :] += g[:, :, p + h:, p:p + w].sum(axis=2)
            gi[:, :, :, 0] += g[:, :, p:p + h, :p].sum(axis=3)
            gi[:, :, :, -1] += g[:, :, p:p + h, p + w:].sum(axis=3)
            gi[:, :, 0, 0] += g[:, :, :p, :p].sum(axis=(2, 3))
            gi[:, :, 0, -1] += g[:, :, :p, p + w:].sum(axis=(2, 3))
            gi[:, :, -1, 0] += g[:, :, p + h:, :p].sum(axis=(2, 3))
            gi[:, :, -1, -1] += g[:, :, p + h:, p + w:].sum(axis=(2, 3))
            a.accumulate_grad(gi)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# bias / expansion helpers (the only sanctioned broadcasts)

def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """x (N,C,H,W) + b (C,) broadcast over batch and space."""
    n, c, h, w = x.data.shape
    if b.data.shape != (c,):
        raise ShapeError(f"add_channel_bias: bias shape {b.data.shape} != ({c},)")
    out = Tensor(x.data + b.data[None, :, None, None],
                 requires_grad=_needs(x, b), parents=(x, b), check=False)
    if out.requires_grad:
        def bwd(g):
            if x.requires_grad:
                x.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g.sum(axis=(0, 2, 3)))
        out._backward = bwd
    return out


def add_sample_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """x (N,C,H,W) + b (N,C) broadcast over space; per-sample conditioning."""
    n, c, h, w = x.data.shape
    if b.data.shape != (n, c):
        raise ShapeError(f"add_sample_channel_bias: bias shape {b.data.shape} != ({n},{c})")
    out = Tensor(x.data + b.data[:, :, None, None],
                 requires_grad=_needs(x, b), parents=(x, b), check=False)
    if out.requires_grad:
        def bwd(g):
            if x.requires_grad:
                x.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g.sum(axis=(2, 3)))
        out._backward = bwd
    return out


def expand_channel(param: Tensor, like_shape) -> Tensor:
    """Tile a (C,) parameter to a full (N,C,H,W) tensor."""
    n, c, h, w = like_shape
    if param.data.shape != (c,):
        raise ShapeError(f"expand_channel: param shape {param.data.shape} != ({c},)")
    val = np.broadcast_to(param.data[None, :, None, None], like_shape).copy()
    out = Tensor(val, requires_grad=param.requires_grad, parents=(param,), check=False)
    if out.requires_grad:
        out._backward = lambda g: param.accumulate_grad(g.sum(axis=(0, 2, 3)))
    return out


# ---------------------------------------------------------------------------
# linear / convolution

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (B,F) @ w (O,F)^T + b (O,)."""
    bsz, f = x.data.shape
    o, f2 = w.data.shape
    if f != f2 or b.data.shape != (o,):
        raise ShapeError(f"linear: incompatible shapes x{x.data.shape} w{w.data.shape} b{b.data.shape}")
    out = Tensor(x.data @ w.data.T + b.data[None, :],
                 requires_grad=_needs(x, w, b), parents=(x, w, b))
    if out.requires_grad:
        def bwd(g):
            if x.requires_grad:
                x.accumulate_grad(g @ w.data)
            if w.requires_grad:
                w.accumulate_grad(g.T @ x.data)
            if b.requires_grad:
                b.accumulate_grad(g.sum(axis=0))
        out._backward = bwd
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, k, k, oh, ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * k * k, oh * ow)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW x OIkk, zero padding.

    Output spatial size is floor((H + 2p - k)/s) + 1.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input/weight, got {x.data.shape}/{w.data.shape}")
    n, c, h, wdt = x.data.shape
    o, ci, kh, kw = w.data.shape
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels supported, got {(kh, kw)}")
    k = kh
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    if b.data.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({o},)")
    if h + 2 * padding < k or wdt + 2 * padding < k:
        raise ShapeError(f"conv2d: spatial dims {(h, wdt)} + 2*{padding} smaller than kernel {k}")
    _check_finite(x.data, "conv2d input")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wdt + 2 * padding - k) // stride + 1
    xp = x.data if padding == 0 else np.pad(
        x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride, oh, ow)                       # (N, C*k*k, L)
    w2 = w.data.reshape(o, c * k * k)
    val = np.matmul(w2[None], cols).reshape(n, o, oh, ow) + b.data[None, :, None, None]
    out = Tensor(val.astype(x.data.dtype, copy=False),
                 requires_grad=_needs(x, w, b), parents=(x, w, b))
    if out.requires_grad:
        def bwd(g):
            g2 = g.reshape(n, o, oh * ow)
            if b.requires_grad:
                b.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if w.requires_grad:
                # one GEMM over the flattened batch instead of a batched
                # matmul plus reduction
                gflat = g2.transpose(1, 0, 2).reshape(o, n * oh * ow)
                cflat = cols.transpose(1, 0, 2).reshape(c * k * k, n * oh * ow)
                dw = gflat @ cflat.T
                w.accumulate_grad(dw.reshape(o, c, k, k))
            if x.requires_grad:
                dcols = np.matmul(w2.T[None], g2)               # (N, C*k*k, L)
                dcr = dcols.reshape(n, c, k, k, oh, ow)
                dxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcr[:, :, i, j]
                if padding:
                    dxp = dxp[:, :, padding:padding + h, padding:padding + wdt]
                x.accumulate_grad(dxp)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# batch normalization (no affine; modulation lives in the conditioning blocks)

def batch_norm(x: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N,H,W); statistics in float64.

    Train mode updates running stats in place; eval mode uses them as-is.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm: expected NCHW, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if training:
        if n * h * w < 2:
            raise ShapeError("batch_norm: train mode needs at least 2 elements per channel")
        x64 = x.data.astype(np.float64)
        mean = x64.mean(axis=(0, 2, 3))
        var = x64.var(axis=(0, 2, 3))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean
        running_var *= (1.0 - momentum)
        running_var += momentum * var
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        x64 = x.data.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xn64 = (x64 - mean[None, :, None, None]) * inv_std[None, :, None, None]
    xn = xn64.astype(x.data.dtype)
    out = Tensor(xn, requires_grad=x.requires_grad, parents=(x,), check=False)
    if out.requires_grad:
        ivs = inv_std.astype(x.data.dtype)[None, :, None, None]
        if training:
            def bwd(g):
                gm = g.mean(axis=(0, 2, 3), keepdims=True)
                gxn = (g * xn).mean(axis=(0, 2, 3), keepdims=True)
                x.accumulate_grad(ivs * (g - gm - xn * gxn))
        else:
            def bwd(g):
                x.accumulate_grad(ivs * g)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# quantization / rate

def ste_round(a: Tensor) -> Tensor:
    """Round half away from zero; straight-through (identity) gradient."""
    val = np.trunc(a.data + np.copysign(0.5, a.data))
    out = Tensor(val.astype(a.data.dtype), requires_grad=a.requires_grad, parents=(a,), check=False)
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(g)
    return out


def round_half_away(arr: np.ndarray) -> np.ndarray:
    """Numpy-level round-half-away-from-zero (coder-side symbol rule)."""
    return np.trunc(arr + np.copysign(0.5, arr))


def gaussian_bin_prob(values: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """P[value falls in its unit-width bin] under N(mu, sigma^2), float64.

    Computed as Phi((|d|+1/2)/sigma) - Phi((|d|-1/2)/sigma) via erfc so the
    far tails keep relative precision; exactly symmetric in (value-mu).
    """
    d = np.abs(values.astype(np.float64) - mu.astype(np.float64))
    s = sigma.astype(np.float64) * _SQRT2
    return 0.5 * (_sp.erfc((d - 0.5) / s) - _sp.erfc((d + 0.5) / s))


def gaussian_bin_nll(y: Tensor, mu: Tensor, sigma: Tensor,
                     p_floor: float = 2.0 ** -60) -> tuple[Tensor, int]:
    """Per-element -log2 of the unit-bin probability; differentiable in all args.

    Probabilities below p_floor are clamped (zero gradient there); returns the
    nll tensor and the number of clamped elements.
    """
    _same_shape(y, mu, "gaussian_bin_nll")
    _same_shape(y, sigma, "gaussian_bin_nll")
    yv = y.data.astype(np.float64)
    mv = mu.data.astype(np.float64)
    sv = sigma.data.astype(np.float64)
    p = gaussian_bin_prob(yv, mv, sv)
    clamped = p < p_floor
    n_clamped = int(clamped.sum())
    p_eff = np.maximum(p, p_floor)
    nll = (-np.log2(p_eff)).astype(y.data.dtype)
    out = Tensor(nll, requires_grad=_needs(y, mu, sigma), parents=(y, mu, sigma), check=False)
    if out.requires_grad:
        d = yv - mv
        a = (d - 0.5) / sv
        bb = (d + 0.5) / sv
        phi_a = _INV_SQRT_2PI * np.exp(-0.5 * a * a)
        phi_b = _INV_SQRT_2PI * np.exp(-0.5 * bb * bb)
        # d(nll)/dp = -1/(p ln2); zero where clamped
        dnll_dp = np.where(clamped, 0.0, -1.0 / (p_eff * _LN2))
        dp_dy = (phi_b - phi_a) / sv
        dp_dsigma = -(phi_b * bb - phi_a * a) / sv
        def bwd(g):
            g64 = g.astype(np.float64)
            if y.requires_grad:
                y.accumulate_grad((g64 * dnll_dp * dp_dy).astype(y.data.dtype))
            if mu.requires_grad:
                mu.accumulate_grad((g64 * dnll_dp * (-dp_dy)).astype(mu.data.dtype))
            if sigma.requires_grad:
                sigma.accumulate_grad((g64 * dnll_dp * dp_dsigma).astype(sigma.data.dtype))
        out._backward = bwd
    return out, n_clamped
