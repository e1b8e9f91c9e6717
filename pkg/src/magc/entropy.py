"""Probability modeling for the quantized codes.

Per-element Gaussian conditionals come from the hyperprior features plus a
channel-wise autoregressive context over code slices; the side information
gets a per-channel factorized Gaussian prior. Rate estimation has two modes:
a differentiable additive-noise relaxation used while training, and a
discrete mode that sums -log2 of the exact bin probabilities of the rounded
symbols (the quantity the range coder approaches).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ops
from .engine.module import Conv2d, Module
from .engine.tensor import Tensor
from .errors import ShapeError

SIGMA_FLOOR = 0.01
P_MIN_DISCRETE = 2.0 ** -16   # bin-probability clamp used for coder accounting
P_MIN_NOISE = 2.0 ** -60      # underflow guard for the training relaxation


@dataclass
class GaussianField:
    """Per-element (mu, sigma) parameterizing the conditional code model."""

    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.data.shape != self.sigma.data.shape:
            raise ShapeError(f"GaussianField: mu {self.mu.data.shape} "
                             f"vs sigma {self.sigma.data.shape}")

    @property
    def shape(self):
        return self.mu.data.shape


@dataclass
class RateEstimate:
    bits: float
    clamped: int


def ste_quantize(y: Tensor) -> Tensor:
    """Round half away from zero in the forward pass, identity gradient."""
    return ops.ste_round(y)


@dataclass(frozen=True)
class SliceLayout:
    """Contiguous, disjoint channel ranges covering all M code channels."""

    total_channels: int
    ranges: tuple[tuple[int, int], ...]

    @classmethod
    def even(cls, total_channels: int, k: int) -> "SliceLayout":
        if k < 1 or k > total_channels:
            raise ShapeError(f"SliceLayout: K={k} invalid for {total_channels} channels")
        base = total_channels // k
        rem = total_channels % k
        ranges = []
        start = 0
        for i in range(k):
            width = base + (1 if i < rem else 0)
            ranges.append((start, start + width))
            start += width
        return cls(total_channels, tuple(ranges))

    @property
    def k(self) -> int:
        return len(self.ranges)

    def widths(self) -> list[int]:
        return [b - a for a, b in self.ranges]

    def split(self, y: Tensor) -> list[Tensor]:
        if y.data.shape[1] != self.total_channels:
            raise ShapeError(f"SliceLayout: tensor has {y.data.shape[1]} channels, "
                             f"layout covers {self.total_channels}")
        parts = []
        for a, b in self.ranges:
            sl = y.data[:, a:b]
            t = Tensor(sl.copy(), requires_grad=y.requires_grad, parents=(y,), check=False)
            if t.requires_grad:
                def bwd(g, a=a, b=b):
                    full = np.zeros_like(y.data)
                    full[:, a:b] = g
                    y.accumulate_grad(full)
                t._backward = bwd
            parts.append(t)
        return parts


class ChannelContext(Module):
    """Autoregressive Gaussian predictor over code slices.

    Slice i sees the hyper features plus the already-decoded slices < i,
    never anything later: two hidden 3x3 convs, then mu / raw-sigma heads
    with sigma floored at SIGMA_FLOOR through a softplus.
    """

    def __init__(self, gc_channels: int, layout: SliceLayout, hidden: int,
                 rng: np.random.Generator):
        super().__init__()
        self.layout = layout
        self.gc_channels = gc_channels
        self.body1 = []
        self.body2 = []
        self.head_mu = []
        self.head_sigma = []
        widths = layout.widths()
        for i in range(layout.k):
            cin = gc_channels + sum(widths[:i])
            self.body1.append(Conv2d(cin, hidden, 3, rng))
            self.body2.append(Conv2d(hidden, hidden, 3, rng))
            self.head_mu.append(Conv2d(hidden, widths[i], 3, rng))
            sig_head = Conv2d(hidden, widths[i], 3, rng)
            # start with wide conditionals so early training keeps gradient signal
            sig_head.b.data[:] = 1.8545  # softplus(1.8545) ~= 2.0
            self.head_sigma.append(sig_head)

    def predict(self, gc: Tensor, decoded_slices: list[Tensor], i: int) -> GaussianField:
        """Gaussian field for slice i given slices 0..i-1 (causal)."""
        if gc.data.shape[1] != self.gc_channels:
            raise ShapeError(f"context: gc has {gc.data.shape[1]} channels, "
                             f"expected {self.gc_channels}")
        if len(decoded_slices) != i:
            raise ShapeError(f"context: slice {i} needs exactly {i} decoded slices, "
                             f"got {len(decoded_slices)}")
        x = gc if not decoded_slices else ops.concat([gc] + list(decoded_slices), axis=1)
        x = ops.leaky_relu(self.body1[i](x), 0.2)
        x = ops.leaky_relu(self.body2[i](x), 0.2)
        mu = self.head_mu[i](x)
        sigma = ops.clamp_min(ops.softplus(self.head_sigma[i](x)), SIGMA_FLOOR)
        return GaussianField(mu, sigma)


class FactorizedPrior(Module):
    """Per-channel learnable Gaussian prior for the quantized side information."""

    def __init__(self, channels: int):
        super().__init__()
        self.loc = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.log_scale = Tensor(np.full(channels, np.log(2.0), dtype=np.float32),
                                requires_grad=True)
        self.channels = channels

    def field_for(self, like: Tensor) -> GaussianField:
        shape = like.data.shape
        if len(shape) != 4 or shape[1] != self.channels:
            raise ShapeError(f"factorized prior: expected (N,{self.channels},H,W), "
                             f"got {shape}")
        mu = ops.expand_channel(self.loc, shape)
        scale = ops.expand_channel(self.log_scale, shape)
        # exp via softplus-free path: sigma = max(exp(log_scale), floor)
        sig = Tensor(np.exp(scale.data), requires_grad=scale.requires_grad,
                     parents=(scale,), check=False)
        if sig.requires_grad:
            sd = sig.data.copy()
            sig._backward = lambda g: scale.accumulate_grad(g * sd)
        return GaussianField(mu, ops.clamp_min(sig, SIGMA_FLOOR))


def gaussian_bin_probability(field: GaussianField, symbols: np.ndarray) -> np.ndarray:
    """Exact unit-bin probabilities of integer symbols under the field (float64)."""
    return ops.gaussian_bin_prob(np.asarray(symbols, dtype=np.float64),
                                 field.mu.data, field.sigma.data)


def estimate_rate_noise(y: Tensor, field: GaussianField,
                        rng: np.random.Generator | None = None,
                        noise: np.ndarray | None = None) -> Tensor:
    """Differentiable total-bits estimate under additive U(-1/2,1/2) relaxation."""
    if noise is None:
        if rng is None:
            raise ValueError("estimate_rate_noise: need rng or explicit noise")
        noise = rng.uniform(-0.5, 0.5, size=y.data.shape).astype(y.data.dtype)
    if noise.shape != y.data.shape:
        raise ShapeError("estimate_rate_noise: noise shape mismatch")
    y_tilde = ops.add(y, Tensor(noise, check=False))
    nll, _ = ops.gaussian_bin_nll(y_tilde, field.mu, field.sigma, p_floor=P_MIN_NOISE)
    return ops.sum_all(nll)


def estimate_rate_discrete(values: np.ndarray, field: GaussianField) -> RateEstimate:
    """Shannon bit count of rounded symbols; bins clamped at P_MIN_DISCRETE."""
    symbols = ops.round_half_away(np.asarray(values, dtype=np.float64))
    p = gaussian_bin_probability(field, symbols)
    clamped = int((p < P_MIN_DISCRETE).sum())
    bits = float(-np.log2(np.maximum(p, P_MIN_DISCRETE)).sum())
    return RateEstimate(bits=bits, clamped=clamped)
