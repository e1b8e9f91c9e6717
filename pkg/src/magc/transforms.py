"""Latent analysis/synthesis transforms with semantic conditioning.

The analysis path stacks conditioned residual blocks with strided
downsampling convs; synthesis mirrors it with pixel-shuffle upsampling.
Class rasters enter as one-hot planes through a small semantic encoder whose
output is average-pooled to each scale and injected by SPADE blocks
(per-position scale and bias predicted from the map features). An ablation
flag swaps the SPADE blocks for plain residual blocks, removing the map from
the coding path entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MapRaster
from .engine import ops
from .engine.module import BatchNorm2d, Conv2d, Module
from .engine.tensor import Tensor
from .errors import ShapeError


@dataclass
class TransformConfig:
    n: int = 128                # intermediate feature channels
    m: int = 64                 # compact code channels
    latent_channels: int = 4
    scales: int = 2             # stride-2 stages in analysis/synthesis
    map_classes: int = 4
    spade_hidden: int = 64
    use_map: bool = True        # False: plain residual blocks, map ignored

    def __post_init__(self):
        if min(self.n, self.m, self.latent_channels, self.scales) < 1:
            raise ShapeError("TransformConfig: n, m, latent_channels, scales must be >= 1")
        if self.m > self.n:
            raise ShapeError("TransformConfig: m must not exceed n")
        if self.m % 2 != 0:
            raise ShapeError("TransformConfig: m must be even (hyper path uses m/2)")


def desk_config(**overrides) -> TransformConfig:
    """Laptop-scale preset."""
    base = dict(n=32, m=16, latent_channels=4, scales=1, map_classes=4, spade_hidden=16)
    base.update(overrides)
    return TransformConfig(**base)


def paper_config(**overrides) -> TransformConfig:
    base = dict(n=128, m=64, latent_channels=4, scales=2, map_classes=4, spade_hidden=64)
    base.update(overrides)
    return TransformConfig(**base)


class SemanticEncoder(Module):
    """One-hot class planes -> feature map at the latent resolution.

    Replicate padding keeps a single-class raster mapping to a spatially
    constant feature field.
    """

    def __init__(self, cfg: TransformConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.conv1 = Conv2d(cfg.map_classes, cfg.spade_hidden, 3, rng, pad_mode="replicate")
        self.conv2 = Conv2d(cfg.spade_hidden, cfg.spade_hidden, 3, rng, pad_mode="replicate")

    def __call__(self, m: MapRaster, target_hw: tuple[int, int]) -> Tensor:
        th, tw = target_hw
        if m.height % th != 0 or m.width % tw != 0:
            raise ShapeError(f"semantic_encode: map {m.height}x{m.width} not an "
                             f"integer multiple of target {th}x{tw}")
        fy, fx = m.height // th, m.width // tw
        if fy != fx:
            raise ShapeError(f"semantic_encode: anisotropic factors {fy}x{fx}")
        x = Tensor(m.one_hot()[None], check=False)
        if fy > 1:
            x = ops.avg_downsample(x, fy)
        x = ops.leaky_relu(self.conv1(x), 0.2)
        return self.conv2(x)


class BasicBlock(Module):
    """Conv + LeakyReLU(0.2), the unit inside the SPADE affine predictor."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.leaky_relu(self.conv(x), 0.2)


class SpadeBlock(Module):
    """Normalize, then modulate with map-predicted per-position scale and bias.

    out = gamma * BN(x) + beta, where gamma/beta are convolutions over a
    shared basic block applied to concat(BN(x), f_sem).
    """

    def __init__(self, channels: int, sem_channels: int, hidden: int,
                 rng: np.random.Generator):
        super().__init__()
        self.norm = BatchNorm2d(channels)
        self.shared = BasicBlock(channels + sem_channels, hidden, rng)
        self.conv_gamma = Conv2d(hidden, channels, 3, rng)
        self.conv_beta = Conv2d(hidden, channels, 3, rng)

    def __call__(self, x: Tensor, f_sem: Tensor) -> Tensor:
        if x.data.shape[2:] != f_sem.data.shape[2:]:
            raise ShapeError(f"spade: feature {x.data.shape} vs semantic "
                             f"{f_sem.data.shape} spatial mismatch")
        if x.data.shape[0] != f_sem.data.shape[0]:
            raise ShapeError("spade: batch size mismatch")
        f_bn = self.norm(x)
        shared = self.shared(ops.concat([f_bn, f_sem], axis=1))
        gamma = self.conv_gamma(shared)
        beta = self.conv_beta(shared)
        return ops.add(ops.mul(gamma, f_bn), beta)


class SpadeResBlock(Module):
    """Two SPADE blocks with convs and a skip connection."""

    def __init__(self, channels: int, sem_channels: int, hidden: int,
                 rng: np.random.Generator):
        super().__init__()
        self.spade1 = SpadeBlock(channels, sem_channels, hidden, rng)
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.spade2 = SpadeBlock(channels, sem_channels, hidden, rng)
        # low-gain branch tail: the block starts near identity, which keeps
        # untrained stacks bounded at any depth without deadening the map path
        self.conv2 = Conv2d(channels, channels, 3, rng, init_gain=0.1)

    def __call__(self, x: Tensor, f_sem: Tensor) -> Tensor:
        h = self.conv1(ops.leaky_relu(self.spade1(x, f_sem), 0.2))
        h = self.conv2(ops.leaky_relu(self.spade2(h, f_sem), 0.2))
        return ops.add(x, h)


class PlainResBlock(Module):
    """Unconditioned counterpart used by the no-map ablation."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng, init_gain=0.1)

    def __call__(self, x: Tensor, f_sem: Tensor | None = None) -> Tensor:
        h = self.conv1(ops.leaky_relu(x, 0.2))
        h = self.conv2(ops.leaky_relu(h, 0.2))
        return ops.add(x, h)


def _res_block(cfg: TransformConfig, rng: np.random.Generator):
    if cfg.use_map:
        return SpadeResBlock(cfg.n, cfg.spade_hidden, cfg.spade_hidden, rng)
    return PlainResBlock(cfg.n, rng)


def _sem_pyramid(f_sem: Tensor | None, scales: int) -> list[Tensor | None]:
    """Semantic features pooled once per scale (full res first)."""
    if f_sem is None:
        return [None] * (scales + 1)
    pyr = [f_sem]
    for _ in range(scales):
        pyr.append(ops.avg_downsample(pyr[-1], 2))
    return pyr


class AnalysisTransform(Module):
    """Latent z (+ map) -> compact code y at 1/2^scales resolution."""

    def __init__(self, cfg: TransformConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.stem = Conv2d(cfg.latent_channels, cfg.n, 3, rng)
        self.blocks = [_res_block(cfg, rng) for _ in range(cfg.scales)]
        self.downs = [Conv2d(cfg.n, cfg.n, 5, rng, stride=2, padding=2)
                      for _ in range(cfg.scales)]
        self.head = Conv2d(cfg.n, cfg.m, 3, rng)

    def __call__(self, z: Tensor, f_sem: Tensor | None) -> Tensor:
        cfg = self.cfg
        h, w = z.data.shape[2], z.data.shape[3]
        if h % (1 << cfg.scales) or w % (1 << cfg.scales):
            raise ShapeError(f"analysis: latent dims {h}x{w} not divisible by "
                             f"{1 << cfg.scales}")
        pyr = _sem_pyramid(f_sem, cfg.scales)
        x = self.stem(z)
        for i in range(cfg.scales):
            x = self.blocks[i](x, pyr[i])
            x = self.downs[i](x)
        return self.head(x)


class SynthesisTransform(Module):
    """Quantized code (+ map) -> reconstructed latent via pixel shuffle."""

    def __init__(self, cfg: TransformConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.stem = Conv2d(cfg.m, cfg.n, 3, rng)
        self.blocks = [_res_block(cfg, rng) for _ in range(cfg.scales)]
        self.ups = [Conv2d(cfg.n, cfg.n * 4, 3, rng) for _ in range(cfg.scales)]
        self.head = Conv2d(cfg.n, cfg.latent_channels, 3, rng)

    def __call__(self, y_hat: Tensor, f_sem: Tensor | None) -> Tensor:
        cfg = self.cfg
        pyr = _sem_pyramid(f_sem, cfg.scales)
        x = self.stem(y_hat)
        for i in range(cfg.scales):
            x = self.blocks[i](x, pyr[cfg.scales - i])
            x = ops.pixel_shuffle(self.ups[i](x), 2)
        return self.head(x)


class HyperAnalysis(Module):
    """Code y -> side information h at 1/4 resolution with m/2 channels.

    Replicate padding keeps a constant code field mapping to constant side
    information (no border artifacts in the statistics stream).
    """

    def __init__(self, cfg: TransformConfig, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(cfg.m, cfg.n, 3, rng, pad_mode="replicate")
        self.down1 = Conv2d(cfg.n, cfg.n, 5, rng, stride=2, padding=2,
                            pad_mode="replicate")
        self.down2 = Conv2d(cfg.n, cfg.m // 2, 5, rng, stride=2, padding=2,
                            pad_mode="replicate")

    def __call__(self, y: Tensor) -> Tensor:
        hy, wy = y.data.shape[2], y.data.shape[3]
        if hy % 4 or wy % 4:
            raise ShapeError(f"hyper_analysis: code dims {hy}x{wy} not divisible by 4")
        x = ops.leaky_relu(self.conv1(y), 0.2)
        x = ops.leaky_relu(self.down1(x), 0.2)
        return self.down2(x)


class HyperSynthesis(Module):
    """Quantized side info -> context features gc with 2m channels at y's dims."""

    def __init__(self, cfg: TransformConfig, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(cfg.m // 2, cfg.n, 3, rng)
        self.up1 = Conv2d(cfg.n, cfg.n * 4, 3, rng)
        self.up2 = Conv2d(cfg.n, cfg.n * 4, 3, rng)
        self.head = Conv2d(cfg.n, 2 * cfg.m, 3, rng)

    def __call__(self, h_hat: Tensor) -> Tensor:
        x = ops.leaky_relu(self.conv1(h_hat), 0.2)
        x = ops.leaky_relu(ops.pixel_shuffle(self.up1(x), 2), 0.2)
        x = ops.leaky_relu(ops.pixel_shuffle(self.up2(x), 2), 0.2)
        return self.head(x)
