"""Deterministic pixel autoencoder: images to 4-channel latents and back.

Encoder stacks stride-2 convs down to a 1/factor-resolution latent; the
decoder mirrors it with pixel-shuffle upsampling. Trained with plain MSE --
the latent is treated as a fixed transform by the rest of the pipeline, so
no stochastic sampling and no KL term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ImageBuffer
from .engine import ops
from .engine.checkpoint import fnv1a64, load_checkpoint, save_checkpoint
from .engine.module import Conv2d, Module
from .engine.optim import AdamW
from .engine.tensor import Tensor
from .errors import FormatError, NumericError, ShapeError


@dataclass
class AutoencoderConfig:
    factor: int = 8            # spatial reduction; power of two
    latent_channels: int = 4
    width: int = 32

    def __post_init__(self):
        if self.factor < 2 or self.factor & (self.factor - 1):
            raise ShapeError(f"AutoencoderConfig: factor {self.factor} not a power of 2 >= 2")

    @property
    def levels(self) -> int:
        return int(math.log2(self.factor))


class PixelEncoder(Module):
    """Strided stem keeps every wide conv below full resolution."""

    def __init__(self, cfg: AutoencoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.stem = Conv2d(3, cfg.width, 5, rng, stride=2, padding=2)
        self.downs = [Conv2d(cfg.width, cfg.width, 5, rng, stride=2, padding=2)
                      for _ in range(cfg.levels - 1)]
        self.mix = Conv2d(cfg.width, cfg.width, 3, rng)
        self.head = Conv2d(cfg.width, cfg.latent_channels, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.leaky_relu(self.stem(x), 0.2)
        for d in self.downs:
            h = ops.leaky_relu(d(h), 0.2)
        h = ops.leaky_relu(self.mix(h), 0.2)
        return self.head(h)


class PixelDecoder(Module):
    """Mirror with pixel-shuffle ups; the last up emits RGB directly."""

    def __init__(self, cfg: AutoencoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.stem = Conv2d(cfg.latent_channels, cfg.width, 3, rng)
        self.mix = Conv2d(cfg.width, cfg.width, 3, rng)
        self.ups = [Conv2d(cfg.width, cfg.width * 4, 3, rng)
                    for _ in range(cfg.levels - 1)]
        self.head = Conv2d(cfg.width, 3 * 4, 3, rng)

    def __call__(self, z: Tensor) -> Tensor:
        h = ops.leaky_relu(self.stem(z), 0.2)
        h = ops.leaky_relu(self.mix(h), 0.2)
        for u in self.ups:
            h = ops.leaky_relu(ops.pixel_shuffle(u(h), 2), 0.2)
        return ops.pixel_shuffle(self.head(h), 2)


class PixelAutoencoder(Module):
    def __init__(self, cfg: AutoencoderConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or AutoencoderConfig()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.vae = _VaePair(cfg, rng)
        self.hash = 0

    def encode_image(self, img: ImageBuffer) -> Tensor:
        f = self.cfg.factor
        if img.height % f or img.width % f:
            raise ShapeError(f"encode_image: {img.height}x{img.width} not divisible "
                             f"by factor {f}")
        x = Tensor(img.to_chw()[None], check=False)
        return self.vae.enc(x)

    def decode_latent(self, z: Tensor | np.ndarray) -> ImageBuffer:
        if isinstance(z, np.ndarray):
            z = Tensor(z.astype(np.float32))
        if z.data.ndim == 3:
            z = Tensor(z.data[None], check=False)
        if z.data.shape[1] != self.cfg.latent_channels:
            raise ShapeError(f"decode_latent: {z.data.shape[1]} channels, expected "
                             f"{self.cfg.latent_channels}")
        out = self.vae.dec(z)
        return ImageBuffer.from_chw(np.clip(out.data[0], 0.0, 1.0))

    def forward_batch(self, x: Tensor) -> Tensor:
        """Unclamped reconstruction used by the training loss."""
        return self.vae.dec(self.vae.enc(x))

    # persistence ----------------------------------------------------------

    def _config_vector(self) -> np.ndarray:
        return np.array([self.cfg.factor, self.cfg.latent_channels, self.cfg.width],
                        dtype=np.float32)

    def save(self, path: str | Path) -> None:
        state = {"cfg.vals": self._config_vector()}
        state.update(self.state_dict())
        save_checkpoint(state, path)
        self.hash = fnv1a64(Path(path).read_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "PixelAutoencoder":
        state = load_checkpoint(path)
        if "cfg.vals" not in state:
            raise FormatError(f"{path}: checkpoint lacks config vector")
        v = state.pop("cfg.vals")
        model = cls(AutoencoderConfig(factor=int(v[0]), latent_channels=int(v[1]),
                                      width=int(v[2])))
        model.load_state_dict(state)
        model.hash = fnv1a64(Path(path).read_bytes())
        return model


class _VaePair(Module):
    """Holds encoder/decoder under the checkpoint prefixes vae.enc / vae.dec."""

    def __init__(self, cfg: AutoencoderConfig, rng: np.random.Generator):
        super().__init__()
        self.enc = PixelEncoder(cfg, rng)
        self.dec = PixelDecoder(cfg, rng)


def normalize_latent_scale(model: PixelAutoencoder, images: list[ImageBuffer],
                           target_std: float = 4.0) -> float:
    """Rescale so encoder outputs have a fixed std over the given images.

    The encoder head and decoder stem are linear convs, so folding the factor
    into their weights leaves every decoded image bit-unchanged while giving
    downstream consumers a well-conditioned latent. The default target places
    the compression trade-off weights on the active part of the
    rate-distortion frontier: with unit-step quantization, a latent std of ~4
    makes each grid weight pick a distinct rate.
    """
    model.set_training(False)
    stds = [float(model.encode_image(img).data.std()) for img in images]
    scale = float(np.mean(stds)) / target_std
    if scale <= 0 or not np.isfinite(scale):
        raise NumericError(f"normalize_latent_scale: bad latent std {scale}")
    model.vae.enc.head.w.data /= scale
    model.vae.enc.head.b.data /= scale
    model.vae.dec.stem.w.data *= scale
    return scale


def train_autoencoder(model: PixelAutoencoder, images: list[ImageBuffer],
                      steps: int, lr: float = 1e-3, batch_size: int = 8,
                      seed: int = 0, log_every: int = 0) -> list[float]:
    """MSE training loop; returns the per-step loss trace."""
    if len(images) < 2 and steps > 0 and batch_size > 1:
        batch_size = 1
    if not images:
        raise ShapeError("train_autoencoder: need at least one image")
    rng = np.random.default_rng(seed)
    stack = np.stack([img.to_chw() for img in images])
    opt = AdamW(model.named_parameters(), lr=lr, weight_decay=1e-4)
    model.set_training(True)
    trace: list[float] = []
    for step in range(steps):
        idx = rng.integers(0, len(images), size=min(batch_size, len(images)))
        x = Tensor(stack[idx], check=False)
        out = model.forward_batch(x)
        loss = ops.mse(out, x)
        lv = loss.item()
        if not np.isfinite(lv):
            raise NumericError(f"train_autoencoder: loss diverged at step {step}")
        trace.append(lv)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and step % log_every == 0:
            print(f"  vae step {step}: mse={lv:.6f}")
    model.set_training(False)
    return trace
