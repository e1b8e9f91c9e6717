"""Toy conditional latent diffusion.

Forward corruption and ancestral sampling follow the standard
epsilon-prediction formulation: z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps,
with posterior-variance sampling over an evenly strided timestep subsequence.
Conditioning is twofold: the reconstructed latent is concatenated onto the
noisy latent at the denoiser input (the extra input channels start at zero),
and map-derived multi-scale features are added to the denoiser's encoder
features at each scale through zero-initialized projections, so both hooks
are inert until trained.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import MapRaster
from .engine import ops
from .engine.checkpoint import fnv1a64, load_checkpoint, save_checkpoint
from .engine.module import Conv2d, Linear, Module
from .engine.optim import AdamW
from .engine.tensor import Tensor
from .errors import FormatError, NonFiniteError, NumericError, ShapeError

NUM_SCALES = 4


@dataclass
class NoiseSchedule:
    """Linear-beta schedule; index 0 is the clean state (abar_0 = 1)."""

    betas: np.ndarray       # (T+1,), betas[0] unused
    alpha_bar: np.ndarray   # (T+1,), strictly decreasing from 1.0

    @classmethod
    def linear(cls, t_max: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.zeros(t_max + 1, dtype=np.float64)
        betas[1:] = np.linspace(beta_start, beta_end, t_max)
        alpha_bar = np.cumprod(1.0 - betas)
        return cls(betas=betas, alpha_bar=alpha_bar)

    def __post_init__(self):
        if np.any(self.betas[1:] <= 0) or np.any(self.betas[1:] >= 1):
            raise ShapeError("NoiseSchedule: betas must lie in (0,1)")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ShapeError("NoiseSchedule: alpha_bar must be strictly decreasing")
        if not (0.0 < self.alpha_bar[0] <= 1.0):
            raise ShapeError("NoiseSchedule: alpha_bar[0] must be in (0,1]")

    @property
    def t_max(self) -> int:
        return len(self.betas) - 1


def forward_diffuse(z0: np.ndarray, t: int, eps: np.ndarray,
                    schedule: NoiseSchedule) -> np.ndarray:
    """Corrupt z0 to timestep t with the given noise draw."""
    if not 0 <= t <= schedule.t_max:
        raise ShapeError(f"forward_diffuse: t={t} outside [0, {schedule.t_max}]")
    if eps.shape != z0.shape:
        raise ShapeError("forward_diffuse: noise shape mismatch")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def denoise_step(z_t: np.ndarray, t: int, s: int, eps_hat: np.ndarray,
                 schedule: NoiseSchedule, noise: np.ndarray | None = None) -> np.ndarray:
    """One ancestral transition t -> s (s < t), posterior variance.

    At s=0 the posterior collapses to the predicted clean latent, so a
    perfect noise estimate inverts the corruption exactly.
    """
    if not 0 <= s < t <= schedule.t_max:
        raise ShapeError(f"denoise_step: invalid transition {t} -> {s}")
    ab_t = schedule.alpha_bar[t]
    ab_s = schedule.alpha_bar[s]
    z0_hat = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    alpha_ts = ab_t / ab_s
    beta_ts = 1.0 - alpha_ts
    coef0 = np.sqrt(ab_s) * beta_ts / (1.0 - ab_t)
    coeft = np.sqrt(alpha_ts) * (1.0 - ab_s) / (1.0 - ab_t)
    mean = coef0 * z0_hat + coeft * z_t
    var = (1.0 - ab_s) / (1.0 - ab_t) * beta_ts
    if var > 0 and noise is not None:
        return mean + np.sqrt(var) * noise
    return mean


def sample_taus(t_max: int, steps: int) -> list[int]:
    """Evenly strided decreasing timesteps from t_max down toward 1."""
    if steps < 1:
        raise ShapeError("sample_taus: steps must be >= 1")
    taus = np.unique(np.rint(np.linspace(t_max, 1, steps)).astype(int))[::-1]
    return [int(t) for t in taus]


def time_embedding(t: np.ndarray, dim: int, t_max: int) -> np.ndarray:
    """Sinusoidal features of normalized timesteps, shape (batch, dim)."""
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    ang = (t[:, None].astype(np.float64) / t_max) * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if emb.shape[1] < dim:
        emb = np.concatenate([emb, np.zeros((len(t), dim - emb.shape[1]))], axis=1)
    return emb.astype(np.float32)


@dataclass
class DenoiserConfig:
    width: int = 16
    latent_channels: int = 4
    map_classes: int = 4
    sem_hidden: int = 16
    use_sam: bool = True
    t_max: int = 1000

    @property
    def scale_widths(self) -> list[int]:
        w = self.width
        return [w, 2 * w, 2 * w, 4 * w]

    @property
    def in_channels(self) -> int:
        # noisy latent plus concatenated guidance latent
        return 2 * self.latent_channels


class _TimedResBlock(Module):
    def __init__(self, channels: int, temb_dim: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng, init_gain=0.1)
        self.proj = Linear(temb_dim, channels, rng)

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(ops.leaky_relu(x, 0.2))
        h = ops.add_sample_channel_bias(h, self.proj(temb))
        h = self.conv2(ops.leaky_relu(h, 0.2))
        return ops.add(x, h)


class _PlainResBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng, init_gain=0.1)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv1(ops.leaky_relu(x, 0.2))
        h = self.conv2(ops.leaky_relu(h, 0.2))
        return ops.add(x, h)


class UNetDenoiser(Module):
    """Four-scale U-Net over the latent; predicts the injected noise."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        widths = cfg.scale_widths
        temb = widths[0]
        self.temb_dim = temb
        self.t1 = Linear(temb, temb, rng)
        self.t2 = Linear(temb, temb, rng)
        self.stem = Conv2d(cfg.in_channels, widths[0], 3, rng)
        self.enc = [_TimedResBlock(widths[i], temb, rng) for i in range(NUM_SCALES)]
        self.downs = [Conv2d(widths[i], widths[i + 1], 5, rng, stride=2, padding=2)
                      for i in range(NUM_SCALES - 1)]
        self.ups = [Conv2d(widths[i + 1], widths[i] * 4, 3, rng)
                    for i in reversed(range(NUM_SCALES - 1))]
        self.fuse = [Conv2d(2 * widths[i], widths[i], 3, rng)
                     for i in reversed(range(NUM_SCALES - 1))]
        self.dec = [_TimedResBlock(widths[i], temb, rng)
                    for i in reversed(range(NUM_SCALES - 1))]
        self.head = Conv2d(widths[0], cfg.latent_channels, 3, rng, zero_init=True)

    def _embed(self, t: np.ndarray) -> Tensor:
        emb = Tensor(time_embedding(t, self.temb_dim, self.cfg.t_max), check=False)
        return self.t2(ops.leaky_relu(self.t1(emb), 0.2))

    def __call__(self, x: Tensor, t: np.ndarray,
                 f_ms: list[Tensor] | None = None) -> Tensor:
        if x.data.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"denoiser: input has {x.data.shape[1]} channels, "
                             f"expected {self.cfg.in_channels}")
        temb = self._embed(t)
        h = self.stem(x)
        feats: list[Tensor] = []
        for i in range(NUM_SCALES):
            h = self.enc[i](h, temb)
            if f_ms is not None:
                h = ops.add(h, f_ms[i])
            feats.append(h)
            if i < NUM_SCALES - 1:
                h = self.downs[i](h)
        h = feats[-1]
        for j in range(NUM_SCALES - 1):
            h = ops.pixel_shuffle(self.ups[j](h), 2)
            skip = feats[NUM_SCALES - 2 - j]
            h = self.fuse[j](ops.concat([h, skip], axis=1))
            h = self.dec[j](h, temb)
        return self.head(h)

    def encoder_shapes(self, hw: tuple[int, int]) -> list[tuple[int, int, int]]:
        """(channels, H, W) of each encoder scale for a given latent size."""
        h, w = hw
        out = []
        for i, c in enumerate(self.cfg.scale_widths):
            out.append((c, h >> i, w >> i))
        return out


class SemanticAdapter(Module):
    """Map raster -> multi-scale guidance features matching the denoiser encoder.

    The encoded map is concatenated with the noisy latent, run through
    residual blocks per scale, and projected by zero-initialized convs, so the
    produced features are exactly zero before training.
    """

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        widths = cfg.scale_widths
        self.se1 = Conv2d(cfg.map_classes, cfg.sem_hidden, 3, rng, pad_mode="replicate")
        self.se2 = Conv2d(cfg.sem_hidden, cfg.sem_hidden, 3, rng, pad_mode="replicate")
        self.stem = Conv2d(cfg.sem_hidden + cfg.latent_channels, widths[0], 3, rng)
        self.res0 = _PlainResBlock(widths[0], rng)
        self.downs = [Conv2d(widths[i], widths[i + 1], 5, rng, stride=2, padding=2)
                      for i in range(NUM_SCALES - 1)]
        self.res_a = [_PlainResBlock(widths[i + 1], rng) for i in range(NUM_SCALES - 1)]
        self.res_b = [_PlainResBlock(widths[i + 1], rng) for i in range(NUM_SCALES - 1)]
        self.projs = [Conv2d(widths[i], widths[i], 1, rng, zero_init=True)
                      for i in range(NUM_SCALES)]

    def encode_map(self, one_hot_pooled: Tensor) -> Tensor:
        x = ops.leaky_relu(self.se1(one_hot_pooled), 0.2)
        return self.se2(x)

    def __call__(self, f_map: Tensor, z_t: Tensor) -> list[Tensor]:
        if f_map.data.shape[2:] != z_t.data.shape[2:]:
            raise ShapeError(f"adapter: map features {f_map.data.shape} vs latent "
                             f"{z_t.data.shape} spatial mismatch")
        h = self.stem(ops.concat([f_map, z_t], axis=1))
        h = self.res0(h)
        feats = [self.projs[0](h)]
        for i in range(NUM_SCALES - 1):
            h = self.downs[i](h)
            h = self.res_b[i](self.res_a[i](h))
            feats.append(self.projs[i + 1](h))
        return feats


class DenoiserModel(Module):
    """U-Net plus optional semantic adapter, persisted as one checkpoint."""

    def __init__(self, cfg: DenoiserConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or DenoiserConfig()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.unet = UNetDenoiser(cfg, rng)
        if cfg.use_sam:
            self.sam = SemanticAdapter(cfg, rng)
        self.hash = 0

    def pooled_one_hot(self, m: MapRaster, latent_hw: tuple[int, int]) -> np.ndarray:
        th, tw = latent_hw
        if m.height % th or m.width % tw:
            raise ShapeError(f"adapter: map {m.height}x{m.width} not a multiple "
                             f"of latent {th}x{tw}")
        f = m.height // th
        oh = m.one_hot()[None]
        if f > 1:
            oh = oh.reshape(1, -1, th, f, tw, f).mean(axis=(3, 5))
        return oh.astype(np.float32)

    def sam_features(self, m: MapRaster, z_t: Tensor) -> list[Tensor]:
        if not self.cfg.use_sam:
            raise ShapeError("sam_features: model built without the adapter")
        hw = (z_t.data.shape[2], z_t.data.shape[3])
        oh = self.pooled_one_hot(m, hw)
        if z_t.data.shape[0] != 1:
            oh = np.repeat(oh, z_t.data.shape[0], axis=0)
        f_map = self.sam.encode_map(Tensor(oh, check=False))
        return self.sam(f_map, z_t)

    def predict_eps(self, z_t: Tensor, z_guidance: Tensor, t: np.ndarray,
                    m: MapRaster | None) -> Tensor:
        x = ops.concat([z_t, z_guidance], axis=1)
        f_ms = self.sam_features(m, z_t) if (self.cfg.use_sam and m is not None) else None
        return self.unet(x, t, f_ms)

    # persistence ----------------------------------------------------------

    def _config_vector(self) -> np.ndarray:
        c = self.cfg
        return np.array([c.width, c.latent_channels, c.map_classes, c.sem_hidden,
                         int(c.use_sam), c.t_max], dtype=np.float32)

    def save(self, path: str | Path) -> None:
        state = {"cfg.vals": self._config_vector()}
        state.update(self.state_dict())
        save_checkpoint(state, path)
        self.hash = fnv1a64(Path(path).read_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "DenoiserModel":
        state = load_checkpoint(path)
        if "cfg.vals" not in state:
            raise FormatError(f"{path}: checkpoint lacks config vector")
        v = state.pop("cfg.vals")
        model = cls(DenoiserConfig(width=int(v[0]), latent_channels=int(v[1]),
                                   map_classes=int(v[2]), sem_hidden=int(v[3]),
                                   use_sam=bool(int(v[4])), t_max=int(v[5])))
        model.load_state_dict(state)
        model.hash = fnv1a64(Path(path).read_bytes())
        return model


def ddpm_sample(model: DenoiserModel, z_guidance: np.ndarray, m: MapRaster | None,
                steps: int, seed: int, schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Seeded ancestral sampling conditioned on the compressed latent (and map)."""
    model.set_training(False)
    schedule = schedule or NoiseSchedule.linear(model.cfg.t_max)
    if z_guidance.ndim == 3:
        z_guidance = z_guidance[None]
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(z_guidance.shape)
    guid = Tensor(z_guidance.astype(np.float32), check=False)
    taus = sample_taus(schedule.t_max, steps)
    transitions = list(zip(taus, taus[1:] + [0]))
    for step_idx, (t, s) in enumerate(transitions):
        try:
            eps_hat = model.predict_eps(Tensor(z.astype(np.float32), check=False), guid,
                                        np.array([t]), m).data.astype(np.float64)
        except NonFiniteError as e:
            raise NumericError(f"ddpm_sample: denoiser overflow at step {step_idx} "
                               f"(t={t}): {e}") from e
        noise = rng.standard_normal(z.shape) if s > 0 else None
        z = denoise_step(z, t, s, eps_hat, schedule, noise)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"ddpm_sample: non-finite latent at step {step_idx} (t={t})")
    return z


def train_denoiser(model: DenoiserModel, dataset: list[tuple[np.ndarray, np.ndarray, np.ndarray | None]],
                   schedule: NoiseSchedule, steps: int, lr: float = 5e-4,
                   batch_size: int = 8, seed: int = 0,
                   finetune: tuple | None = None) -> list[float]:
    """Noise-prediction training; dataset entries are (z0, z_hat, pooled_one_hot).

    Timesteps are drawn uniformly from [0, t_max] per batch element. When
    `finetune` is given as (lcm_model, y_hat_list, map_list), the synthesis
    transforms join the optimization and the guidance latent is recomputed
    through them each step (the hyper-synthesis parameters are included for
    completeness even though this loss gives them no gradient).
    """
    if not dataset:
        raise ShapeError("train_denoiser: empty dataset")
    rng = np.random.default_rng(seed)
    named = list(model.named_parameters())
    lcm = None
    if finetune is not None:
        lcm, y_hat_list, map_list = finetune
        named += [(n, p) for n, p in lcm.named_parameters()
                  if n.startswith("gs.") or n.startswith("hs.")]
    opt = AdamW(named, lr=lr)
    model.set_training(True)
    trace: list[float] = []
    t_max = schedule.t_max
    use_sam = model.cfg.use_sam and dataset[0][2] is not None
    for step in range(steps):
        idx = rng.integers(0, len(dataset), size=batch_size)
        z0 = np.stack([dataset[i][0] for i in idx])
        ts = rng.integers(0, t_max + 1, size=batch_size)
        eps = rng.standard_normal(z0.shape)
        ab = schedule.alpha_bar[ts][:, None, None, None]
        z_t_np = (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)
        z_t = Tensor(z_t_np, check=False)
        if lcm is not None:
            parts = []
            for i in idx:
                yh = y_hat_list[i]
                latent_hw = (yh.shape[2] << lcm.cfg.scales, yh.shape[3] << lcm.cfg.scales)
                f_sem = lcm.semantic_features(map_list[i], latent_hw)
                parts.append(lcm.gs(Tensor(yh, check=False), f_sem))
            guid = ops.concat(parts, axis=0)
        else:
            guid = Tensor(np.stack([dataset[i][1] for i in idx]).astype(np.float32),
                          check=False)
        x = ops.concat([z_t, guid], axis=1)
        f_ms = None
        if use_sam:
            oh = Tensor(np.stack([dataset[i][2] for i in idx]).astype(np.float32),
                        check=False)
            f_map = model.sam.encode_map(oh)
            f_ms = model.sam(f_map, z_t)
        eps_hat = model.unet(x, ts, f_ms)
        loss = ops.mse(eps_hat, Tensor(eps.astype(np.float32), check=False))
        lv = loss.item()
        if not np.isfinite(lv):
            raise NumericError(f"train_denoiser: loss diverged at step {step}")
        trace.append(lv)
        model.zero_grad()
        if lcm is not None:
            lcm.zero_grad()
        loss.backward()
        opt.step()
    model.set_training(False)
    return trace
