"""Stage-1 rate-distortion optimization of the latent compression model.

The rate term uses the additive-uniform-noise relaxation (the discrete bit
count has zero gradient); the reconstruction path quantizes with the
straight-through round so the synthesis transform trains on the integers it
will see at coding time. Rate is accounted in bits per latent element,
distortion as mean squared latent error, so the trade-off weight is
resolution-independent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import LatentCodecModel
from .data import MapRaster
from .engine import ops
from .engine.optim import AdamW
from .engine.tensor import Tensor
from .entropy import estimate_rate_noise, ste_quantize
from .errors import NumericError, ShapeError

LAMBDA_GRID = (0.10, 0.20, 0.39, 0.67, 0.91, 1.25)


@dataclass
class TrainConfig:
    lam: float = 0.39
    lr: float = 5e-5
    warmup_steps: int = 500       # paper-scale default is 10_000
    batch_size: int = 8
    total_steps: int = 2000
    seed: int = 0
    preset: str = "desk"

    def __post_init__(self):
        if self.lam <= 0:
            raise ShapeError("TrainConfig: lambda must be positive")
        if self.warmup_steps > self.total_steps:
            raise ShapeError("TrainConfig: warmup longer than training")

    @classmethod
    def paper(cls, lam: float) -> "TrainConfig":
        return cls(lam=lam, lr=5e-5, warmup_steps=10_000, batch_size=16,
                   total_steps=250_000, preset="paper")


@dataclass
class RDLossBreakdown:
    rate_bits_per_element: float
    latent_distortion: float
    total: float
    clamped_bins: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.rate_bits_per_element)
                and np.isfinite(self.latent_distortion) and np.isfinite(self.total)):
            raise NumericError("RDLossBreakdown: non-finite component")


def rd_forward(model: LatentCodecModel, z0: Tensor, f_sem, lam: float,
               rng: np.random.Generator) -> tuple[Tensor, RDLossBreakdown]:
    """One rate-distortion forward pass; returns (loss, breakdown)."""
    y = model.ga(z0, f_sem)
    h = model.ha(y)

    # noise-mode rate for the side information, straight-through for its use
    hyper_field = model.fp.field_for(h)
    bits_h = estimate_rate_noise(h, hyper_field, rng=rng)
    h_hat = ste_quantize(h)
    gc = model.hs(h_hat)

    slices = model.layout.split(y)
    decoded = []
    bits_y = None
    for i in range(model.layout.k):
        fld = model.cm.predict(gc, decoded, i)
        b = estimate_rate_noise(slices[i], fld, rng=rng)
        bits_y = b if bits_y is None else ops.add(bits_y, b)
        decoded.append(ste_quantize(slices[i]))
    y_hat = ops.concat(decoded, axis=1)
    z_hat = model.gs(y_hat, f_sem)

    n_latent = z0.data.size
    rate = ops.scale(ops.add(bits_y, bits_h), 1.0 / n_latent)
    dist = ops.mse(z_hat, z0)
    loss = ops.add(rate, ops.scale(dist, lam))
    breakdown = RDLossBreakdown(rate_bits_per_element=rate.item(),
                                latent_distortion=dist.item(),
                                total=rate.item() + lam * dist.item())
    return loss, breakdown


class Stage1Trainer:
    """Owns the optimizer, warmup schedule, and CSV logging."""

    def __init__(self, model: LatentCodecModel, config: TrainConfig,
                 log_path: str | Path | None = None):
        self.model = model
        self.config = config
        self.opt = AdamW(model.named_parameters(), lr=config.lr)
        self.rng = np.random.default_rng(config.seed)
        self.step_count = 0
        self.log_rows: list[dict] = []
        self.log_path = Path(log_path) if log_path else None

    def current_lr(self) -> float:
        c = self.config
        warm = min(1.0, (self.step_count + 1) / max(1, c.warmup_steps))
        return c.lr * warm

    def step(self, batch: list[tuple[np.ndarray, MapRaster | None]]) -> RDLossBreakdown:
        if not batch:
            raise ShapeError("stage1 step: empty batch")
        model = self.model
        model.set_training(True)
        z0 = Tensor(np.stack([b[0] for b in batch]).astype(np.float32), check=False)
        latent_hw = (z0.data.shape[2], z0.data.shape[3])
        f_sem = None
        if model.cfg.use_map:
            parts = [model.se(b[1], latent_hw) for b in batch]
            f_sem = parts[0] if len(parts) == 1 else ops.concat(parts, axis=0)
        loss, breakdown = rd_forward(model, z0, f_sem, self.config.lam, self.rng)
        if not np.isfinite(loss.item()):
            raise NumericError(f"stage1 step {self.step_count}: loss diverged "
                               f"(rate={breakdown.rate_bits_per_element}, "
                               f"dist={breakdown.latent_distortion})")
        self.opt.lr = self.current_lr()
        self.opt.zero_grad()
        model.zero_grad()
        loss.backward()
        self.opt.step()
        self.log_rows.append({"step": self.step_count,
                              "L_rate": breakdown.rate_bits_per_element,
                              "L_ld": breakdown.latent_distortion,
                              "total": breakdown.total,
                              "lr": self.opt.lr})
        self.step_count += 1
        return breakdown

    def write_log(self) -> None:
        if self.log_path is None:
            return
        with open(self.log_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "L_rate", "L_ld", "total", "lr"])
            w.writeheader()
            w.writerows(self.log_rows)


def smoothed(values: list[float], window: int = 100) -> list[float]:
    """Trailing-window moving average."""
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def train_stage1(model: LatentCodecModel, latents: list[np.ndarray],
                 maps: list[MapRaster | None], config: TrainConfig,
                 log_path: str | Path | None = None) -> list[RDLossBreakdown]:
    """Run the full stage-1 loop over an in-memory latent dataset."""
    if len(latents) != len(maps) or not latents:
        raise ShapeError("train_stage1: latents and maps must pair up")
    trainer = Stage1Trainer(model, config, log_path)
    order_rng = np.random.default_rng(config.seed + 1)
    history: list[RDLossBreakdown] = []
    for _ in range(config.total_steps):
        idx = order_rng.integers(0, len(latents), size=config.batch_size)
        batch = [(latents[i], maps[i]) for i in idx]
        history.append(trainer.step(batch))
    trainer.write_log()
    model.set_training(False)
    return history


def heldout_distortion(model: LatentCodecModel, latents: list[np.ndarray],
                       maps: list[MapRaster | None]) -> float:
    """Mean squared latent error through the real (rounded) coding path."""
    from .codec import compress  # local import to avoid cycle at module load
    model.set_training(False)
    errs = []
    for z0, m in zip(latents, maps):
        hw = (z0.shape[1] * 8, z0.shape[2] * 8) if m is None else None
        _, z_hat, _ = compress(model, z0, m, image_hw=hw)
        errs.append(float(np.mean((z_hat.data[0] - z0) ** 2)))
    return float(np.mean(errs))


def spearman(xs: list[float], ys: list[float]) -> float:
    """Spearman rank correlation; ties get average ranks."""
    def ranks(v):
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v), dtype=np.float64)
        r[order] = np.arange(1, len(v) + 1)
        vals = np.asarray(v, dtype=np.float64)
        for u in np.unique(vals):
            mask = vals == u
            if mask.sum() > 1:
                r[mask] = r[mask].mean()
        return r
    rx, ry = ranks(xs), ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


def train_rd_grid(make_model, latents: list[np.ndarray], maps: list[MapRaster | None],
                  lambdas: list[float], config: TrainConfig, out_dir: str | Path,
                  heldout: tuple[list[np.ndarray], list[MapRaster | None]] | None = None):
    """Train one checkpoint per lambda; returns per-lambda paths and distortions.

    make_model(lambda_index) must build a fresh model whose lambda_index is
    stamped into every container it writes.
    """
    if len(lambdas) < 2:
        raise ShapeError("train_rd_grid: need at least 2 lambda values")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    distortions: list[float] = []
    for li, lam in enumerate(lambdas):
        model = make_model(li)
        cfg = TrainConfig(lam=lam, lr=config.lr, warmup_steps=config.warmup_steps,
                          batch_size=config.batch_size, total_steps=config.total_steps,
                          seed=config.seed, preset=config.preset)
        train_stage1(model, latents, maps, cfg,
                     log_path=out / f"train_lambda{li}.csv")
        path = out / f"lcm_lambda{li}.mgwt"
        model.save(path)
        paths.append(path)
        ev_latents, ev_maps = heldout if heldout else (latents, maps)
        distortions.append(heldout_distortion(model, ev_latents, ev_maps))
    return paths, distortions
