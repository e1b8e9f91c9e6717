"""Metrics and comparison machinery: PSNR, patch extraction, mIoU, BD deltas."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autoencoder import PixelAutoencoder
from .codec import LatentCodecModel, compress, decompress
from .data import DatasetManifest, ImageBuffer, MapRaster, read_pgm
from .errors import ShapeError


def psnr(a: ImageBuffer | np.ndarray, b: ImageBuffer | np.ndarray) -> float:
    """10*log10(1/MSE) for [0,1] data; identical inputs give +inf."""
    pa = a.pixels if isinstance(a, ImageBuffer) else np.asarray(a, dtype=np.float64)
    pb = b.pixels if isinstance(b, ImageBuffer) else np.asarray(b, dtype=np.float64)
    if pa.shape != pb.shape:
        raise ShapeError(f"psnr: shapes {pa.shape} vs {pb.shape}")
    mse = float(np.mean((pa.astype(np.float64) - pb.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def extract_patches(image: np.ndarray, f: int) -> list[np.ndarray]:
    """Aligned f x f windows plus a second grid shifted by f/2 in both dims."""
    h, w = image.shape[:2]
    if f > min(h, w):
        raise ShapeError(f"extract_patches: window {f} exceeds image {h}x{w}")
    patches = []
    nh, nw = h // f, w // f
    for i in range(nh):
        for j in range(nw):
            patches.append(image[i * f:(i + 1) * f, j * f:(j + 1) * f])
    half = f // 2
    for i in range(nh - 1):
        for j in range(nw - 1):
            y0, x0 = half + i * f, half + j * f
            patches.append(image[y0:y0 + f, x0:x0 + f])
    return patches


def patch_count(h: int, w: int, f: int) -> int:
    nh, nw = h // f, w // f
    return nh * nw + max(0, nh - 1) * max(0, nw - 1)


def confusion_matrix(pred: MapRaster, gt: MapRaster, num_classes: int) -> np.ndarray:
    if pred.classes.shape != gt.classes.shape:
        raise ShapeError(f"confusion: {pred.classes.shape} vs {gt.classes.shape}")
    idx = gt.classes.astype(np.int64) * num_classes + pred.classes.astype(np.int64)
    counts = np.bincount(idx.reshape(-1), minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def miou(pred: MapRaster, gt: MapRaster) -> float:
    """Mean IoU over the classes present in either raster."""
    c = max(pred.num_classes, gt.num_classes)
    cm = confusion_matrix(pred, gt, c)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    present = union > 0
    if not present.any():
        return 0.0
    return float((inter[present] / union[present]).mean())


# ---------------------------------------------------------------------------
# Bjontegaard deltas

@dataclass
class RDCurve:
    points: list[tuple[float, float]]  # (bpp, quality), bpp strictly increasing
    quality_label: str = "psnr"

    def __post_init__(self):
        bpps = [p[0] for p in self.points]
        if any(b <= 0 for b in bpps):
            raise ShapeError("RDCurve: bpp values must be positive")
        if any(b2 <= b1 for b1, b2 in zip(bpps, bpps[1:])):
            raise ShapeError("RDCurve: bpp must be strictly increasing")

    def log_rates(self) -> np.ndarray:
        return np.log10(np.array([p[0] for p in self.points], dtype=np.float64))

    def qualities(self) -> np.ndarray:
        return np.array([p[1] for p in self.points], dtype=np.float64)

    def save(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bpp", "quality"])
            for b, q in self.points:
                w.writerow([f"{b:.10g}", f"{q:.10g}"])

    @classmethod
    def load(cls, path: str | Path, quality_label: str = "psnr") -> "RDCurve":
        pts = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                pts.append((float(row["bpp"]), float(row["quality"])))
        return cls(pts, quality_label)


def _poly_integral(coeffs: np.ndarray, lo: float, hi: float) -> float:
    anti = np.polyint(coeffs)
    return float(np.polyval(anti, hi) - np.polyval(anti, lo))


def bd_quality(anchor: RDCurve, test: RDCurve) -> float:
    """Average quality difference over the shared log-rate interval.

    Classical cubic-fit form: fit quality as a cubic in log10(bpp) for each
    curve and integrate the coefficient difference, so identical curves give
    an exact zero.
    """
    for c in (anchor, test):
        if len(c.points) < 4:
            raise ShapeError("bd_quality: need at least 4 points per curve")
    lo = max(anchor.log_rates().min(), test.log_rates().min())
    hi = min(anchor.log_rates().max(), test.log_rates().max())
    if hi <= lo:
        raise ShapeError("bd_quality: curves share no log-rate interval")
    pa = np.polyfit(anchor.log_rates(), anchor.qualities(), 3)
    pt = np.polyfit(test.log_rates(), test.qualities(), 3)
    diff = pt - pa
    return _poly_integral(diff, lo, hi) / (hi - lo) + 0.0


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average rate change in percent at equal quality (axes swapped fit)."""
    for c in (anchor, test):
        if len(c.points) < 4:
            raise ShapeError("bd_rate: need at least 4 points per curve")
    qa, qt = anchor.qualities(), test.qualities()
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if hi <= lo:
        raise ShapeError("bd_rate: curves share no quality interval")
    pa = np.polyfit(qa, anchor.log_rates(), 3)
    pt = np.polyfit(qt, test.log_rates(), 3)
    avg_diff = _poly_integral(pt - pa, lo, hi) / (hi - lo)
    return (10.0 ** avg_diff - 1.0) * 100.0 + 0.0


# ---------------------------------------------------------------------------
# end-to-end evaluation harness

EVAL_FIELDS = ["image", "lambda_index", "conditioned", "backend", "bpp", "psnr",
               "miou", "estimated_bits", "actual_bits"]


@dataclass
class EvalResult:
    rows: list[dict] = field(default_factory=list)
    curves: dict[str, RDCurve] = field(default_factory=dict)

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=EVAL_FIELDS)
            w.writeheader()
            w.writerows(self.rows)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def eval_run(vae: PixelAutoencoder, lcm_paths: list[str | Path],
             manifest: DatasetManifest, out_dir: str | Path,
             diffusion_model=None, diffusion_steps: tuple[int, ...] = (),
             seed: int = 0, pred_map_dir: str | Path | None = None) -> EvalResult:
    """Compress/decompress every pair under every checkpoint; emit CSV + curves.

    mIoU is filled when a predicted-label raster exists alongside (same stem,
    .pgm) in pred_map_dir; the harness never invents a segmenter.
    """
    from .diffusion import ddpm_sample  # local import: optional dependency path

    missing = [str(p) for p in lcm_paths if not Path(p).exists()]
    if missing:
        raise FileNotFoundError("eval_run: missing checkpoints: " + ", ".join(missing))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    models = [LatentCodecModel.load(p) for p in lcm_paths]
    result = EvalResult()
    per_lambda: dict[int, list[tuple[float, float]]] = {}

    max_workers = int(os.environ.get("MAGC_THREADS", "1") or "1")

    def eval_pair(i: int) -> list[dict]:
        img, m = manifest.load_pair(i)
        z0 = vae.encode_image(img)
        rows = []
        for model in models:
            container, z_hat_enc, report = compress(
                model, z0, m if model.cfg.use_map else None,
                image_hw=(img.height, img.width))
            z_hat = decompress(model, container, m if model.cfg.use_map else None)
            recon = vae.decode_latent(z_hat)
            iou = float("nan")
            if pred_map_dir is not None:
                cand = Path(pred_map_dir) / Path(manifest.pairs[i][1]).name
                if cand.exists():
                    iou = miou(read_pgm(cand, manifest.num_classes), m)
            rows.append({"image": manifest.pairs[i][0],
                         "lambda_index": model.lambda_index,
                         "conditioned": int(model.cfg.use_map),
                         "backend": "pixel",
                         "bpp": _fmt(report.bpp),
                         "psnr": _fmt(psnr(recon, img)),
                         "miou": _fmt(iou) if iou == iou else "nan",
                         "estimated_bits": _fmt(report.estimated_bits),
                         "actual_bits": _fmt(report.actual_bits)})
            if diffusion_model is not None:
                for steps in diffusion_steps:
                    z_gen = ddpm_sample(diffusion_model, z_hat.data[0], m,
                                        steps=steps, seed=seed)
                    recon_d = vae.decode_latent(z_gen[0].astype(np.float32))
                    rows.append({"image": manifest.pairs[i][0],
                                 "lambda_index": model.lambda_index,
                                 "conditioned": int(model.cfg.use_map),
                                 "backend": f"diffusion{steps}",
                                 "bpp": _fmt(report.bpp),
                                 "psnr": _fmt(psnr(recon_d, img)),
                                 "miou": "nan",
                                 "estimated_bits": _fmt(report.estimated_bits),
                                 "actual_bits": _fmt(report.actual_bits)})
        return rows

    if max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=max_workers) as ex:
            all_rows = list(ex.map(eval_pair, range(len(manifest))))
    else:
        all_rows = [eval_pair(i) for i in range(len(manifest))]
    for rows in all_rows:  # ordered merge keeps the CSV deterministic
        result.rows.extend(rows)

    for row in result.rows:
        if row["backend"] != "pixel":
            continue
        per_lambda.setdefault(int(row["lambda_index"]), []).append(
            (float(row["bpp"]), float(row["psnr"])))
    points = []
    for li, vals in sorted(per_lambda.items()):
        bpps = [v[0] for v in vals]
        qs = [v[1] for v in vals]
        points.append((float(np.mean(bpps)), float(np.mean(qs))))
    points.sort()
    dedup = [p for i, p in enumerate(points) if i == 0 or p[0] > points[i - 1][0]]
    if len(dedup) >= 2:
        curve = RDCurve(dedup)
        curve.save(out / "rd_curve_pixel.csv")
        result.curves["pixel"] = curve
    result.save_csv(out / "eval.csv")
    return result
