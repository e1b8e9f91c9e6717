"""Session fixtures: one desk-scale training pipeline shared by all tests.

Everything is seed-deterministic, so the trained artifacts are cached under
tests/.desk_cache and rebuilt only when the pipeline recipe changes (bump
RECIPE_TAG when fixture hyperparameters move).
"""

import json
from pathlib import Path

import numpy as np
import pytest

from magc.autoencoder import (AutoencoderConfig, PixelAutoencoder,
                              normalize_latent_scale, train_autoencoder)
from magc.codec import LatentCodecModel, compress
from magc.data import DatasetManifest, SyntheticSceneSpec, gen_data
from magc.diffusion import (DenoiserConfig, DenoiserModel, NoiseSchedule,
                            train_denoiser)
from magc.training import TrainConfig, train_rd_grid
from magc.transforms import desk_config

RECIPE_TAG = "desk-v6"
CACHE = Path(__file__).parent / ".desk_cache"
GRID_LAMBDAS = [0.10, 0.39, 1.25]
N_PAIRS = 50


def _cache_ready() -> bool:
    marker = CACHE / "recipe.txt"
    return marker.exists() and marker.read_text() == RECIPE_TAG


def _mark_cache() -> None:
    (CACHE / "recipe.txt").write_text(RECIPE_TAG)


@pytest.fixture(scope="session")
def desk_dataset():
    """50 paired 64x64 scenes, seed 42."""
    spec = SyntheticSceneSpec(size=64, seed=42)
    data_dir = CACHE / "data"
    manifest_path = data_dir / "manifest_train.json"
    if not (_cache_ready() and manifest_path.exists()):
        manifest = gen_data(spec, N_PAIRS, data_dir)
    else:
        manifest = DatasetManifest.load(manifest_path)
    images, maps = [], []
    for i in range(len(manifest)):
        img, m = manifest.load_pair(i)
        images.append(img)
        maps.append(m)
    return manifest, images, maps


@pytest.fixture(scope="session")
def trained_vae(desk_dataset):
    _, images, _ = desk_dataset
    path = CACHE / "vae.mgwt"
    if _cache_ready() and path.exists():
        return PixelAutoencoder.load(path), path
    model = PixelAutoencoder(AutoencoderConfig(width=40), seed=0)
    train_autoencoder(model, images, steps=800, lr=2e-3, seed=0)
    train_autoencoder(model, images, steps=250, lr=5e-4, seed=1)
    normalize_latent_scale(model, images[:16])
    model.save(path)
    return model, path


@pytest.fixture(scope="session")
def desk_latents(trained_vae, desk_dataset):
    vae, _ = trained_vae
    _, images, maps = desk_dataset
    latents = [vae.encode_image(img).data[0] for img in images]
    return latents, maps


@pytest.fixture(scope="session")
def grid_results(desk_latents):
    """Per-lambda checkpoints, training logs, and held-out distortions."""
    latents, maps = desk_latents
    out_dir = CACHE / "grid"
    meta_path = out_dir / "grid_meta.json"
    if _cache_ready() and meta_path.exists():
        meta = json.loads(meta_path.read_text())
        return [Path(p) for p in meta["paths"]], meta["distortions"], out_dir

    def make_model(lambda_index: int) -> LatentCodecModel:
        return LatentCodecModel(desk_config(), k=2, lambda_index=lambda_index, seed=0)

    cfg = TrainConfig(lam=0.39, lr=1e-3, warmup_steps=200, batch_size=8,
                      total_steps=1500, seed=0)
    paths, distortions = train_rd_grid(make_model, latents, maps, GRID_LAMBDAS,
                                       cfg, out_dir,
                                       heldout=(latents[:25], maps[:25]))
    meta_path.write_text(json.dumps({"paths": [str(p) for p in paths],
                                     "distortions": distortions}))
    _mark_cache()
    return paths, distortions, out_dir


@pytest.fixture(scope="session")
def main_lcm(grid_results):
    """The lambda=0.39 model (grid index 1)."""
    paths, _, _ = grid_results
    return LatentCodecModel.load(paths[1]), paths[1]


@pytest.fixture(scope="session")
def nomap_lcm(desk_latents):
    latents, maps = desk_latents
    path = CACHE / "lcm_nomap.mgwt"
    if _cache_ready() and path.exists():
        return LatentCodecModel.load(path), path
    from magc.training import train_stage1
    model = LatentCodecModel(desk_config(use_map=False), k=2, lambda_index=1, seed=0)
    cfg = TrainConfig(lam=0.39, lr=1e-3, warmup_steps=100, batch_size=8,
                      total_steps=500, seed=0)
    train_stage1(model, latents, [None] * len(latents), cfg)
    model.save(path)
    return model, path


@pytest.fixture(scope="session")
def trained_denoiser(desk_latents, main_lcm, desk_dataset):
    latents, maps = desk_latents
    lcm, _ = main_lcm
    path = CACHE / "denoiser.mgwt"
    trace_path = CACHE / "denoiser_trace.json"
    if _cache_ready() and path.exists() and trace_path.exists():
        return (DenoiserModel.load(path), path,
                json.loads(trace_path.read_text()))
    model = DenoiserModel(DenoiserConfig(width=16, sem_hidden=16), seed=0)
    dataset = []
    for z0, m in zip(latents, maps):
        _, z_hat, _ = compress(lcm, z0, m)
        oh = model.pooled_one_hot(m, (z0.shape[1], z0.shape[2]))[0]
        dataset.append((z0, z_hat.data[0], oh))
    schedule = NoiseSchedule.linear(1000)
    trace = train_denoiser(model, dataset, schedule, steps=500, lr=5e-4, seed=0)
    model.save(path)
    trace_path.write_text(json.dumps(trace))
    return model, path, trace
