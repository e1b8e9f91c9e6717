"""Command-line interface.

Exit codes: 0 success, 1 usage, 2 I/O, 3 format, 4 model mismatch, 5 numeric.
Config files are flat key=value text; unknown keys are rejected so typos
surface early. MAGC_THREADS caps per-file parallelism in eval.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import codec as codec_mod
from . import diffusion as diff_mod
from . import evalkit
from . import training
from .autoencoder import AutoencoderConfig, PixelAutoencoder, train_autoencoder
from .data import (DatasetManifest, SyntheticSceneSpec, gen_data, read_pgm,
                   read_ppm, write_ppm)
from .errors import (FormatError, MagcError, ModelMismatchError, NumericError,
                     ShapeError, UsageError)
from .transforms import desk_config, paper_config

EXIT_USAGE = 1
EXIT_IO = 2
EXIT_FORMAT = 3
EXIT_MODEL = 4
EXIT_NUMERIC = 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_config(path: str | Path, allowed: set[str]) -> dict[str, str]:
    cfg: dict[str, str] = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{line_no}: expected key=value")
        key, val = line.split("=", 1)
        key = key.strip()
        if key not in allowed:
            raise FormatError(f"{path}:{line_no}: unknown key {key!r}")
        cfg[key] = val.strip()
    return cfg


def _transform_config(preset: str, overrides: dict[str, str]):
    make = desk_config if preset == "desk" else paper_config
    kwargs = {}
    for key in ("n", "m", "latent_channels", "scales", "map_classes", "spade_hidden"):
        if key in overrides:
            kwargs[key] = int(overrides[key])
    if "use_map" in overrides:
        kwargs["use_map"] = overrides["use_map"].lower() in ("1", "true", "yes")
    return make(**kwargs)


def cmd_gen_data(args) -> int:
    spec = SyntheticSceneSpec(size=args.size, seed=args.seed)
    manifest = gen_data(spec, args.n_pairs, args.out, split=args.split)
    print(f"wrote {len(manifest)} pairs to {args.out}")
    return 0


def cmd_train_vae(args) -> int:
    allowed = {"steps", "lr", "batch_size", "width", "factor", "latent_channels"}
    cfg = parse_config(args.config, allowed) if args.config else {}
    manifest = DatasetManifest.load(args.manifest)
    images = [manifest.load_pair(i)[0] for i in range(len(manifest))]
    ae_cfg = AutoencoderConfig(factor=int(cfg.get("factor", 8)),
                               latent_channels=int(cfg.get("latent_channels", 4)),
                               width=int(cfg.get("width", 32)))
    model = PixelAutoencoder(ae_cfg, seed=args.seed)
    trace = train_autoencoder(model, images, steps=int(cfg.get("steps", 1500)),
                              lr=float(cfg.get("lr", 1e-3)),
                              batch_size=int(cfg.get("batch_size", 8)),
                              seed=args.seed)
    model.save(args.out)
    print(f"final_mse={trace[-1]:.6f}")
    return 0


def cmd_train_lcm(args) -> int:
    allowed = {"lambda", "steps", "lr", "batch_size", "warmup", "n", "m",
               "latent_channels", "scales", "map_classes", "spade_hidden",
               "use_map", "k"}
    cfg = parse_config(args.config, allowed) if args.config else {}
    manifest = DatasetManifest.load(args.manifest)
    vae = PixelAutoencoder.load(args.vae)
    latents, maps = [], []
    tcfg = _transform_config(args.preset, cfg)
    for i in range(len(manifest)):
        img, m = manifest.load_pair(i)
        latents.append(vae.encode_image(img).data[0])
        maps.append(m if tcfg.use_map else None)
    model = codec_mod.LatentCodecModel(tcfg, k=int(cfg.get("k", 2)),
                                       lambda_index=args.lambda_index,
                                       seed=args.seed)
    train_cfg = training.TrainConfig(
        lam=float(cfg.get("lambda", 0.39)),
        lr=float(cfg.get("lr", 1e-3 if args.preset == "desk" else 5e-5)),
        warmup_steps=int(cfg.get("warmup", 500 if args.preset == "desk" else 10_000)),
        batch_size=int(cfg.get("batch_size", 8)),
        total_steps=int(cfg.get("steps", 2000)),
        seed=args.seed, preset=args.preset)
    history = training.train_stage1(model, latents, maps, train_cfg,
                                    log_path=Path(args.out).with_suffix(".train.csv"))
    model.save(args.out)
    print(f"final_total={history[-1].total:.6f}")
    return 0


def cmd_train_diffusion(args) -> int:
    allowed = {"steps", "lr", "batch_size", "width", "sem_hidden", "use_sam",
               "t_max", "finetune_decoder"}
    cfg = parse_config(args.config, allowed) if args.config else {}
    manifest = DatasetManifest.load(args.manifest)
    vae = PixelAutoencoder.load(args.vae)
    lcm = codec_mod.LatentCodecModel.load(args.lcm)
    use_sam = cfg.get("use_sam", "true").lower() in ("1", "true", "yes")
    dcfg = diff_mod.DenoiserConfig(width=int(cfg.get("width", 16)),
                                   latent_channels=vae.cfg.latent_channels,
                                   map_classes=manifest.num_classes,
                                   sem_hidden=int(cfg.get("sem_hidden", 16)),
                                   use_sam=use_sam,
                                   t_max=int(cfg.get("t_max", 1000)))
    model = diff_mod.DenoiserModel(dcfg, seed=args.seed)
    schedule = diff_mod.NoiseSchedule.linear(dcfg.t_max)
    dataset = []
    for i in range(len(manifest)):
        img, m = manifest.load_pair(i)
        z0 = vae.encode_image(img)
        _, z_hat, _ = codec_mod.compress(lcm, z0, m if lcm.cfg.use_map else None,
                                         image_hw=(img.height, img.width))
        oh = None
        if use_sam:
            oh = model.pooled_one_hot(m, (z0.data.shape[2], z0.data.shape[3]))[0]
        dataset.append((z0.data[0], z_hat.data[0], oh))
    trace = diff_mod.train_denoiser(model, dataset, schedule,
                                    steps=int(cfg.get("steps", 600)),
                                    lr=float(cfg.get("lr", 5e-4)),
                                    batch_size=int(cfg.get("batch_size", 8)),
                                    seed=args.seed)
    model.save(args.out)
    print(f"final_eps_mse={trace[-1]:.6f}")
    return 0


def cmd_compress(args) -> int:
    vae = PixelAutoencoder.load(args.vae)
    lcm = codec_mod.LatentCodecModel.load(args.lcm)
    img = read_ppm(args.image)
    m = read_pgm(args.map, lcm.cfg.map_classes) if args.map else None
    z0 = vae.encode_image(img)
    container, _, report = codec_mod.compress(lcm, z0, m if lcm.cfg.use_map else None,
                                              image_hw=(img.height, img.width))
    codec_mod.write_container(container, args.out)
    print(f"bpp={report.bpp:.6f}")
    return 0


def cmd_decompress(args) -> int:
    vae = PixelAutoencoder.load(args.vae)
    lcm = codec_mod.LatentCodecModel.load(args.lcm)
    container = codec_mod.read_container(args.stream)
    m = read_pgm(args.map, lcm.cfg.map_classes) if args.map else None
    z_hat = codec_mod.decompress(lcm, container, m if lcm.cfg.use_map else None)
    if args.backend == "pixel-decoder":
        recon = vae.decode_latent(z_hat)
    else:
        den = diff_mod.DenoiserModel.load(args.diffusion)
        z_gen = diff_mod.ddpm_sample(den, z_hat.data[0], m, steps=args.steps,
                                     seed=args.seed)
        recon = vae.decode_latent(z_gen[0].astype(np.float32))
    write_ppm(recon, args.out)
    if args.orig:
        print(f"psnr={evalkit.psnr(recon, read_ppm(args.orig)):.6f}")
    return 0


def cmd_eval(args) -> int:
    vae = PixelAutoencoder.load(args.vae)
    manifest = DatasetManifest.load(args.manifest)
    diffusion_model = diff_mod.DenoiserModel.load(args.diffusion) if args.diffusion else None
    steps = tuple(int(s) for s in args.steps.split(",")) if args.steps else ()
    evalkit.eval_run(vae, args.lcm, manifest, args.out,
                     diffusion_model=diffusion_model, diffusion_steps=steps,
                     seed=args.seed, pred_map_dir=args.pred_maps)
    print(f"wrote {Path(args.out) / 'eval.csv'}")
    return 0


def cmd_bd(args) -> int:
    anchor = evalkit.RDCurve.load(args.anchor)
    test = evalkit.RDCurve.load(args.test)
    print(f"BD-quality={evalkit.bd_quality(anchor, test):.6f}")
    print(f"BD-rate={evalkit.bd_rate(anchor, test):.6f}%")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="magc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-pairs", type=int, default=50)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="train")
    g.set_defaults(fn=cmd_gen_data)

    tv = sub.add_parser("train-vae", help="train the pixel autoencoder")
    tv.add_argument("--manifest", required=True)
    tv.add_argument("--out", required=True)
    tv.add_argument("--config")
    tv.add_argument("--seed", type=int, default=0)
    tv.set_defaults(fn=cmd_train_vae)

    tl = sub.add_parser("train-lcm", help="stage-1 rate-distortion training")
    tl.add_argument("--manifest", required=True)
    tl.add_argument("--vae", required=True)
    tl.add_argument("--out", required=True)
    tl.add_argument("--config")
    tl.add_argument("--preset", choices=("paper", "desk"), default="desk")
    tl.add_argument("--lambda-index", type=int, default=0)
    tl.add_argument("--seed", type=int, default=0)
    tl.set_defaults(fn=cmd_train_lcm)

    td = sub.add_parser("train-diffusion", help="stage-2 denoiser training")
    td.add_argument("--manifest", required=True)
    td.add_argument("--vae", required=True)
    td.add_argument("--lcm", required=True)
    td.add_argument("--out", required=True)
    td.add_argument("--config")
    td.add_argument("--seed", type=int, default=0)
    td.set_defaults(fn=cmd_train_diffusion)

    c = sub.add_parser("compress", help="image + map -> .magc stream")
    c.add_argument("image")
    c.add_argument("--map")
    c.add_argument("--vae", required=True)
    c.add_argument("--lcm", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_compress)

    d = sub.add_parser("decompress", help=".magc stream + map -> image")
    d.add_argument("stream")
    d.add_argument("--map")
    d.add_argument("--vae", required=True)
    d.add_argument("--lcm", required=True)
    d.add_argument("--backend", choices=("pixel-decoder", "diffusion"),
                   default="pixel-decoder")
    d.add_argument("--diffusion", help="denoiser checkpoint (diffusion backend)")
    d.add_argument("--steps", type=int, default=50)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.add_argument("--orig", help="original image; prints PSNR when given")
    d.set_defaults(fn=cmd_decompress)

    e = sub.add_parser("eval", help="batch compress/decompress with metrics")
    e.add_argument("--manifest", required=True)
    e.add_argument("--vae", required=True)
    e.add_argument("--lcm", nargs="+", required=True)
    e.add_argument("--diffusion")
    e.add_argument("--steps", help="comma-separated diffusion step counts")
    e.add_argument("--pred-maps", help="directory of predicted label rasters")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bd", help="Bjontegaard deltas between two RD curve CSVs")
    b.add_argument("anchor")
    b.add_argument("test")
    b.set_defaults(fn=cmd_bd)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "backend", None) == "diffusion" and not args.diffusion:
            raise UsageError("diffusion backend needs --diffusion checkpoint")
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ModelMismatchError as e:
        print(f"model mismatch: {e}", file=sys.stderr)
        return EXIT_MODEL
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FileNotFoundError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except ShapeError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except MagcError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
