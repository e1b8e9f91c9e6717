"""Compress/decompress orchestration and the .magc container format.

Pipeline: z -> analysis -> y; hyper-analyze y -> h; round and entropy-code h
under the factorized prior; hyper-synthesize context features gc; then code
the K channel slices of round(y) autoregressively, each conditioned on gc and
the previously decoded slices. Synthesis maps the decoded code back to the
latent. The encoder runs the identical decode path, so both sides hold
bit-identical reconstructions.
"""

from __future__ import annotations


import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import MapRaster
from .engine import checkpoint as ckpt
from .engine.module import Module
from .engine.ops import round_half_away
from .engine.tensor import Tensor
from .entropy import (ChannelContext, FactorizedPrior, GaussianField, SliceLayout,
                      estimate_rate_discrete)
from .errors import FormatError, ModelMismatchError, ShapeError
from .rangecoder import decode_symbols, encode_symbols
from .transforms import (AnalysisTransform, HyperAnalysis, HyperSynthesis,
                         SemanticEncoder, SynthesisTransform, TransformConfig)

MAGIC = b"MAGC"
VERSION = 1
FLAG_MAP_CONDITIONED = 1
_HEADER_FMT = "<4sBBIIBHHHHBBQI"
HEADER_SIZE = struct.calcsize(_HEADER_FMT)
FILE_EXTENSION = ".magc"


class LatentCodecModel(Module):
    """All networks of the latent compression path plus slice bookkeeping."""

    def __init__(self, cfg: TransformConfig, k: int = 2, lambda_index: int = 0,
                 seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.layout = SliceLayout.even(cfg.m, k)
        self.lambda_index = lambda_index
        self.ga = AnalysisTransform(cfg, rng)
        self.gs = SynthesisTransform(cfg, rng)
        self.ha = HyperAnalysis(cfg, rng)
        self.hs = HyperSynthesis(cfg, rng)
        if cfg.use_map:
            self.se = SemanticEncoder(cfg, rng)
        self.cm = ChannelContext(2 * cfg.m, self.layout, cfg.n, rng)
        self.fp = FactorizedPrior(cfg.m // 2)
        self.hash = 0

    # -- persistence ------------------------------------------------------

    def _config_vector(self) -> np.ndarray:
        c = self.cfg
        return np.array([c.n, c.m, c.latent_channels, c.scales, c.map_classes,
                         c.spade_hidden, int(c.use_map), self.layout.k,
                         self.lambda_index], dtype=np.float32)

    def to_bytes(self) -> bytes:
        state = {"cfg.vals": self._config_vector()}
        state.update(self.state_dict())
        return ckpt.checkpoint_bytes(state)

    def save(self, path: str | Path) -> None:
        raw = self.to_bytes()
        Path(path).write_bytes(raw)
        self.hash = ckpt.fnv1a64(raw)

    def refresh_hash(self) -> int:
        self.hash = ckpt.fnv1a64(self.to_bytes())
        return self.hash

    @classmethod
    def load(cls, path: str | Path) -> "LatentCodecModel":
        raw = Path(path).read_bytes()
        state = ckpt.load_checkpoint(path)
        if "cfg.vals" not in state:
            raise FormatError(f"{path}: checkpoint lacks config vector")
        v = state.pop("cfg.vals")
        cfg = TransformConfig(n=int(v[0]), m=int(v[1]), latent_channels=int(v[2]),
                              scales=int(v[3]), map_classes=int(v[4]),
                              spade_hidden=int(v[5]), use_map=bool(int(v[6])))
        model = cls(cfg, k=int(v[7]), lambda_index=int(v[8]))
        model.load_state_dict(state)
        model.hash = ckpt.fnv1a64(raw)
        return model

    # -- forward helpers ----------------------------------------------------

    def semantic_features(self, m: MapRaster | None, latent_hw: tuple[int, int]):
        if not self.cfg.use_map:
            return None
        if m is None:
            raise ShapeError("map-conditioned model needs a map raster")
        return self.se(m, latent_hw)


@dataclass
class BitstreamContainer:
    flags: int
    image_w: int
    image_h: int
    latent_c: int
    latent_h: int
    latent_w: int
    n: int
    m: int
    k: int
    lambda_index: int
    model_hash: int
    sections: list[bytes] = field(default_factory=list)  # hyper first, then K slices
    version: int = VERSION

    def payload(self) -> bytes:
        parts = []
        for sec in self.sections:
            parts.append(struct.pack("<I", len(sec)))
            parts.append(sec)
        return b"".join(parts)

    def serialize(self) -> bytes:
        payload = self.payload()
        header = struct.pack(_HEADER_FMT, MAGIC, self.version, self.flags,
                             self.image_w, self.image_h, self.latent_c,
                             self.latent_h, self.latent_w, self.n, self.m,
                             self.k, self.lambda_index, self.model_hash,
                             zlib.crc32(payload))
        return header + payload

    def total_bytes(self) -> int:
        return HEADER_SIZE + sum(4 + len(s) for s in self.sections)

    @classmethod
    def parse(cls, raw: bytes) -> "BitstreamContainer":
        if len(raw) < HEADER_SIZE:
            raise FormatError("container: truncated header")
        (magic, version, flags, image_w, image_h, latent_c, latent_h, latent_w,
         n, m, k, lambda_index, model_hash, crc) = struct.unpack_from(_HEADER_FMT, raw, 0)
        if magic != MAGIC:
            raise FormatError(f"container: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"container: unsupported version {version}")
        payload = raw[HEADER_SIZE:]
        if zlib.crc32(payload) != crc:
            raise FormatError("container: payload CRC mismatch")
        sections = []
        ofs = 0
        for _ in range(k + 1):
            if ofs + 4 > len(payload):
                raise FormatError("container: truncated section table")
            (ln,) = struct.unpack_from("<I", payload, ofs)
            ofs += 4
            if ofs + ln > len(payload):
                raise FormatError("container: section length exceeds payload")
            sections.append(payload[ofs:ofs + ln])
            ofs += ln
        if ofs != len(payload):
            raise FormatError(f"container: {len(payload) - ofs} trailing payload bytes")
        return cls(flags=flags, image_w=image_w, image_h=image_h, latent_c=latent_c,
                   latent_h=latent_h, latent_w=latent_w, n=n, m=m, k=k,
                   lambda_index=lambda_index, model_hash=model_hash,
                   sections=sections, version=version)


@dataclass
class CompressReport:
    bpp: float
    total_bytes: int
    estimated_bits: float
    actual_bits: float
    section_bits: list[int]
    estimated_section_bits: list[float]
    clamped_bins: int


def _hyper_field(model: LatentCodecModel, h_like: Tensor) -> GaussianField:
    return model.fp.field_for(h_like)


def compress(model: LatentCodecModel, z0: Tensor | np.ndarray, m: MapRaster | None,
             image_hw: tuple[int, int] | None = None
             ) -> tuple[BitstreamContainer, Tensor, CompressReport]:
    """Full encode of one latent; returns container, encoder-side
    reconstruction (bit-identical to the decoder's) and a rate report.
    """
    model.set_training(False)
    if isinstance(z0, np.ndarray):
        z0 = Tensor(z0.astype(np.float32))
    if z0.data.ndim == 3:
        z0 = Tensor(z0.data[None], check=False)
    _, c, zh, zw = z0.data.shape
    cfg = model.cfg
    if c != cfg.latent_channels:
        raise ShapeError(f"compress: latent has {c} channels, model expects "
                         f"{cfg.latent_channels}")
    if image_hw is None:
        if m is None:
            raise ShapeError("compress: need a map raster or explicit image_hw")
        image_hw = (m.height, m.width)
    img_h, img_w = image_hw
    if cfg.use_map and m is not None and (m.height, m.width) != (img_h, img_w):
        raise ShapeError(f"compress: map {m.height}x{m.width} does not match "
                         f"image {img_h}x{img_w}")
    if model.hash == 0:
        model.refresh_hash()

    f_sem = model.semantic_features(m, (zh, zw))
    y = model.ga(z0, f_sem)
    h = model.ha(y)
    h_hat = round_half_away(h.data)
    hyper_field = _hyper_field(model, h)
    hyper_bytes = encode_symbols(h_hat, hyper_field.mu.data, hyper_field.sigma.data)
    est_h = estimate_rate_discrete(h.data, hyper_field)

    gc = model.hs(Tensor(h_hat.astype(np.float32), check=False))
    slices = model.layout.split(y)
    decoded: list[Tensor] = []
    sections = [hyper_bytes]
    est_sections = [est_h.bits]
    clamped = est_h.clamped
    for i in range(model.layout.k):
        fld = model.cm.predict(gc, decoded, i)
        sym = round_half_away(slices[i].data)
        sections.append(encode_symbols(sym, fld.mu.data, fld.sigma.data))
        est = estimate_rate_discrete(slices[i].data, fld)
        est_sections.append(est.bits)
        clamped += est.clamped
        decoded.append(Tensor(sym.astype(np.float32), check=False))

    y_hat_np = np.concatenate([d.data for d in decoded], axis=1)
    z_hat = model.gs(Tensor(y_hat_np, check=False), f_sem)

    container = BitstreamContainer(
        flags=FLAG_MAP_CONDITIONED if cfg.use_map else 0,
        image_w=img_w, image_h=img_h,
        latent_c=c, latent_h=zh, latent_w=zw,
        n=cfg.n, m=cfg.m, k=model.layout.k,
        lambda_index=model.lambda_index, model_hash=model.hash,
        sections=sections)
    total = container.total_bytes()
    section_bits = [8 * len(s) for s in sections]
    report = CompressReport(
        bpp=8.0 * total / (img_w * img_h),
        total_bytes=total,
        estimated_bits=float(sum(est_sections)),
        actual_bits=float(sum(section_bits)),
        section_bits=section_bits,
        estimated_section_bits=est_sections,
        clamped_bins=clamped)
    return container, z_hat, report


def decode_code_tensor(model: LatentCodecModel, container: BitstreamContainer,
                       stop_after: int | None = None) -> list[np.ndarray]:
    """Decode the hyper stream and code slices (causally, in order).

    Returns [h_hat, slice_0, ..., slice_{j}]; decoding stops after
    `stop_after` slices when given. Used by decompress and by corruption
    tests that need the prefix property directly.
    """
    model.set_training(False)
    cfg = model.cfg
    hy, wy = container.latent_h >> cfg.scales, container.latent_w >> cfg.scales
    hh, hw = hy // 4, wy // 4
    h_shape = (1, cfg.m // 2, hh, hw)
    hyper_field = _hyper_field(model, Tensor(np.zeros(h_shape, dtype=np.float32), check=False))
    h_hat = decode_symbols(container.sections[0], hyper_field.mu.data,
                           hyper_field.sigma.data).reshape(h_shape).astype(np.float32)
    out = [h_hat]
    gc = model.hs(Tensor(h_hat, check=False))
    decoded: list[Tensor] = []
    widths = model.layout.widths()
    k = model.layout.k if stop_after is None else min(stop_after, model.layout.k)
    for i in range(k):
        fld = model.cm.predict(gc, decoded, i)
        sym = decode_symbols(container.sections[1 + i], fld.mu.data, fld.sigma.data)
        sl = sym.reshape(1, widths[i], hy, wy).astype(np.float32)
        out.append(sl)
        decoded.append(Tensor(sl, check=False))
    return out


def decompress(model: LatentCodecModel, container: BitstreamContainer,
               m: MapRaster | None) -> Tensor:
    """Decode a container back to the reconstructed latent."""
    if container.version != VERSION:
        raise FormatError(f"decompress: unsupported version {container.version}")
    if model.hash == 0:
        model.refresh_hash()
    if container.model_hash != model.hash:
        raise ModelMismatchError(
            f"decompress: stream written by model {container.model_hash:#018x}, "
            f"loaded model is {model.hash:#018x}")
    cfg = model.cfg
    if container.k != model.layout.k or container.m != cfg.m:
        raise FormatError("decompress: container layout disagrees with model")
    if cfg.use_map:
        if m is None:
            raise ShapeError("decompress: map-conditioned stream needs the map raster")
        if (m.height, m.width) != (container.image_h, container.image_w):
            raise ShapeError(f"decompress: map {m.height}x{m.width} does not match "
                             f"header {container.image_h}x{container.image_w}")
    decoded = decode_code_tensor(model, container)
    y_hat = np.concatenate(decoded[1:], axis=1)
    f_sem = model.semantic_features(m, (container.latent_h, container.latent_w))
    return model.gs(Tensor(y_hat, check=False), f_sem)


def write_container(container: BitstreamContainer, path: str | Path) -> int:
    raw = container.serialize()
    Path(path).write_bytes(raw)
    return len(raw)


def read_container(path: str | Path) -> BitstreamContainer:
    return BitstreamContainer.parse(Path(path).read_bytes())
