"""Image/map containers, PPM/PGM I/O, synthetic paired-scene generation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError


@dataclass
class ImageBuffer:
    """H x W x 3 float image in [0,1]; values are clamped at I/O boundaries."""

    pixels: np.ndarray  # (H, W, 3) float32

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError(f"ImageBuffer: expected (H,W,3), got {self.pixels.shape}")
        self.pixels = np.clip(self.pixels.astype(np.float32), 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.pixels.transpose(2, 0, 1))

    @classmethod
    def from_chw(cls, arr: np.ndarray) -> "ImageBuffer":
        return cls(np.ascontiguousarray(arr.transpose(1, 2, 0)))


@dataclass
class MapRaster:
    """Integer class grid paired with an image; one-hot expanded on demand."""

    classes: np.ndarray  # (H, W) uint8
    num_classes: int

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.uint8)
        if self.classes.ndim != 2:
            raise ShapeError(f"MapRaster: expected (H,W), got {self.classes.shape}")
        if self.classes.size and int(self.classes.max()) >= self.num_classes:
            raise ShapeError(f"MapRaster: class id {int(self.classes.max())} "
                             f">= num_classes {self.num_classes}")

    @property
    def height(self) -> int:
        return self.classes.shape[0]

    @property
    def width(self) -> int:
        return self.classes.shape[1]

    def one_hot(self) -> np.ndarray:
        """(num_classes, H, W) float32 indicator planes."""
        h, w = self.classes.shape
        oh = np.zeros((self.num_classes, h, w), dtype=np.float32)
        for c in range(self.num_classes):
            oh[c] = self.classes == c
        return oh


# ---------------------------------------------------------------------------
# PPM / PGM (binary variants; dependency-free interchange formats)

def write_ppm(img: ImageBuffer, path: str | Path) -> None:
    data = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def write_pgm(m: MapRaster, path: str | Path) -> None:
    header = f"P5\n{m.width} {m.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + m.classes.tobytes())


def _parse_pnm_header(raw: bytes, magic: bytes, path) -> tuple[int, int, int]:
    if raw[:2] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos] in b" \t\r\n":
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos] not in b" \t\r\n":
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    return fields[0], fields[1], pos


def read_ppm(path: str | Path) -> ImageBuffer:
    raw = Path(path).read_bytes()
    w, h, ofs = _parse_pnm_header(raw, b"P6", path)
    need = w * h * 3
    if len(raw) - ofs < need:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8, count=need, offset=ofs).reshape(h, w, 3)
    return ImageBuffer(arr.astype(np.float32) / 255.0)


def read_pgm(path: str | Path, num_classes: int) -> MapRaster:
    raw = Path(path).read_bytes()
    w, h, ofs = _parse_pnm_header(raw, b"P5", path)
    need = w * h
    if len(raw) - ofs < need:
        raise FormatError(f"{path}: truncated raster data")
    arr = np.frombuffer(raw, dtype=np.uint8, count=need, offset=ofs).reshape(h, w)
    return MapRaster(arr.copy(), num_classes)


# ---------------------------------------------------------------------------
# synthetic paired scenes

CLASS_NAMES = ("background", "building", "road", "water")

_BASE_COLORS = np.array([
    [0.42, 0.52, 0.33],   # background: vegetation green
    [0.58, 0.52, 0.48],   # building: warm grey
    [0.33, 0.33, 0.36],   # road: asphalt
    [0.18, 0.30, 0.52],   # water: blue
], dtype=np.float32)


@dataclass
class SyntheticSceneSpec:
    """Knobs for the procedural scene generator."""

    size: int = 64
    num_classes: int = 4
    buildings: tuple[int, int] = (2, 6)
    building_size: tuple[int, int] = (6, 16)
    roads: tuple[int, int] = (1, 3)
    road_width: tuple[int, int] = (3, 6)
    water_blobs: tuple[int, int] = (0, 2)
    water_radius: tuple[int, int] = (6, 14)
    texture_noise: float = 0.015
    block_noise: float = 0.08   # per-8px-cell color variation (ground texture)
    seed: int = 0

    def __post_init__(self):
        if self.num_classes > 8:
            raise ShapeError("SyntheticSceneSpec: at most 8 classes")


def _box_blur3(img: np.ndarray) -> np.ndarray:
    """3x3 box blur with edge replication."""
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(img, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            out += p[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    return (out / 9.0).astype(np.float32)


def generate_scene(spec: SyntheticSceneSpec, rng: np.random.Generator) -> tuple[ImageBuffer, MapRaster]:
    """One paired (image, class raster) scene.

    The raster is the exact rasterization of the placed shapes; the image
    renders class base colors plus seeded texture noise and a light blur.
    """
    s = spec.size
    grid = np.zeros((s, s), dtype=np.uint8)

    # draw order: water under roads under buildings
    for _ in range(rng.integers(spec.water_blobs[0], spec.water_blobs[1] + 1)):
        r = int(rng.integers(spec.water_radius[0], spec.water_radius[1] + 1))
        cy, cx = rng.integers(0, s, size=2)
        yy, xx = np.ogrid[:s, :s]
        ar = max(0.5, float(rng.uniform(0.6, 1.6)))
        mask = ((yy - cy) / ar) ** 2 + ((xx - cx) * ar) ** 2 <= r * r
        grid[mask] = 3

    for _ in range(rng.integers(spec.roads[0], spec.roads[1] + 1)):
        w = int(rng.integers(spec.road_width[0], spec.road_width[1] + 1))
        pos = int(rng.integers(0, s - w))
        if rng.integers(0, 2) == 0:
            grid[pos:pos + w, :] = 2
        else:
            grid[:, pos:pos + w] = 2

    for _ in range(rng.integers(spec.buildings[0], spec.buildings[1] + 1)):
        bh = int(rng.integers(spec.building_size[0], spec.building_size[1] + 1))
        bw = int(rng.integers(spec.building_size[0], spec.building_size[1] + 1))
        y0 = int(rng.integers(0, max(1, s - bh)))
        x0 = int(rng.integers(0, max(1, s - bw)))
        grid[y0:y0 + bh, x0:x0 + bw] = 1

    # per-scene appearance varies independently of the class layout: jittered
    # class colors, a smooth illumination gradient, and pixel texture -- the
    # raster alone must not determine the image
    colors = _BASE_COLORS[:spec.num_classes] + rng.normal(
        0.0, 0.05, size=(spec.num_classes, 3)).astype(np.float32)
    img = colors[grid].astype(np.float32)
    img *= float(rng.uniform(0.92, 1.08))
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float32) / s
    gx, gy = rng.uniform(-0.08, 0.08, size=2)
    img += (gx * xx + gy * yy)[:, :, None].astype(np.float32)
    if spec.block_noise > 0 and s >= 8:
        cells = rng.normal(0.0, spec.block_noise,
                           size=(s // 8, s // 8, 3)).astype(np.float32)
        img += np.repeat(np.repeat(cells, 8, axis=0), 8, axis=1)
    img += rng.normal(0.0, spec.texture_noise, size=img.shape).astype(np.float32)
    img = _box_blur3(img)
    return ImageBuffer(img), MapRaster(grid, spec.num_classes)


@dataclass
class DatasetManifest:
    """Paths of paired image/map files plus the generation seed."""

    root: Path
    pairs: list[tuple[str, str]] = field(default_factory=list)
    split: str = "train"
    seed: int = 0
    num_classes: int = 4

    def save(self, path: str | Path) -> None:
        doc = {"root": str(self.root), "split": self.split, "seed": self.seed,
               "num_classes": self.num_classes,
               "pairs": [list(p) for p in self.pairs]}
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        doc = json.loads(Path(path).read_text())
        return cls(root=Path(doc["root"]), pairs=[tuple(p) for p in doc["pairs"]],
                   split=doc["split"], seed=doc["seed"],
                   num_classes=doc["num_classes"])

    def load_pair(self, i: int) -> tuple[ImageBuffer, MapRaster]:
        img_rel, map_rel = self.pairs[i]
        img = read_ppm(self.root / img_rel)
        m = read_pgm(self.root / map_rel, self.num_classes)
        if (img.height, img.width) != (m.height, m.width):
            raise ShapeError(f"pair {i}: image {img.height}x{img.width} vs "
                             f"map {m.height}x{m.width}")
        return img, m

    def __len__(self) -> int:
        return len(self.pairs)


def gen_data(spec: SyntheticSceneSpec, n_pairs: int, out_dir: str | Path,
             split: str = "train") -> DatasetManifest:
    """Write n paired PPM/PGM files plus a manifest; fully seed-deterministic."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    manifest = DatasetManifest(root=out, split=split, seed=spec.seed,
                               num_classes=spec.num_classes)
    for i in range(n_pairs):
        img, m = generate_scene(spec, rng)
        img_name = f"{split}_{i:05d}.ppm"
        map_name = f"{split}_{i:05d}.pgm"
        write_ppm(img, out / img_name)
        write_pgm(m, out / map_name)
        manifest.pairs.append((img_name, map_name))
    manifest.save(out / f"manifest_{split}.json")
    return manifest
