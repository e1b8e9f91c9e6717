"""Synthetic dataset generation and PPM/PGM interchange."""

import numpy as np
import pytest

from magc.data import (DatasetManifest, ImageBuffer, MapRaster, SyntheticSceneSpec,
                       gen_data, generate_scene, read_pgm, read_ppm, write_pgm,
                       write_ppm)
from magc.errors import FormatError, ShapeError


class TestRasters:
    def test_map_raster_rejects_bad_ids(self):
        with pytest.raises(ShapeError):
            MapRaster(np.full((4, 4), 9, dtype=np.uint8), 4)

    def test_one_hot_planes(self):
        m = MapRaster(np.array([[0, 1], [2, 3]], dtype=np.uint8), 4)
        oh = m.one_hot()
        assert oh.shape == (4, 2, 2)
        np.testing.assert_array_equal(oh.sum(axis=0), np.ones((2, 2)))

    def test_image_clamped(self):
        img = ImageBuffer(np.array([[[1.5, -0.2, 0.5]]], dtype=np.float32))
        assert img.pixels.max() <= 1.0
        assert img.pixels.min() >= 0.0


class TestPnmIO:
    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = ImageBuffer(rng.uniform(0, 1, size=(10, 14, 3)).astype(np.float32))
        path = tmp_path / "x.ppm"
        write_ppm(img, path)
        back = read_ppm(path)
        assert back.pixels.shape == (10, 14, 3)
        # quantized to 8 bits on disk
        np.testing.assert_allclose(back.pixels, img.pixels, atol=0.5 / 255 + 1e-6)

    def test_pgm_round_trip(self, tmp_path):
        m = MapRaster(np.arange(12, dtype=np.uint8).reshape(3, 4) % 4, 4)
        path = tmp_path / "x.pgm"
        write_pgm(m, path)
        back = read_pgm(path, 4)
        np.testing.assert_array_equal(back.classes, m.classes)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P6\n4 4\n255\nxx")
        with pytest.raises(FormatError):
            read_ppm(path)

    def test_comment_headers(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 2\n255\n\x00\x01\x02\x03")
        back = read_pgm(path, 4)
        np.testing.assert_array_equal(back.classes, [[0, 1], [2, 3]])


class TestGenerator:
    def test_seed_determinism_bytes(self, tmp_path):
        spec = SyntheticSceneSpec(size=32, seed=42)
        m1 = gen_data(spec, 3, tmp_path / "a")
        m2 = gen_data(spec, 3, tmp_path / "b")
        for (i1, p1), (i2, p2) in zip(m1.pairs, m2.pairs):
            assert (tmp_path / "a" / i1).read_bytes() == (tmp_path / "b" / i2).read_bytes()
            assert (tmp_path / "a" / p1).read_bytes() == (tmp_path / "b" / p2).read_bytes()

    def test_pairs_match_dims_and_classes(self, tmp_path):
        spec = SyntheticSceneSpec(size=32, seed=1)
        manifest = gen_data(spec, 5, tmp_path)
        for i in range(len(manifest)):
            img, m = manifest.load_pair(i)
            assert (img.height, img.width) == (m.height, m.width)
            assert m.classes.max() < spec.num_classes

    def test_all_classes_appear_over_many_scenes(self):
        spec = SyntheticSceneSpec(size=48, seed=7, water_blobs=(1, 2))
        rng = np.random.default_rng(spec.seed)
        hist = np.zeros(4, dtype=np.int64)
        for _ in range(100):
            _, m = generate_scene(spec, rng)
            hist += np.bincount(m.classes.reshape(-1), minlength=4)
        assert (hist > 0).all()

    def test_manifest_round_trip(self, tmp_path):
        spec = SyntheticSceneSpec(size=32, seed=3)
        manifest = gen_data(spec, 2, tmp_path, split="test")
        loaded = DatasetManifest.load(tmp_path / "manifest_test.json")
        assert loaded.pairs == manifest.pairs
        assert loaded.seed == 3
        assert loaded.split == "test"
