"""Range coder: table construction, losslessness, efficiency, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magc.entropy import GaussianField, estimate_rate_discrete
from magc.engine.tensor import Tensor
from magc.rangecoder import (TOTAL, RangeDecoder, RangeEncoder, build_cdf_tables,
                             decode_symbols, encode_symbols)


def field_of(mu, sigma):
    return GaussianField(Tensor(np.asarray(mu, dtype=np.float64)),
                         Tensor(np.asarray(sigma, dtype=np.float64)))


class TestCdfTables:
    def test_total_is_exact(self):
        rng = np.random.default_rng(0)
        mu = rng.uniform(-10, 10, size=10_000)
        sigma = rng.uniform(0.01, 8, size=10_000)
        freqs, cums, lows = build_cdf_tables(mu, sigma)
        totals = freqs.astype(np.int64).sum(axis=1)
        assert (totals == TOTAL).all()
        assert (cums[:, -1] == TOTAL).all()
        assert (freqs >= 1).all()

    def test_concentrated_mass_center_bin(self):
        freqs, _, lows = build_cdf_tables(np.array([0.0]), np.array([0.01]),
                                          support_radius=64)
        center = int(0 - lows[0])
        assert freqs[0, center] >= TOTAL - (2 * 64 + 1)

    def test_symmetric_when_mu_zero(self):
        freqs, _, lows = build_cdf_tables(np.array([0.0]), np.array([1.7]),
                                          support_radius=8)
        bins = freqs[0, :-1]
        np.testing.assert_array_equal(bins, bins[::-1])

    def test_deterministic_tables(self):
        mu = np.array([0.3, -4.2])
        sigma = np.array([0.5, 2.0])
        f1, c1, l1 = build_cdf_tables(mu, sigma)
        f2, c2, l2 = build_cdf_tables(mu, sigma)
        np.testing.assert_array_equal(f1, f2)
        np.testing.assert_array_equal(c1, c2)
        np.testing.assert_array_equal(l1, l2)


class TestRoundTrip:
    def test_empty_sequence(self):
        enc = RangeEncoder()
        data = enc.finish()
        assert len(data) <= 8
        RangeDecoder(data)  # initializes cleanly

    def test_small_round_trip(self):
        rng = np.random.default_rng(1)
        mu = rng.uniform(-5, 5, size=200)
        sigma = rng.uniform(0.01, 4, size=200)
        sym = np.round(rng.normal(mu, sigma)).astype(np.int64)
        data = encode_symbols(sym, mu, sigma)
        out = decode_symbols(data, mu, sigma)
        np.testing.assert_array_equal(out, sym)

    def test_escape_path(self):
        mu = np.zeros(6)
        sigma = np.full(6, 0.5)
        sym = np.array([0, 1_000_000, -1, -2_000_000, 3, 70], dtype=np.int64)
        data = encode_symbols(sym, mu, sigma)
        out = decode_symbols(data, mu, sigma)
        np.testing.assert_array_equal(out, sym)

    def test_truncated_stream_raises(self):
        from magc.errors import FormatError
        rng = np.random.default_rng(2)
        mu = rng.uniform(-5, 5, size=500)
        sigma = rng.uniform(0.5, 4, size=500)
        sym = np.round(rng.normal(mu, sigma)).astype(np.int64)
        data = encode_symbols(sym, mu, sigma)
        with pytest.raises(FormatError):
            decode_symbols(data[: max(4, len(data) // 4)], mu, sigma)

    def test_byte_identical_across_runs(self):
        rng = np.random.default_rng(3)
        mu = rng.uniform(-5, 5, size=300)
        sigma = rng.uniform(0.01, 4, size=300)
        sym = np.round(rng.normal(mu, sigma)).astype(np.int64)
        assert encode_symbols(sym, mu, sigma) == encode_symbols(sym, mu, sigma)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 400))
    def test_property_round_trip(self, seed, n):
        rng = np.random.default_rng(seed)
        mu = rng.uniform(-10, 10, size=n)
        sigma = rng.uniform(0.01, 8, size=n)
        sym = np.round(rng.normal(mu, sigma)).astype(np.int64)
        out = decode_symbols(encode_symbols(sym, mu, sigma), mu, sigma)
        np.testing.assert_array_equal(out, sym)


class TestEfficiency:
    def test_coded_length_near_shannon(self):
        rng = np.random.default_rng(9)
        n = 20_000
        mu = rng.uniform(-10, 10, size=n)
        sigma = rng.uniform(0.01, 8, size=n)
        sym = np.round(rng.normal(mu, sigma)).astype(np.int64)
        data = encode_symbols(sym, mu, sigma)
        est = estimate_rate_discrete(sym.astype(np.float64), field_of(mu, sigma))
        assert len(data) * 8 <= 1.01 * est.bits + 256
