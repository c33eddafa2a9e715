import numpy as np
import pytest

from pqkv.analysis import (
    channel_stats,
    compare_quantizers,
    isolate_outliers,
    sensitivity_study,
)
from pqkv.pq_core import PQConfig, assign_codes, train_codebooks

from conftest import centroid_stream


class TestChannelStats:
    def test_constant_tensor(self):
        X = np.full((10, 4), 2.5)
        stats = channel_stats(X)
        np.testing.assert_allclose(stats.mean, 2.5)
        np.testing.assert_allclose(stats.std, 0.0)
        np.testing.assert_allclose(stats.absmax, 2.5)
        assert stats.global_absmax == 2.5
        assert stats.outlier_channels == []

    def test_scaled_channels_flagged(self, rng):
        X = rng.standard_normal((500, 16))
        X[:, 7] *= 30.0
        X[:, 13] *= 30.0
        stats = channel_stats(X)
        assert stats.outlier_channels == [7, 13]

    def test_matches_numpy_directly(self, rng):
        X = rng.standard_normal((50, 6))
        stats = channel_stats(X)
        np.testing.assert_allclose(stats.mean, X.mean(axis=0))
        np.testing.assert_allclose(stats.std, X.std(axis=0, ddof=1))
        np.testing.assert_allclose(stats.absmax, np.abs(X).max(axis=0))

    def test_column_permutation_permutes_stats(self, rng):
        X = rng.standard_normal((100, 8))
        X[:, 2] *= 50.0
        perm = np.array([5, 2, 7, 0, 1, 3, 4, 6])
        base = channel_stats(X)
        shuffled = channel_stats(X[:, perm])
        np.testing.assert_allclose(shuffled.std, base.std[perm])
        assert shuffled.outlier_channels == [1]  # channel 2 moved to slot 1

    def test_single_row_rejected(self):
        with pytest.raises(ValueError):
            channel_stats(np.ones((1, 4)))

    def test_to_dict_roundtrip(self, rng):
        d = channel_stats(rng.standard_normal((20, 3))).to_dict()
        assert isinstance(d["mean"], list)
        assert isinstance(d["global_absmax"], float)


class TestIsolateOutliers:
    def test_fraction_zero_is_identity(self, rng):
        X = rng.standard_normal((10, 4))
        entries, filtered = isolate_outliers(X, 0.0)
        assert entries == []
        np.testing.assert_array_equal(filtered, X)

    def test_single_spike_extracted(self, rng):
        X = rng.standard_normal((20, 5))
        X[3, 2] = 1000.0
        entries, filtered = isolate_outliers(X, 1 / X.size)
        assert entries == [(3, 2, 1000.0)]
        assert abs(filtered[3, 2]) < 100.0

    def test_entry_count_is_ceil(self, rng):
        X = rng.standard_normal((10, 10))
        entries, _ = isolate_outliers(X, 0.015)  # ceil(1.5) = 2
        assert len(entries) == 2

    def test_scatter_back_reconstructs_exactly(self, rng):
        X = rng.standard_normal((30, 8))
        entries, filtered = isolate_outliers(X, 0.05)
        rebuilt = filtered.copy()
        for r, c, v in entries:
            rebuilt[r, c] = v
        np.testing.assert_array_equal(rebuilt, X)

    def test_extracted_are_the_largest(self, rng):
        X = rng.standard_normal((40, 6))
        entries, filtered = isolate_outliers(X, 0.02)
        smallest_kept = min(abs(v) for _, _, v in entries)
        assert np.abs(filtered).max() <= smallest_kept + 1e-12

    def test_bad_fraction(self, rng):
        with pytest.raises(ValueError):
            isolate_outliers(rng.standard_normal((4, 4)), 1.0)


class TestSensitivityStudy:
    def test_clustered_spikes_leave_pq_insensitive(self):
        # outliers that form their own tight cluster get dedicated
        # centroids, so removing them barely changes the PQ error
        rng = np.random.default_rng(0)
        X = rng.standard_normal((2048, 16))
        n_rows = int(np.ceil(0.01 * X.size / 2))
        hit = rng.choice(2048, n_rows, replace=False)
        signs = rng.choice([-1.0, 1.0], n_rows)
        for c in (0, 1):
            X[hit, c] = signs * 30.0 + rng.normal(0, 0.1, n_rows)
        cfg = PQConfig(d=16, M=8, nbits=8, seed=0)
        report = sensitivity_study(X, cfg, fraction=0.01, quantizer="pq")
        assert abs(report.sensitivity) < 0.05

    def test_spiked_int_sensitivity_large(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((2048, 16))
        spikes = rng.random(X.shape) < 0.01
        X[spikes] += np.sign(X[spikes]) * 50.0
        cfg = PQConfig(d=16, M=8, nbits=4, seed=0)
        report = sensitivity_study(X, cfg, fraction=0.01, quantizer="int",
                                   int_nbits=2)
        assert report.sensitivity > 0.5

    def test_fraction_zero_gives_zero(self, rng):
        X = rng.standard_normal((256, 8))
        cfg = PQConfig(d=8, M=4, nbits=2, seed=0)
        report = sensitivity_study(X, cfg, fraction=0.0)
        assert report.sensitivity == 0.0
        assert report.err_full == report.err_filtered

    def test_unknown_quantizer(self, rng):
        with pytest.raises(ValueError):
            sensitivity_study(rng.standard_normal((64, 8)),
                              PQConfig(d=8, M=4, nbits=2), quantizer="fp8")


class TestCompareQuantizers:
    def test_centroid_data_gives_zero_pq_mse(self, rng):
        cfg = PQConfig(d=8, M=4, nbits=2, seed=0)
        base = rng.standard_normal((cfg.ksub, 8))
        cb = train_codebooks(base, cfg)
        X = centroid_stream(cb, assign_codes(base, cb).codes)
        result = compare_quantizers(X, cfg, int_nbits=4)
        assert result["mse_pq"] == pytest.approx(0.0, abs=1e-10)

    def test_heavy_tails_hurt_int_more(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((2048, 16))
        spikes = rng.random(X.shape) < 0.01
        X[spikes] += np.sign(X[spikes]) * 50.0
        cfg = PQConfig(d=16, M=8, nbits=6, seed=0)  # 3 bits/value
        result = compare_quantizers(X, cfg, int_nbits=3)
        assert result["mse_pq"] < result["mse_int_per_tensor"]
        assert result["bits_per_value_pq"] == 3.0

    def test_16bit_int_near_lossless(self, rng):
        X = rng.standard_normal((128, 8))
        cfg = PQConfig(d=8, M=4, nbits=2, seed=0)
        result = compare_quantizers(X, cfg, int_nbits=16)
        assert result["mse_int_per_tensor"] < 1e-7

    def test_per_channel_no_worse_on_scaled_channels(self, rng):
        X = rng.standard_normal((512, 8))
        X[:, 3] *= 100.0
        cfg = PQConfig(d=8, M=4, nbits=4, seed=0)
        result = compare_quantizers(X, cfg, int_nbits=4)
        assert result["mse_int_per_channel"] <= result["mse_int_per_tensor"]
