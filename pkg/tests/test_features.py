import numpy as np
import pytest

from vadforge.audio import AudioClip
from vadforge.errors import DataError, ShapeError
from vadforge.features import (
    FeatureMatrix,
    MfbConfig,
    extract_mfb,
    fit_stats,
    frame_count,
    mel_filterbank,
    mel_scale,
    mel_to_hz,
    normalize_global,
    normalize_instance,
)

SR = 16000
CFG = MfbConfig()


class TestFrameCount:
    def test_one_second(self):
        assert frame_count(16000, CFG, SR) == 98  # floor(15600/160) + 1

    def test_exactly_one_window(self):
        assert frame_count(400, CFG, SR) == 1

    def test_below_one_window(self):
        assert frame_count(399, CFG, SR) == 0


class TestMelScale:
    def test_zero(self):
        assert mel_scale(0.0) == 0.0

    def test_700(self):
        assert mel_scale(700.0) == pytest.approx(781.1728387480312, abs=1e-9)

    def test_8000(self):
        assert mel_scale(8000.0) == pytest.approx(2840.023046708319, abs=1e-9)

    def test_inverse(self):
        f = np.linspace(0, 8000, 50)
        np.testing.assert_allclose(mel_to_hz(mel_scale(f)), f, atol=1e-8)


class TestFilterbank:
    def test_shape(self):
        fb = mel_filterbank(CFG, SR)
        assert fb.shape == (80, 257)

    def test_rows_nonnegative_unimodal(self):
        fb = mel_filterbank(CFG, SR)
        assert np.all(fb >= 0)
        for row in fb:
            d = np.diff(row)
            falling = False
            for v in d:
                if v < -1e-15:
                    falling = True
                elif v > 1e-15:
                    assert not falling, "row rises again after falling"

    def test_interior_bins_covered(self):
        fb = mel_filterbank(CFG, SR)
        bin_hz = np.arange(257) * SR / 512
        interior = (bin_hz > 0) & (bin_hz < SR / 2)
        assert np.all(fb.sum(axis=0)[interior] > 0)


class TestExtractMfb:
    def test_zero_clip_hits_log_floor(self):
        feats = extract_mfb(AudioClip(np.zeros(SR), SR), CFG)
        np.testing.assert_allclose(feats.values, np.log(1e-10))

    def test_frame_count_contract(self):
        rng = np.random.default_rng(0)
        for n in (399, 400, 401, 5000, 16000):
            clip = AudioClip(rng.normal(size=n) * 0.1, SR)
            feats = extract_mfb(clip, CFG)
            assert feats.n_frames == frame_count(n, CFG, SR)
            assert feats.dims == 80

    def test_band_center_sine_argmax(self):
        # oracle: band k's triangle peaks at Mel point k+1
        pts_hz = mel_to_hz(np.linspace(mel_scale(0.0), mel_scale(SR / 2), 82))
        t = np.arange(SR) / SR
        for band in (30, 45, 60, 70):
            clip = AudioClip(np.sin(2 * np.pi * pts_hz[band + 1] * t), SR)
            feats = extract_mfb(clip, CFG)
            assert np.argmax(feats.values.mean(axis=0)) == band

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        clip = AudioClip(rng.normal(size=8000) * 0.2, SR)
        a = extract_mfb(clip, CFG).values
        b = extract_mfb(clip, CFG).values
        np.testing.assert_array_equal(a, b)

    def test_hop_shift_covariance(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=8000) * 0.2
        full = extract_mfb(AudioClip(x, SR), CFG).values
        shifted = extract_mfb(AudioClip(x[160:], SR), CFG).values
        n = min(len(full) - 1, len(shifted))
        np.testing.assert_allclose(full[1 : 1 + n], shifted[:n], atol=1e-6)


class TestFitStats:
    def test_identical_rows_floor_std(self):
        row = np.array([1.5, -2.0, 0.0])
        mat = FeatureMatrix(np.tile(row, (10, 1)), 0.01)
        stats = fit_stats([mat])
        np.testing.assert_allclose(stats.mean, row)
        np.testing.assert_array_equal(stats.std, np.full(3, 1e-8))

    def test_two_frames_population_std(self):
        stats = fit_stats([FeatureMatrix(np.array([[0.0], [2.0]]), 0.01)])
        assert stats.mean[0] == pytest.approx(1.0)
        assert stats.std[0] == pytest.approx(1.0)  # population, not sample

    def test_stream_equals_concatenation(self):
        rng = np.random.default_rng(3)
        parts = [rng.normal(size=(n, 4)) for n in (3, 17, 50, 29)]
        streamed = fit_stats([FeatureMatrix(p, 0.01) for p in parts])
        whole = fit_stats([FeatureMatrix(np.vstack(parts), 0.01)])
        np.testing.assert_allclose(streamed.mean, whole.mean, atol=1e-9)
        np.testing.assert_allclose(streamed.std, whole.std, atol=1e-9)

    def test_empty_stream(self):
        with pytest.raises(DataError):
            fit_stats([])


class TestNormalize:
    def test_mean_features_to_zero(self):
        stats = fit_stats([FeatureMatrix(np.array([[1.0, 2.0], [3.0, 4.0]]), 0.01)])
        mat = FeatureMatrix(np.tile(stats.mean, (5, 1)), 0.01)
        np.testing.assert_allclose(normalize_global(mat, stats).values, 0.0, atol=1e-12)

    def test_self_fit_standardizes(self):
        rng = np.random.default_rng(4)
        mat = FeatureMatrix(rng.normal(2.0, 3.0, size=(500, 6)), 0.01)
        out = normalize_global(mat, fit_stats([mat])).values
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-7)
        np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-6)

    def test_dim_mismatch(self):
        stats = fit_stats([FeatureMatrix(np.zeros((2, 79)), 0.01)])
        with pytest.raises(ShapeError):
            normalize_global(FeatureMatrix(np.zeros((2, 80)), 0.01), stats)

    def test_denormalize_recovers(self):
        rng = np.random.default_rng(5)
        mat = FeatureMatrix(rng.normal(5.0, 2.0, size=(100, 3)), 0.01)
        stats = fit_stats([mat])
        normed = normalize_global(mat, stats)
        back = normed.values * stats.std + stats.mean
        np.testing.assert_allclose(back, mat.values, rtol=1e-9)

    def test_instance_single_frame_zeros(self):
        out = normalize_instance(FeatureMatrix(np.array([[3.0, -1.0]]), 0.01))
        np.testing.assert_array_equal(out.values, 0.0)

    def test_instance_zero_mean(self):
        rng = np.random.default_rng(6)
        out = normalize_instance(FeatureMatrix(rng.normal(1.0, 4.0, (200, 5)), 0.01))
        np.testing.assert_allclose(out.values.mean(axis=0), 0.0, atol=1e-7)

    def test_halves_differ_from_whole(self):
        # normalizing two halves separately != normalizing the whole matrix
        mat = np.array([[0.0], [0.5], [10.0], [10.5]])
        whole = normalize_instance(FeatureMatrix(mat, 0.01)).values
        halves = np.vstack(
            [
                normalize_instance(FeatureMatrix(mat[:2], 0.01)).values,
                normalize_instance(FeatureMatrix(mat[2:], 0.01)).values,
            ]
        )
        assert not np.allclose(whole, halves, atol=1e-3)
