"""Log-Mel filterbank extraction and feature normalization.

Frames are 25 ms windows hopped every 10 ms by default, reduced to 80
triangular Mel bands (HTK convention) with natural-log compression. Two
normalization regimes are provided: against training-set statistics, and
per instance using only the matrix at hand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioClip
from .errors import DataError, ShapeError

STD_FLOOR = 1e-8
LOG_FLOOR = 1e-10

SOURCE_MFB = "MFB"
SOURCE_EXTERNAL = "External"
_SOURCE_TAGS = {SOURCE_MFB: 0, SOURCE_EXTERNAL: 1}
_TAG_SOURCES = {v: k for k, v in _SOURCE_TAGS.items()}


@dataclass(frozen=True)
class MfbConfig:
    n_mels: int = 80
    win_s: float = 0.025
    hop_s: float = 0.010
    fmin: float = 0.0
    fmax: float | None = None  # None -> Nyquist
    fft_size: int = 512

    def win_samples(self, sample_rate: int) -> int:
        return int(round(self.win_s * sample_rate))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.hop_s * sample_rate))

    def validate(self, sample_rate: int) -> None:
        fmax = self.fmax if self.fmax is not None else sample_rate / 2
        if not (0 <= self.fmin < fmax <= sample_rate / 2):
            raise DataError(f"need 0 <= fmin < fmax <= Nyquist, got {self.fmin}..{fmax}")
        if self.fft_size < self.win_samples(sample_rate):
            raise DataError(
                f"fft_size {self.fft_size} smaller than window "
                f"({self.win_samples(sample_rate)} samples)"
            )
        if self.n_mels < 1 or self.win_s <= 0 or self.hop_s <= 0:
            raise DataError("n_mels, win_s, hop_s must all be positive")


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """frames x dims real features with a declared hop in seconds."""

    values: np.ndarray
    hop_s: float
    source: str = SOURCE_MFB

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ShapeError(f"feature matrix must be 2-D, got shape {values.shape}")
        if values.size and not np.all(np.isfinite(values)):
            raise DataError("feature matrix contains non-finite values")
        if self.hop_s <= 0:
            raise DataError(f"hop must be positive, got {self.hop_s}")
        if self.source not in _SOURCE_TAGS:
            raise DataError(f"unknown feature source {self.source!r}")
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]

    @property
    def source_tag(self) -> int:
        return _SOURCE_TAGS[self.source]


@dataclass(frozen=True, eq=False)
class NormStats:
    """Per-dimension mean and population std over a set of frames."""

    mean: np.ndarray
    std: np.ndarray
    n_frames: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        std = np.maximum(np.asarray(self.std, dtype=np.float64).ravel(), STD_FLOOR)
        if mean.shape != std.shape:
            raise ShapeError("mean and std must have the same length")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dims(self) -> int:
        return self.mean.size


def frame_count(n_samples: int, config: MfbConfig, sample_rate: int) -> int:
    """Number of full analysis windows; trailing partial windows are dropped."""
    win = config.win_samples(sample_rate)
    hop = config.hop_samples(sample_rate)
    if n_samples < win:
        return 0
    return (n_samples - win) // hop + 1


def mel_scale(f: float | np.ndarray) -> float | np.ndarray:
    """Hz to Mel (HTK convention)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: float | np.ndarray) -> float | np.ndarray:
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: MfbConfig, sample_rate: int) -> np.ndarray:
    """Triangular filter weights, shape (n_mels, fft_size // 2 + 1).

    Band k rises linearly from Mel point k to k+1 and falls to k+2; the
    n_mels + 2 points are spaced uniformly on the Mel scale between fmin
    and fmax.
    """
    config.validate(sample_rate)
    fmax = config.fmax if config.fmax is not None else sample_rate / 2
    pts_hz = mel_to_hz(np.linspace(mel_scale(config.fmin), mel_scale(fmax), config.n_mels + 2))
    bin_hz = np.arange(config.fft_size // 2 + 1) * sample_rate / config.fft_size

    lo, mid, hi = pts_hz[:-2, None], pts_hz[1:-1, None], pts_hz[2:, None]
    rise = (bin_hz[None, :] - lo) / np.maximum(mid - lo, 1e-12)
    fall = (hi - bin_hz[None, :]) / np.maximum(hi - mid, 1e-12)
    return np.maximum(0.0, np.minimum(rise, fall))


def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def extract_mfb(clip: AudioClip, config: MfbConfig = MfbConfig()) -> FeatureMatrix:
    """Log-Mel filterbank energies per frame.

    Per frame: periodic Hann window, magnitude-squared DFT, triangular Mel
    weighting, then ``log(max(E, 1e-10))``.
    """
    sr = clip.sample_rate
    config.validate(sr)
    win = config.win_samples(sr)
    hop = config.hop_samples(sr)
    n = frame_count(len(clip), config, sr)
    if n == 0:
        return FeatureMatrix(np.zeros((0, config.n_mels)), config.hop_s, SOURCE_MFB)

    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, win)[::hop][:n]
    windowed = frames * _hann_periodic(win)
    power = np.abs(np.fft.rfft(windowed, n=config.fft_size, axis=1)) ** 2
    energies = power @ mel_filterbank(config, sr).T
    return FeatureMatrix(np.log(np.maximum(energies, LOG_FLOOR)), config.hop_s, SOURCE_MFB)


def fit_stats(features) -> NormStats:
    """Componentwise mean and population std over a stream of feature matrices.

    Single pass with pairwise merging, so results do not depend on how the
    frames were batched into matrices (to ~1e-9).
    """
    n_total = 0
    mean = None
    m2 = None
    for mat in features:
        values = mat.values if isinstance(mat, FeatureMatrix) else np.asarray(mat)
        if values.shape[0] == 0:
            continue
        v = values.astype(np.float64)
        nb = v.shape[0]
        mb = v.mean(axis=0)
        m2b = ((v - mb) ** 2).sum(axis=0)
        if mean is None:
            n_total, mean, m2 = nb, mb, m2b
        else:
            if v.shape[1] != mean.size:
                raise ShapeError(f"feature dims changed mid-stream: {mean.size} vs {v.shape[1]}")
            delta = mb - mean
            na = n_total
            n_total += nb
            mean = mean + delta * (nb / n_total)
            m2 = m2 + m2b + delta**2 * (na * nb / n_total)
    if n_total == 0:
        raise DataError("cannot fit stats on zero frames")
    return NormStats(mean, np.sqrt(m2 / n_total), n_total)


def normalize_global(features: FeatureMatrix, stats: NormStats) -> FeatureMatrix:
    """Standardize against externally fit statistics."""
    if features.dims != stats.dims:
        raise ShapeError(f"feature dims {features.dims} != stats dims {stats.dims}")
    values = (features.values - stats.mean) / stats.std
    return FeatureMatrix(values, features.hop_s, features.source)


def normalize_instance(features: FeatureMatrix) -> FeatureMatrix:
    """Standardize using only this matrix's own per-dimension statistics."""
    if features.n_frames == 0:
        return features
    mean = features.values.mean(axis=0)
    std = np.maximum(features.values.std(axis=0), STD_FLOOR)
    return FeatureMatrix((features.values - mean) / std, features.hop_s, features.source)
