"""Deterministic speech-like test material.

Real corpora are not bundled; these clips give the pipeline something with
speech-shaped spectra (harmonic stacks with syllabic amplitude modulation and
a per-speaker pitch range) that separates cleanly from silence and broadband
noise. Good enough to exercise and gate the full pipeline on a desk machine.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio import AudioClip, write_wav


def speech_clip(duration_s: float, rng: np.random.Generator, sample_rate: int = 16000,
                f0_base: float | None = None) -> AudioClip:
    """One fully voiced pseudo-utterance: harmonics + vibrato + syllabic envelope."""
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = f0_base if f0_base is not None else rng.uniform(110.0, 240.0)
    vib_rate = rng.uniform(4.0, 7.0)
    f0_t = f0 * (1.0 + 0.05 * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0_t) / sample_rate

    x = np.zeros(n)
    tilt = rng.uniform(0.8, 1.4)
    for k in range(1, 13):
        x += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k**tilt

    syllable_rate = rng.uniform(2.5, 4.5)
    env = 0.35 + 0.65 * (0.5 + 0.5 * np.sin(2 * np.pi * syllable_rate * t + rng.uniform(0, 2 * np.pi)))
    x *= env
    x *= rng.uniform(0.25, 0.5) / np.max(np.abs(x))
    return AudioClip(x, sample_rate)


def make_demo_utterances(
    out_dir: str | Path,
    n_clips: int = 48,
    duration_range: tuple[float, float] = (1.2, 3.0),
    n_speakers: int = 4,
    seed: int = 0,
    sample_rate: int = 16000,
) -> list[Path]:
    """Write WAV pseudo-utterances under per-speaker subdirectories."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    speaker_f0 = rng.uniform(100.0, 250.0, n_speakers)
    paths = []
    for i in range(n_clips):
        spk = i % n_speakers
        clip = speech_clip(
            rng.uniform(*duration_range), rng, sample_rate, f0_base=float(speaker_f0[spk])
        )
        path = out_dir / f"spk{spk}" / f"utt_{i:03d}.wav"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_wav(clip, path)
        paths.append(path)
    return paths
