"""Labeled corpus synthesis: concatenation with random pauses, SNR-controlled
noise mixing, and JSON-lines manifests.

Long recordings are built by joining short utterances with Gaussian-length
silences, then degraded with typed noise scaled so the measured SNR matches
the request. Ground-truth speech spans fall out of the construction for free.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioClip, rms, write_wav
from .errors import CoverageError, DataError, ManifestError
from .features import MfbConfig, frame_count

NOISE_TYPES = ("white", "ads", "music", "news", "talkshows")
CLEAN = "clean"
PARTITIONS = ("train", "dev", "test")

_PART_INDEX = {p: i for i, p in enumerate(PARTITIONS)}

WHITE_NOISE_PEAK = 0.3
_MAX_PAUSE_DRAWS = 100_000


@dataclass(frozen=True)
class PauseModel:
    """Gaussian pause durations, rejection-truncated into [min_pause, max_pause]."""

    mu: float = 2.22
    sigma: float = 1.83
    min_pause: float = 0.1
    max_pause: float = 6.0

    def __post_init__(self):
        if not (0 < self.min_pause <= self.max_pause):
            raise DataError(f"need 0 < min_pause <= max_pause, got {self.min_pause}..{self.max_pause}")
        if self.sigma < 0:
            raise DataError("sigma must be >= 0")


@dataclass(frozen=True)
class SpeechSpan:
    start_s: float
    end_s: float

    def __post_init__(self):
        if not (0 <= self.start_s < self.end_s):
            raise DataError(f"invalid span [{self.start_s}, {self.end_s})")


@dataclass(frozen=True, eq=False)
class LabeledRecording:
    audio: AudioClip
    spans: tuple[SpeechSpan, ...]
    noise_type: str = CLEAN
    snr_db: float | None = None
    source_ids: tuple[str, ...] = ()

    def __post_init__(self):
        spans = tuple(self.spans)
        last_end = 0.0
        for s in spans:
            if s.start_s < last_end:
                raise DataError("spans must be sorted and disjoint")
            last_end = s.end_s
        # allow half a sample of float slack at the recording edge
        if spans and spans[-1].end_s > self.audio.duration + 0.5 / self.audio.sample_rate:
            raise DataError("last span extends past the end of the audio")
        if self.noise_type != CLEAN and self.noise_type not in NOISE_TYPES:
            raise DataError(f"unknown noise type {self.noise_type!r}")
        if (self.snr_db is None) != (self.noise_type == CLEAN):
            raise DataError("snr_db must be set exactly when a noise type is set")
        object.__setattr__(self, "spans", spans)
        object.__setattr__(self, "source_ids", tuple(self.source_ids))


@dataclass(frozen=True)
class ManifestEntry:
    audio: str
    labels: str
    noise: str
    snr_db: float | None
    partition: str
    duration_s: float
    speakers: tuple[str, ...] = ()

    def to_json(self) -> str:
        obj = {
            "audio": self.audio,
            "labels": self.labels,
            "noise": self.noise,
            "snr_db": self.snr_db,
            "partition": self.partition,
            "duration_s": self.duration_s,
        }
        if self.speakers:
            obj["speakers"] = list(self.speakers)
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ManifestEntry":
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"manifest line is not valid JSON: {e}") from e
        missing = {"audio", "labels", "noise", "snr_db", "partition", "duration_s"} - obj.keys()
        if missing:
            raise ManifestError(f"manifest entry missing keys: {sorted(missing)}")
        return cls(
            audio=obj["audio"],
            labels=obj["labels"],
            noise=obj["noise"],
            snr_db=obj["snr_db"],
            partition=obj["partition"],
            duration_s=obj["duration_s"],
            speakers=tuple(obj.get("speakers", ())),
        )


def write_manifest(entries, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(e.to_json() + "\n" for e in entries))


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    lines = Path(path).read_text().splitlines()
    return [ManifestEntry.from_json(line) for line in lines if line.strip()]


def write_spans(spans, path: str | Path) -> None:
    obj = {"spans": [{"start_s": s.start_s, "end_s": s.end_s} for s in spans]}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True))


def read_spans(path: str | Path) -> tuple[SpeechSpan, ...]:
    try:
        obj = json.loads(Path(path).read_text())
        return tuple(SpeechSpan(s["start_s"], s["end_s"]) for s in obj["spans"])
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ManifestError(f"{path}: malformed span sidecar: {e}") from e


def sample_pause(model: PauseModel, rng: np.random.Generator) -> float:
    """One pause duration: Gaussian draw, redrawn until it lands in bounds."""
    for _ in range(_MAX_PAUSE_DRAWS):
        value = float(rng.normal(model.mu, model.sigma))
        if model.min_pause <= value <= model.max_pause:
            return value
    raise DataError(
        f"pause sampling did not land in [{model.min_pause}, {model.max_pause}] "
        f"after {_MAX_PAUSE_DRAWS} draws (mu={model.mu}, sigma={model.sigma})"
    )


def concatenate(
    utterances: list[AudioClip],
    model: PauseModel,
    rng: np.random.Generator,
    source_ids: tuple[str, ...] = (),
) -> LabeledRecording:
    """Join utterances with random silences; spans mark the utterance intervals."""
    if not utterances:
        raise DataError("cannot concatenate an empty utterance list")
    sr = utterances[0].sample_rate
    if any(u.sample_rate != sr for u in utterances):
        rates = sorted({u.sample_rate for u in utterances})
        raise DataError(f"utterances have mixed sample rates: {rates}")

    pieces = []
    spans = []
    pos = 0
    for i, utt in enumerate(utterances):
        if i > 0:
            gap = int(round(sample_pause(model, rng) * sr))
            pieces.append(np.zeros(gap))
            pos += gap
        pieces.append(utt.samples)
        spans.append(SpeechSpan(pos / sr, (pos + len(utt)) / sr))
        pos += len(utt)
    return LabeledRecording(AudioClip(np.concatenate(pieces), sr), tuple(spans), source_ids=source_ids)


def mix_noise(
    speech: AudioClip,
    noise: AudioClip,
    snr_db: float,
    rng: np.random.Generator,
) -> AudioClip:
    """Add a random slice of ``noise`` to ``speech`` at the requested SNR.

    The noise gain is set so its RMS equals ``rms(speech) * 10^(-snr/20)``;
    the sum is returned unnormalized so the realized SNR stays exact.
    """
    if not math.isfinite(snr_db):
        raise DataError(f"snr_db must be finite, got {snr_db}")
    if noise.sample_rate != speech.sample_rate:
        raise DataError(f"sample rate mismatch: speech {speech.sample_rate}, noise {noise.sample_rate}")
    if len(noise) < len(speech):
        raise DataError(f"noise ({len(noise)} samples) shorter than speech ({len(speech)} samples)")
    speech_rms = rms(speech)
    if speech_rms == 0.0:
        raise DataError("speech is silent; SNR is undefined")

    start = int(rng.integers(0, len(noise) - len(speech) + 1))
    piece = noise.samples[start : start + len(speech)]
    piece_rms = float(np.sqrt(np.mean(np.square(piece))))
    if piece_rms == 0.0:
        raise DataError("selected noise slice is silent; cannot scale to target SNR")

    gain = speech_rms * 10.0 ** (-snr_db / 20.0) / piece_rms
    return AudioClip(speech.samples + gain * piece, speech.sample_rate)


def white_noise(n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean unit-variance Gaussian noise, peak-normalized to 0.3."""
    x = rng.standard_normal(n_samples)
    if n_samples:
        x *= WHITE_NOISE_PEAK / np.max(np.abs(x))
    return x


class NoiseBank:
    """Per-type noise streams with disjoint train/dev/test material.

    File-backed types concatenate every WAV under ``<root>/<type>/`` (sorted
    by name) and split the stream contiguously across partitions. White noise
    can also be generated on demand, seeded per recording.
    """

    def __init__(self, streams: dict[tuple[str, str], AudioClip], generate_white: bool = True):
        self._streams = streams
        self._generate_white = generate_white

    @classmethod
    def from_dir(
        cls,
        root: str | Path | None,
        noise_types,
        sample_rate: int,
        split=(0.6, 0.2, 0.2),
        generate_white: bool = True,
    ) -> "NoiseBank":
        from .audio import read_wav, resample

        if len(split) != len(PARTITIONS) or not math.isclose(sum(split), 1.0, abs_tol=1e-9):
            raise DataError(f"noise split must give one fraction per partition summing to 1, got {split}")
        streams: dict[tuple[str, str], AudioClip] = {}
        for ntype in noise_types:
            if ntype not in NOISE_TYPES:
                raise DataError(f"unknown noise type {ntype!r}; expected one of {NOISE_TYPES}")
            type_dir = Path(root) / ntype if root is not None else None
            if type_dir is None or not type_dir.is_dir():
                if ntype == "white" and generate_white:
                    continue  # generated per recording
                raise DataError(f"no noise directory for type {ntype!r} under {root}")
            wavs = sorted(type_dir.glob("*.wav"))
            if not wavs:
                raise DataError(f"noise directory {type_dir} holds no .wav files")
            stream = np.concatenate(
                [resample(read_wav(p), sample_rate).samples for p in wavs]
            )
            edges = np.floor(np.cumsum([0.0, *split]) * stream.size).astype(int)
            for part, lo, hi in zip(PARTITIONS, edges[:-1], edges[1:]):
                streams[(ntype, part)] = AudioClip(stream[lo:hi], sample_rate)
        return cls(streams, generate_white=generate_white)

    def noise_for(
        self, noise_type: str, partition: str, n_samples: int, sample_rate: int, rng: np.random.Generator
    ) -> AudioClip:
        """Noise material covering ``n_samples``; raises CoverageError if short."""
        key = (noise_type, partition)
        if key in self._streams:
            stream = self._streams[key]
            if len(stream) < n_samples:
                raise CoverageError(
                    f"noise {noise_type!r} ({partition}): stream holds "
                    f"{len(stream) / stream.sample_rate:.1f} s, recording needs "
                    f"{n_samples / sample_rate:.1f} s"
                )
            return stream
        if noise_type == "white" and self._generate_white:
            return AudioClip(white_noise(n_samples, rng), sample_rate)
        raise CoverageError(f"no noise material for type {noise_type!r}, partition {partition!r}")


@dataclass(frozen=True)
class Utterance:
    clip: AudioClip
    utt_id: str
    speaker: str | None = None


@dataclass(frozen=True)
class SynthConfig:
    noise_types: tuple[str, ...] = ("white",)
    snrs: tuple[float, ...] = (5.0, 10.0, 15.0)
    target_duration_s: float = 120.0
    group_seconds: float = 60.0
    include_clean: bool = True
    pause: PauseModel = field(default_factory=PauseModel)
    sample_rate: int = 16000


def _pack_groups(utterances: list[Utterance], config: SynthConfig, rng) -> list[list[Utterance]]:
    """Greedily pack shuffled utterances into recording groups.

    Each group accumulates roughly ``group_seconds`` of speech; packing
    stops once ``target_duration_s`` of material is covered.
    """
    order = rng.permutation(len(utterances))
    groups: list[list[Utterance]] = [[]]
    group_speech = 0.0
    total_speech = 0.0
    for idx in order:
        if total_speech >= config.target_duration_s:
            break
        utt = utterances[idx]
        if group_speech >= config.group_seconds:
            groups.append([])
            group_speech = 0.0
        groups[-1].append(utt)
        group_speech += utt.clip.duration
        total_speech += utt.clip.duration
    if total_speech < config.target_duration_s:
        raise CoverageError(
            f"need {config.target_duration_s:.1f} s of speech material, "
            f"only {total_speech:.1f} s available"
        )
    return [g for g in groups if g]


def _variants(config: SynthConfig) -> list[tuple[str, float | None]]:
    out: list[tuple[str, float | None]] = [(CLEAN, None)] if config.include_clean else []
    out.extend((t, s) for t in config.noise_types for s in config.snrs)
    return out


def _recording_name(group_index: int, noise_type: str, snr_db: float | None) -> str:
    if snr_db is None:
        return f"rec_{group_index:03d}_{noise_type}"
    snr = int(snr_db) if float(snr_db).is_integer() else snr_db
    return f"rec_{group_index:03d}_{noise_type}_snr{snr}"


def synthesize_partition(
    utterances: list[Utterance],
    noise_bank: NoiseBank,
    config: SynthConfig,
    partition: str,
    out_dir: str | Path,
    seed: int,
) -> list[ManifestEntry]:
    """Build one partition's recordings: every group crossed with every
    (noise type, SNR) pair, plus a clean rendering.

    Writes WAVs and span sidecars under ``out_dir/<partition>/`` and returns
    the manifest entries (paths relative to ``out_dir``). Deterministic in
    (inputs, seed): each recording derives its own RNG stream.
    """
    if partition not in PARTITIONS:
        raise DataError(f"unknown partition {partition!r}")
    part_idx = _PART_INDEX[partition]
    out_dir = Path(out_dir)
    (out_dir / partition).mkdir(parents=True, exist_ok=True)

    pack_rng = np.random.default_rng([seed, part_idx, 0])
    groups = _pack_groups(utterances, config, pack_rng)

    entries: list[ManifestEntry] = []
    for gi, group in enumerate(groups):
        base_rng = np.random.default_rng([seed, part_idx, 1, gi])
        base = concatenate(
            [u.clip for u in group],
            config.pause,
            base_rng,
            source_ids=tuple(u.utt_id for u in group),
        )
        speakers = tuple(sorted({u.speaker for u in group if u.speaker is not None}))
        for ci, (ntype, snr) in enumerate(_variants(config)):
            if ntype == CLEAN:
                rec = base
            else:
                mix_rng = np.random.default_rng([seed, part_idx, 2, gi, ci])
                noise = noise_bank.noise_for(
                    ntype, partition, len(base.audio), config.sample_rate, mix_rng
                )
                mixed = mix_noise(base.audio, noise, snr, mix_rng)
                rec = LabeledRecording(mixed, base.spans, ntype, snr, base.source_ids)

            name = _recording_name(gi, ntype, snr)
            wav_rel = f"{partition}/{name}.wav"
            labels_rel = f"{partition}/{name}.labels.json"
            write_wav(rec.audio, out_dir / wav_rel)
            write_spans(rec.spans, out_dir / labels_rel)
            entries.append(
                ManifestEntry(
                    audio=wav_rel,
                    labels=labels_rel,
                    noise=ntype,
                    snr_db=snr,
                    partition=partition,
                    duration_s=rec.audio.duration,
                    speakers=speakers,
                )
            )
    return entries


def span_frame_labels(
    spans, n_frames: int, hop_s: float = 0.010, win_s: float = 0.025, sample_rate: int = 16000
) -> np.ndarray:
    """Frame labels from speech spans: +1 where at least half the analysis
    window overlaps speech, else -1."""
    hop = int(round(hop_s * sample_rate)) / sample_rate
    win = int(round(win_s * sample_rate)) / sample_rate
    starts = np.arange(n_frames) * hop
    ends = starts + win
    overlap = np.zeros(n_frames)
    for s in spans:
        overlap += np.clip(np.minimum(ends, s.end_s) - np.maximum(starts, s.start_s), 0.0, None)
    return np.where(overlap >= 0.5 * win, 1, -1).astype(np.int8)


def frame_labels(rec: LabeledRecording, hop_s: float = 0.010, win_s: float = 0.025) -> np.ndarray:
    """One {-1, +1} label per analysis frame, matching the feature frame count."""
    if hop_s <= 0 or win_s < hop_s:
        raise DataError(f"need hop > 0 and win >= hop, got hop={hop_s}, win={win_s}")
    cfg = MfbConfig(win_s=win_s, hop_s=hop_s)
    n = frame_count(len(rec.audio), cfg, rec.audio.sample_rate)
    return span_frame_labels(rec.spans, n, hop_s, win_s, rec.audio.sample_rate)
