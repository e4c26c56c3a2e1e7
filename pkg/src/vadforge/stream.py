"""Two-stage streaming VAD over a bounded audio buffer.

A ring buffer keeps the most recent audio; each poll scores the whole
buffer with a cheap log-Mel stage-1 model, segments the scores with
hysteresis, and hands candidate segments to a more accurate stage-2
scorer for confirmation. Segment decisions depend only on the audio,
parameters, and configuration, never on wall-clock timing.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioClip, read_wav, resample
from .errors import ConfigError, DataError
from .features import (
    FeatureMatrix,
    MfbConfig,
    NormStats,
    extract_mfb,
    normalize_global,
    normalize_instance,
)
from .gru import GruVadParams, forward
from .store import load_features

VERDICT_CANDIDATE = "candidate"
VERDICT_CONFIRMED = "confirmed"
VERDICT_REJECTED = "rejected"


@dataclass(frozen=True)
class BufferConfig:
    buffer_seconds: float = 15.0
    poll_interval: float = 1.0
    sample_rate: int = 16000

    def __post_init__(self):
        if self.buffer_seconds <= 0 or self.poll_interval <= 0:
            raise ConfigError("buffer_seconds and poll_interval must be positive")


@dataclass(frozen=True)
class CascadeConfig:
    onset_threshold: float = 0.0
    offset_threshold: float = -0.2
    min_segment_s: float = 0.3
    hangover_s: float = 0.2
    stage2_confirm_threshold: float = 0.0

    def __post_init__(self):
        if not (self.offset_threshold <= self.onset_threshold):
            raise ConfigError("offset_threshold must not exceed onset_threshold (hysteresis)")
        if self.min_segment_s < 0 or self.hangover_s < 0:
            raise ConfigError("min_segment_s and hangover_s must be >= 0")


@dataclass
class SegmentHypothesis:
    start_s: float
    end_s: float
    stage1_score: float
    stage2_score: float | None = None
    verdict: str = VERDICT_CANDIDATE

    def __post_init__(self):
        if self.start_s >= self.end_s:
            raise DataError(f"segment start {self.start_s} must precede end {self.end_s}")
        if self.verdict in (VERDICT_CONFIRMED, VERDICT_REJECTED) and self.stage2_score is None:
            raise DataError("confirmed/rejected segments need a stage-2 score")


class _RingBuffer:
    """Fixed-capacity sample store; keeps the newest ``capacity`` samples."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._buf = np.zeros(capacity)
        self._written = 0  # absolute sample count ever pushed

    @property
    def total_written(self) -> int:
        return self._written

    def push(self, chunk: np.ndarray) -> None:
        chunk = np.asarray(chunk, dtype=np.float64).ravel()
        if chunk.size >= self.capacity:
            # only the tail survives; keep the invariant that absolute
            # sample i lives at slot i % capacity
            tail = chunk[-self.capacity :]
            pos = (self._written + chunk.size - self.capacity) % self.capacity
            first = self.capacity - pos
            self._buf[pos:] = tail[:first]
            self._buf[:pos] = tail[first:]
        elif chunk.size:
            pos = self._written % self.capacity
            first = min(chunk.size, self.capacity - pos)
            self._buf[pos : pos + first] = chunk[:first]
            if first < chunk.size:
                self._buf[: chunk.size - first] = chunk[first:]
        self._written += chunk.size

    def snapshot(self) -> tuple[np.ndarray, int]:
        """(ordered copy of current contents, absolute index of its first sample)."""
        n = min(self._written, self.capacity)
        start = self._written - n
        if n == 0:
            return np.zeros(0), start
        pos = self._written % self.capacity
        if self._written <= self.capacity:
            return self._buf[:n].copy(), start
        return np.concatenate((self._buf[pos:], self._buf[:pos])), start


def hysteresis_segments(
    scores: np.ndarray, hop_s: float, config: CascadeConfig
) -> list[tuple[int, int, float]]:
    """Frame scores to (start_frame, end_frame_exclusive, mean_score) segments.

    Enter speech when the score reaches the onset threshold; leave once it
    has stayed below the offset threshold for the hangover duration. Segments
    shorter than ``min_segment_s`` are discarded.
    """
    hang_frames = max(1, int(round(config.hangover_s / hop_s))) if config.hangover_s > 0 else 1
    segments = []
    in_speech = False
    seg_start = 0
    below = 0
    for i, sc in enumerate(np.asarray(scores, dtype=np.float64)):
        if not in_speech:
            if sc >= config.onset_threshold:
                in_speech = True
                seg_start = i
                below = 0
        else:
            if sc < config.offset_threshold:
                below += 1
                if below >= hang_frames:
                    segments.append((seg_start, i - below + 1))
                    in_speech = False
            else:
                below = 0
    if in_speech:
        segments.append((seg_start, len(scores)))

    out = []
    for s, e in segments:
        if (e - s) * hop_s >= config.min_segment_s and e > s:
            out.append((s, e, float(np.mean(scores[s:e]))))
    return out


class MfbStage2Provider:
    """Stage-2 features computed in-process from the segment audio.

    With training stats the segment is normalized the way the stage-2 model
    was trained; without them it falls back to per-instance normalization,
    which is weak on short homogeneous segments.
    """

    def __init__(self, config: MfbConfig = MfbConfig(), instance_norm: bool = True,
                 stats: NormStats | None = None):
        self.config = config
        self.instance_norm = instance_norm
        self.stats = stats

    def frames_for(self, segment: AudioClip, start_s: float, end_s: float) -> FeatureMatrix:
        feats = extract_mfb(segment, self.config)
        if self.stats is not None:
            return normalize_global(feats, self.stats)
        return normalize_instance(feats) if self.instance_norm else feats


class VfeStage2Provider:
    """Stage-2 features sliced from a precomputed feature file by time.

    Used when the accurate representation (e.g. a self-supervised model's
    embeddings) is produced offline for the whole stream.
    """

    def __init__(self, vfe_path: str | Path, normalize: bool = False):
        self._feats = load_features(vfe_path)
        self._normalize = normalize

    def frames_for(self, segment: AudioClip, start_s: float, end_s: float) -> FeatureMatrix:
        hop = self._feats.hop_s
        # relative slack absorbs the float32 hop stored in the file header
        lo = max(0, int(np.floor(start_s / hop * (1.0 + 1e-6) + 1e-9)))
        hi = min(self._feats.n_frames, max(lo + 1, int(np.ceil(end_s / hop * (1.0 - 1e-6) - 1e-9))))
        piece = FeatureMatrix(self._feats.values[lo:hi], hop, self._feats.source)
        return normalize_instance(piece) if self._normalize else piece


@dataclass
class LatencyReport:
    max_poll_s: float = 0.0
    mean_poll_s: float = 0.0
    rtf: float = 0.0
    segments: list = field(default_factory=list)
    violation: bool = False
    n_polls: int = 0

    def to_dict(self) -> dict:
        return {
            "max_poll_s": self.max_poll_s,
            "mean_poll_s": self.mean_poll_s,
            "rtf": self.rtf,
            "segments": [
                {
                    "start_s": s.start_s,
                    "end_s": s.end_s,
                    "stage1": s.stage1_score,
                    "stage2": s.stage2_score,
                }
                for s in self.segments
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


class StreamingRuntime:
    """Push audio in, poll segment hypotheses out.

    Stage 1 scores the whole buffer on instance-normalized log-Mel features;
    stage 2 re-scores candidate segments with the provider's features. A
    segment becomes final (emitted exactly once) when its end is about to
    age out of the buffer; until then it may grow across polls.
    """

    def __init__(
        self,
        stage1_params: GruVadParams,
        stage2_params: GruVadParams,
        stage2_provider,
        buffer_config: BufferConfig = BufferConfig(),
        cascade_config: CascadeConfig = CascadeConfig(),
        mfb_config: MfbConfig = MfbConfig(),
    ):
        if stage2_provider is None:
            raise ConfigError("a stage-2 feature provider is required at startup")
        self.stage1_params = stage1_params
        self.stage2_params = stage2_params
        self.stage2_provider = stage2_provider
        self.buffer_config = buffer_config
        self.cascade_config = cascade_config
        self.mfb_config = mfb_config
        self._sr = buffer_config.sample_rate
        self._ring = _RingBuffer(int(round(buffer_config.buffer_seconds * self._sr)))
        self._finals: list[SegmentHypothesis] = []
        self._active: list[SegmentHypothesis] = []
        self.candidates_seen = 0
        self.stage2_invocations = 0

    @property
    def total_pushed_samples(self) -> int:
        return self._ring.total_written

    def push_audio(self, chunk) -> None:
        """Append samples at the configured rate; old audio falls off the back."""
        self._ring.push(np.asarray(chunk, dtype=np.float64))

    def _score_stage2(self, buf: np.ndarray, t0: float, start_s: float, end_s: float) -> float:
        lo = max(0, int(round((start_s - t0) * self._sr)))
        hi = min(buf.size, int(round((end_s - t0) * self._sr)))
        segment = AudioClip(buf[lo:hi], self._sr)
        feats = self.stage2_provider.frames_for(segment, start_s, end_s)
        self.stage2_invocations += 1
        if feats.n_frames == 0:
            return -1.0
        scores, _ = forward(self.stage2_params, feats)
        return float(np.mean(scores))

    def poll(self) -> list[SegmentHypothesis]:
        """Score the current buffer and return the live segment hypotheses."""
        buf, start_sample = self._ring.snapshot()
        t0 = start_sample / self._sr
        newest = self._ring.total_written / self._sr
        hop = self.mfb_config.hop_s

        hypotheses: list[SegmentHypothesis] = []
        if buf.size >= self.mfb_config.win_samples(self._sr):
            feats = normalize_instance(extract_mfb(AudioClip(buf, self._sr), self.mfb_config))
            scores, _ = forward(self.stage1_params, feats)
            for s_idx, e_idx, mean1 in hysteresis_segments(scores, hop, self.cascade_config):
                start_s = t0 + s_idx * hop
                end_s = t0 + e_idx * hop
                self.candidates_seen += 1
                mean2 = self._score_stage2(buf, t0, start_s, end_s)
                verdict = (
                    VERDICT_CONFIRMED
                    if mean2 >= self.cascade_config.stage2_confirm_threshold
                    else VERDICT_REJECTED
                )
                hypotheses.append(SegmentHypothesis(start_s, end_s, mean1, mean2, verdict))

        # drop or trim anything overlapping an already-final segment
        live: list[SegmentHypothesis] = []
        for h in hypotheses:
            start = h.start_s
            for f in self._finals:
                if start < f.end_s and h.end_s > f.start_s:
                    start = max(start, f.end_s)
            if h.end_s - start >= max(self.cascade_config.min_segment_s, hop):
                if start != h.start_s:
                    h = SegmentHypothesis(start, h.end_s, h.stage1_score, h.stage2_score, h.verdict)
                live.append(h)

        # merge into the ledger: a segment keeps its earliest observed start
        # even after that audio has slid out of the buffer, and its end grows
        # while new polls keep seeing it
        matched = set()
        for h in live:
            merged = False
            for i, entry in enumerate(self._active):
                if h.start_s < entry.end_s and h.end_s > entry.start_s:
                    self._active[i] = SegmentHypothesis(
                        min(entry.start_s, h.start_s),
                        max(entry.end_s, h.end_s),
                        h.stage1_score,
                        h.stage2_score,
                        h.verdict,
                    )
                    matched.add(i)
                    merged = True
                    break
            if not merged:
                self._active.append(h)
                matched.add(len(self._active) - 1)

        # entries the detector no longer sees are dropped only while their
        # audio is still fully observable; partially expired ones are kept
        kept = []
        for i, entry in enumerate(self._active):
            if i in matched or entry.start_s < t0:
                kept.append(entry)
        self._active = sorted(kept, key=lambda h: h.start_s)

        # a segment is final once its end is too old to change before expiry
        final_before = newest - (self.buffer_config.buffer_seconds - self.buffer_config.poll_interval)
        still_active = []
        for entry in self._active:
            if entry.end_s <= final_before:
                self._append_final(entry)
            else:
                still_active.append(entry)
        self._active = still_active
        return live

    def _append_final(self, entry: SegmentHypothesis) -> None:
        """Freeze a segment, trimming against the previous final to stay disjoint."""
        start = entry.start_s
        for f in self._finals:
            if start < f.end_s and entry.end_s > f.start_s:
                start = max(start, f.end_s)
        if entry.end_s > start:
            if start != entry.start_s:
                entry = SegmentHypothesis(
                    start, entry.end_s, entry.stage1_score, entry.stage2_score, entry.verdict
                )
            self._finals.append(entry)

    def drain(self) -> None:
        """Finalize everything still open (end of stream)."""
        for entry in self._active:
            self._append_final(entry)
        self._active = []

    def confirmed_segments(self) -> list[SegmentHypothesis]:
        return sorted(
            (h for h in self._finals if h.verdict == VERDICT_CONFIRMED),
            key=lambda h: h.start_s,
        )


def run_file_realtime(
    runtime: StreamingRuntime,
    wav_path: str | Path,
    report_path: str | Path | None = None,
    chunk_seconds: float | None = None,
) -> LatencyReport:
    """Replay a WAV file through push/poll at the configured poll cadence.

    Polls are triggered by the audio clock (every ``poll_interval`` seconds
    of pushed audio), so segment decisions do not depend on the push chunk
    size. Wall time of each poll is recorded; pushes are excluded.
    """
    clip = read_wav(wav_path)
    if clip.sample_rate != runtime.buffer_config.sample_rate:
        clip = resample(clip, runtime.buffer_config.sample_rate)
    sr = runtime.buffer_config.sample_rate
    chunk = max(1, int(round((chunk_seconds or runtime.buffer_config.poll_interval) * sr)))
    poll_samples = max(1, int(round(runtime.buffer_config.poll_interval * sr)))

    latencies = []
    next_poll = poll_samples
    pos = 0
    x = clip.samples
    while pos < x.size:
        # pushes split at poll marks so every poll sees the same audio
        # position no matter how the input was chunked
        end = min(pos + chunk, x.size, next_poll)
        runtime.push_audio(x[pos:end])
        pos = end
        if pos == next_poll:
            began = time.perf_counter()
            runtime.poll()
            latencies.append(time.perf_counter() - began)
            next_poll += poll_samples
    if x.size and x.size % poll_samples:
        began = time.perf_counter()
        runtime.poll()
        latencies.append(time.perf_counter() - began)
    runtime.drain()

    report = LatencyReport(
        max_poll_s=max(latencies) if latencies else 0.0,
        mean_poll_s=float(np.mean(latencies)) if latencies else 0.0,
        rtf=(sum(latencies) / clip.duration) if clip.duration > 0 else 0.0,
        segments=runtime.confirmed_segments(),
        violation=bool(latencies and max(latencies) >= runtime.buffer_config.poll_interval),
        n_polls=len(latencies),
    )
    if report_path is not None:
        report.save(report_path)
    return report
