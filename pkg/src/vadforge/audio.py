"""Audio container, WAV file I/O, resampling, and level utilities.

Everything downstream works on mono float signals at one canonical rate
(16 kHz); the ingest helpers here get arbitrary WAV material into that shape.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import DataError, FormatError, UnsupportedFormatError

log = logging.getLogger(__name__)

CANONICAL_RATE = 16000

_WAVE_PCM = 0x0001
_WAVE_IEEE_FLOAT = 0x0003
_WAVE_EXTENSIBLE = 0xFFFE

# Resampler design: windowed-sinc low-pass, Kaiser window.
_KAISER_BETA = 8.6
_TAPS_PER_PHASE = 64


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Mono audio: float64 samples plus a sample rate in Hz.

    Samples read from WAV files land in [-1, +1]. Intermediate products of
    mixing may exceed that range; they are only clipped at WAV export.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DataError(f"clip samples must be 1-D, got shape {samples.shape}")
        if samples.size and not np.all(np.isfinite(samples)):
            raise DataError("clip contains non-finite samples")
        rate = int(self.sample_rate)
        if rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", rate)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        """Length in seconds."""
        return self.samples.size / self.sample_rate


def _decode_pcm(raw: bytes, bits: int, n_channels: int) -> np.ndarray:
    if bits == 8:
        data = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
        data = (data - 128.0) / 128.0
    elif bits == 16:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif bits == 24:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3)
        vals = (
            b[:, 0].astype(np.int32)
            | (b[:, 1].astype(np.int32) << 8)
            | (b[:, 2].astype(np.int32) << 16)
        )
        vals = np.where(vals >= 1 << 23, vals - (1 << 24), vals)
        data = vals.astype(np.float64) / float(1 << 23)
    elif bits == 32:
        data = np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)
    else:
        raise UnsupportedFormatError(f"unsupported PCM bit depth: {bits}")
    return data.reshape(-1, n_channels)


def _decode_float(raw: bytes, bits: int, n_channels: int) -> np.ndarray:
    if bits == 32:
        data = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    elif bits == 64:
        data = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    else:
        raise UnsupportedFormatError(f"unsupported float bit depth: {bits}")
    return data.reshape(-1, n_channels)


def read_wav(path: str | Path) -> AudioClip:
    """Read a RIFF/WAVE file into a mono clip.

    Accepts PCM 8/16/24/32-bit and IEEE float 32/64-bit data, mono or
    multichannel; multichannel input is downmixed by channel averaging.
    Integer PCM is scaled into [-1, +1].
    """
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[0:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        cid = blob[pos : pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body = blob[pos + 8 : pos + 8 + size]
        if len(body) < size and cid in (b"fmt ", b"data"):
            raise FormatError(f"{path}: truncated '{cid.decode(errors='replace')}' chunk")
        if cid == b"fmt ":
            if size < 16:
                raise FormatError(f"{path}: fmt chunk too short ({size} bytes)")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _WAVE_EXTENSIBLE:
                if size < 40:
                    raise FormatError(f"{path}: extensible fmt chunk too short")
                (sub,) = struct.unpack_from("<H", body, 24)
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)

    if fmt is None:
        raise FormatError(f"{path}: missing fmt chunk")
    if data is None:
        raise FormatError(f"{path}: missing data chunk")

    code, n_channels, rate, _byte_rate, _block_align, bits = fmt
    if n_channels < 1:
        raise FormatError(f"{path}: invalid channel count {n_channels}")
    bytes_per_frame = n_channels * (bits // 8)
    if bytes_per_frame == 0 or len(data) % bytes_per_frame:
        data = data[: len(data) - len(data) % max(bytes_per_frame, 1)]

    if code == _WAVE_PCM:
        frames = _decode_pcm(data, bits, n_channels)
    elif code == _WAVE_IEEE_FLOAT:
        frames = _decode_float(data, bits, n_channels)
    else:
        raise UnsupportedFormatError(f"{path}: unsupported WAV format code 0x{code:04X}")

    mono = frames.mean(axis=1) if n_channels > 1 else frames[:, 0]
    return AudioClip(mono, rate)


def write_wav(clip: AudioClip, path: str | Path) -> None:
    """Write a clip as 16-bit PCM little-endian mono WAV.

    Out-of-range samples are hard-clipped at export; a warning reports how
    many were affected so level problems upstream stay visible.
    """
    x = clip.samples
    n_clipped = int(np.count_nonzero((x < -1.0) | (x > 1.0)))
    if n_clipped:
        log.warning("write_wav: hard-clipped %d/%d samples at %s", n_clipped, x.size, path)
    q = np.clip(np.rint(np.clip(x, -1.0, 1.0) * 32768.0), -32768, 32767).astype("<i2")
    payload = q.tobytes()

    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, _WAVE_PCM, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16
    )
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)


@lru_cache(maxsize=32)
def _resample_filter(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc low-pass for a polyphase up/down converter.

    Odd length (linear phase), 64 taps per polyphase branch, unity DC gain.
    """
    n_taps = _TAPS_PER_PHASE * up + 1
    cutoff = min(1.0 / up, 1.0 / down)
    n = np.arange(n_taps) - (n_taps - 1) / 2
    h = cutoff * np.sinc(cutoff * n) * np.kaiser(n_taps, _KAISER_BETA)
    return h / h.sum()


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Resample to ``target_rate`` Hz; identity when the rate already matches."""
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise DataError(f"target rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return clip
    if len(clip) == 0:
        return AudioClip(np.zeros(0), target_rate)
    g = math.gcd(clip.sample_rate, target_rate)
    up, down = target_rate // g, clip.sample_rate // g
    y = resample_poly(clip.samples, up, down, window=_resample_filter(up, down))
    return AudioClip(y, target_rate)


def rms(clip: AudioClip) -> float:
    """Root-mean-square level of the clip."""
    if len(clip) == 0:
        raise DataError("cannot take RMS of an empty clip")
    return float(np.sqrt(np.mean(np.square(clip.samples))))
