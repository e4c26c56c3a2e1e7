"""Binary persistence for features and normalization stats, plus label alignment.

Feature files ("VFE1") carry a fixed little-endian header followed by the
float32 row-major payload, so matrices round-trip bit-exactly and externally
produced representations can be dropped in alongside locally extracted ones.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .features import FeatureMatrix, NormStats, _TAG_SOURCES

FEATURE_MAGIC = b"VFE1"
STATS_MAGIC = b"VNS1"

_FEATURE_HEADER = struct.Struct("<4sIIfB")
_STATS_HEADER = struct.Struct("<4sI")


def _write_atomic(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_features(features: FeatureMatrix, path: str | Path) -> None:
    """Write a feature matrix as a VFE1 file (atomic: temp file + rename)."""
    header = _FEATURE_HEADER.pack(
        FEATURE_MAGIC,
        features.n_frames,
        features.dims,
        features.hop_s,
        features.source_tag,
    )
    payload = np.ascontiguousarray(features.values, dtype="<f4").tobytes()
    _write_atomic(Path(path), header + payload)


def load_features(path: str | Path) -> FeatureMatrix:
    """Read a VFE1 file; raises FormatError with a byte offset on corruption."""
    blob = Path(path).read_bytes()
    if len(blob) < _FEATURE_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes, need {_FEATURE_HEADER.size})")
    magic, n_frames, dims, hop_s, tag = _FEATURE_HEADER.unpack_from(blob, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    if hop_s <= 0:
        raise FormatError(f"{path}: non-positive hop at byte 12")
    if tag not in _TAG_SOURCES:
        raise FormatError(f"{path}: unknown source tag {tag} at byte 16")
    expected = n_frames * dims * 4
    actual = len(blob) - _FEATURE_HEADER.size
    if actual != expected:
        raise FormatError(
            f"{path}: payload is {actual} bytes from byte {_FEATURE_HEADER.size}, "
            f"header implies {expected}"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(n_frames, dims)
    return FeatureMatrix(values, float(hop_s), _TAG_SOURCES[tag])


def save_stats(stats: NormStats, path: str | Path) -> None:
    """Write normalization stats as a VNS1 file."""
    payload = (
        _STATS_HEADER.pack(STATS_MAGIC, stats.dims)
        + np.ascontiguousarray(stats.mean, dtype="<f4").tobytes()
        + np.ascontiguousarray(stats.std, dtype="<f4").tobytes()
    )
    _write_atomic(Path(path), payload)


def load_stats(path: str | Path) -> NormStats:
    blob = Path(path).read_bytes()
    if len(blob) < _STATS_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, dims = _STATS_HEADER.unpack_from(blob, 0)
    if magic != STATS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    expected = 2 * dims * 4
    actual = len(blob) - _STATS_HEADER.size
    if actual != expected:
        raise FormatError(
            f"{path}: payload is {actual} bytes from byte {_STATS_HEADER.size}, "
            f"header implies {expected}"
        )
    arr = np.frombuffer(blob, dtype="<f4", offset=_STATS_HEADER.size)
    return NormStats(arr[:dims], arr[dims:], 0)


def align_labels(labels, source_hop: float, target_hop: float, target_frames: int) -> np.ndarray:
    """Resample frame labels to a new hop by nearest-neighbor in time.

    ``out[i] = labels[round(i * target_hop / source_hop)]`` with the index
    clamped into range, so the output always has exactly ``target_frames``
    entries and keeps the {-1, +1} alphabet.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("cannot align an empty label sequence")
    if source_hop <= 0 or target_hop <= 0:
        raise DataError("hops must be positive")
    if target_frames < 0:
        raise DataError("target_frames must be >= 0")
    idx = np.floor(np.arange(target_frames) * (target_hop / source_hop) + 0.5).astype(np.int64)
    return labels[np.clip(idx, 0, labels.size - 1)]


def feature_path(features_root: str | Path, representation: str, audio_relpath: str | Path) -> Path:
    """Feature file location mirroring the manifest's audio layout."""
    rel = Path(audio_relpath)
    return Path(features_root) / representation / rel.with_suffix(".vfe")
