"""ROC/AUC computation, per-condition evaluation tables, and the
buffer-size sweep.

AUC is computed from the rank statistic (ties count half), which matches
the all-pairs definition exactly; ROC operating points are kept alongside
for plotting. Frames are pooled across recordings within a condition.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ManifestError
from .features import (
    FeatureMatrix,
    MfbConfig,
    NormStats,
    frame_count,
    normalize_global,
    normalize_instance,
)
from .gru import GruVadParams, forward
from .store import align_labels, feature_path, load_features
from .synth import ManifestEntry, read_spans, span_frame_labels

DEFAULT_FRACTIONS = (0.04, 0.08, 0.16, 0.32, 0.64, 1.0)

_MFB_GRID = MfbConfig()


@dataclass(frozen=True, eq=False)
class RocResult:
    thresholds: np.ndarray  # descending
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float
    n_pos: int
    n_neg: int


@dataclass
class ConditionTable:
    """AUC per (noise type, SNR) condition plus the macro average."""

    rows: dict = field(default_factory=dict)  # (noise, snr_db or None) -> auc
    macro_auc: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "conditions": [
                {"noise": noise, "snr_db": snr, "auc": auc_value}
                for (noise, snr), auc_value in sorted(
                    self.rows.items(), key=lambda kv: (kv[0][0], kv[0][1] if kv[0][1] is not None else -1)
                )
            ],
            "macro_auc": self.macro_auc,
        }


@dataclass
class SweepResult:
    fractions: list
    aucs: list
    realized_s: list  # mean window length in seconds per fraction

    def to_dict(self) -> dict:
        return {
            "fractions": list(self.fractions),
            "aucs": list(self.aucs),
            "realized_s": list(self.realized_s),
        }


def auc(scores, labels) -> RocResult:
    """Ranking quality of scores against {-1, +1} labels.

    ``auc`` equals the fraction of (positive, negative) pairs ranked
    correctly, with ties counted half, computed exactly via tie-grouped
    counting rather than pair enumeration.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DataError(f"scores and labels lengths differ: {scores.size} vs {labels.size}")
    if not np.all(np.isin(labels, (-1, 1))):
        raise DataError("labels must be -1 or +1")
    pos_mask = labels == 1
    n_pos = int(pos_mask.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError(f"need both classes for a ROC, got {n_pos} positives / {n_neg} negatives")

    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    y_sorted = pos_mask[order]
    _, group_starts = np.unique(s_sorted, return_index=True)
    pos_counts = np.add.reduceat(y_sorted.astype(np.int64), group_starts)
    neg_counts = np.add.reduceat((~y_sorted).astype(np.int64), group_starts)
    neg_below = np.concatenate(([0], np.cumsum(neg_counts)[:-1]))
    wins = int(np.sum(pos_counts * neg_below))
    ties = int(np.sum(pos_counts * neg_counts))
    auc_value = (wins + 0.5 * ties) / (n_pos * n_neg)

    # ROC points at each distinct threshold, descending, origin prepended
    thr = s_sorted[group_starts][::-1]
    tp = np.cumsum(pos_counts[::-1])
    fp = np.cumsum(neg_counts[::-1])
    return RocResult(
        thresholds=np.concatenate(([np.inf], thr)),
        tpr=np.concatenate(([0.0], tp / n_pos)),
        fpr=np.concatenate(([0.0], fp / n_neg)),
        auc=float(auc_value),
        n_pos=n_pos,
        n_neg=n_neg,
    )


def labels_for_features(
    entry: ManifestEntry, manifest_dir: Path, feats: FeatureMatrix, sample_rate: int = 16000
) -> np.ndarray:
    """Frame labels matching a feature matrix, via the span sidecar.

    Labels are defined on the 25 ms / 10 ms analysis grid; externally
    produced features at a different hop get nearest-neighbor alignment.
    """
    spans = read_spans(manifest_dir / entry.labels)
    if feats.source == "MFB":
        return span_frame_labels(spans, feats.n_frames, _MFB_GRID.hop_s, _MFB_GRID.win_s, sample_rate)
    n_samples = int(round(entry.duration_s * sample_rate))
    n_mfb = frame_count(n_samples, _MFB_GRID, sample_rate)
    base = span_frame_labels(spans, n_mfb, _MFB_GRID.hop_s, _MFB_GRID.win_s, sample_rate)
    if base.size == 0:
        return np.full(feats.n_frames, -1, dtype=np.int8)
    return align_labels(base, _MFB_GRID.hop_s, feats.hop_s, feats.n_frames)


def load_item(entry, manifest_dir, features_root, representation, sample_rate=16000):
    fpath = feature_path(features_root, representation, entry.audio)
    if not fpath.exists():
        raise ManifestError(f"manifest entry {entry.audio!r}: missing feature file {fpath}")
    feats = load_features(fpath)
    labels = labels_for_features(entry, manifest_dir, feats, sample_rate)
    return feats, labels


def _normalized(feats: FeatureMatrix, normalization: str, stats: NormStats | None) -> FeatureMatrix:
    if normalization == "global":
        if stats is None:
            raise ConfigError("global normalization requested but no stats provided")
        return normalize_global(feats, stats)
    if normalization == "instance":
        return normalize_instance(feats)
    if normalization == "none":
        return feats
    raise ConfigError(f"unknown normalization mode {normalization!r}")


def evaluate(
    params: GruVadParams,
    entries,
    manifest_dir: str | Path,
    features_root: str | Path,
    representation: str,
    normalization: str = "global",
    stats: NormStats | None = None,
    sample_rate: int = 16000,
) -> ConditionTable:
    """Score every entry and compute pooled AUC per (noise, SNR) condition."""
    manifest_dir = Path(manifest_dir)
    pools: dict = {}
    for entry in entries:
        feats, labels = load_item(entry, manifest_dir, features_root, representation, sample_rate)
        scores, _ = forward(params, _normalized(feats, normalization, stats))
        key = (entry.noise, entry.snr_db)
        pools.setdefault(key, ([], []))
        pools[key][0].append(scores)
        pools[key][1].append(labels)

    table = ConditionTable()
    for key, (score_list, label_list) in pools.items():
        table.rows[key] = auc(np.concatenate(score_list), np.concatenate(label_list)).auc
    if table.rows:
        table.macro_auc = float(np.mean(list(table.rows.values())))
    return table


def _window_scores(params, feats: FeatureMatrix, window_frames: int) -> np.ndarray:
    """Consecutive windows, instance-normalized independently, GRU reset each."""
    chunks = []
    for start in range(0, feats.n_frames, window_frames):
        piece = FeatureMatrix(
            feats.values[start : start + window_frames], feats.hop_s, feats.source
        )
        scores, _ = forward(params, normalize_instance(piece))
        chunks.append(scores)
    return np.concatenate(chunks)


def buffer_sweep(
    params: GruVadParams,
    entries,
    manifest_dir: str | Path,
    features_root: str | Path,
    representation: str,
    fractions=DEFAULT_FRACTIONS,
    sample_rate: int = 16000,
) -> SweepResult:
    """AUC as a function of how much of each recording the model sees at once.

    Each recording is cut into consecutive windows of (fraction x duration);
    per-instance normalization and the GRU state are confined to the window.
    Frames are pooled over all recordings and conditions per fraction.
    """
    fractions = sorted(set(float(f) for f in fractions))
    if not fractions or any(not (0.0 < f <= 1.0) for f in fractions):
        raise ConfigError(f"fractions must lie in (0, 1], got {fractions}")
    if 1.0 not in fractions:
        raise ConfigError("the fraction grid must include 1.0 (the full-buffer reference)")

    manifest_dir = Path(manifest_dir)
    items = [
        load_item(entry, manifest_dir, features_root, representation, sample_rate)
        for entry in entries
    ]
    if not items:
        raise DataError("no entries to sweep")

    aucs = []
    realized = []
    for fraction in fractions:
        pooled_scores = []
        pooled_labels = []
        window_s = []
        for feats, labels in items:
            window_frames = int(fraction * feats.n_frames)
            if window_frames == 0:
                raise DataError(
                    f"fraction {fraction} leaves zero frames on a "
                    f"{feats.n_frames}-frame recording"
                )
            pooled_scores.append(_window_scores(params, feats, window_frames))
            pooled_labels.append(labels)
            window_s.append(window_frames * feats.hop_s)
        aucs.append(auc(np.concatenate(pooled_scores), np.concatenate(pooled_labels)).auc)
        realized.append(float(np.mean(window_s)))
    return SweepResult(fractions=list(fractions), aucs=aucs, realized_s=realized)


def write_results(rows, csv_path: str | Path, json_path: str | Path | None = None) -> None:
    """Emit result rows as CSV (and a JSON mirror when asked).

    Row keys: representation, noise, snr, fraction, auc.
    """
    rows = list(rows)
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["representation", "noise", "snr", "fraction", "auc"])
        writer.writeheader()
        writer.writerows(rows)
    if json_path is not None:
        Path(json_path).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")


def condition_rows(representation: str, table: ConditionTable) -> list[dict]:
    rows = [
        {
            "representation": representation,
            "noise": noise,
            "snr": "" if snr is None else snr,
            "fraction": 1.0,
            "auc": auc_value,
        }
        for (noise, snr), auc_value in sorted(
            table.rows.items(), key=lambda kv: (kv[0][0], kv[0][1] if kv[0][1] is not None else -1)
        )
    ]
    rows.append(
        {"representation": representation, "noise": "macro", "snr": "", "fraction": 1.0, "auc": table.macro_auc}
    )
    return rows


def sweep_rows(representation: str, sweep: SweepResult) -> list[dict]:
    return [
        {"representation": representation, "noise": "pooled", "snr": "", "fraction": f, "auc": a}
        for f, a in zip(sweep.fractions, sweep.aucs)
    ]
