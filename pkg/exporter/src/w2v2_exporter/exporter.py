"""Run a pretrained wav2vec2-style encoder over manifest audio and write the
frame embeddings as VFE1 feature files.

The output directory is a representation root: one ``.vfe`` per manifest
entry, mirroring the manifest's audio layout, so the files drop straight into
the VAD toolkit's feature store. The declared hop in every header is computed
from the loaded model's convolutional stride, never hard-coded.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import struct
import sys
import tempfile
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger("w2v2_exporter")

TARGET_RATE = 16000

# VFE1 wire format: magic, u32 frames, u32 dims, f32 hop seconds, u8 source
# tag (1 = externally produced), then float32 LE row-major payload.
_VFE_HEADER = struct.Struct("<4sIIfB")
_VFE_MAGIC = b"VFE1"
_SOURCE_EXTERNAL = 1


@dataclass
class ExportJob:
    model: str  # hub id or local checkpoint directory
    manifest: Path
    out_dir: Path
    layer: int = -1  # -1 = final hidden states
    device: str = "cpu"


@dataclass
class ExportSummary:
    files_written: int = 0
    total_frames: int = 0
    dims: int = 0
    hop_s: float = 0.0
    failures: list = field(default_factory=list)


def read_wav_mono(path: Path) -> tuple[np.ndarray, int]:
    """PCM WAV to mono float32 in [-1, 1]."""
    with wave.open(str(path), "rb") as w:
        n_channels = w.getnchannels()
        width = w.getsampwidth()
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    if width == 2:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    elif width == 1:
        x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float32) - 128.0) / 128.0
    elif width == 4:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float32) / float(1 << 31)
    else:
        raise ValueError(f"{path}: unsupported sample width {width}")
    if n_channels > 1:
        x = x.reshape(-1, n_channels).mean(axis=1)
    return x, rate


def to_16k(x: np.ndarray, rate: int) -> np.ndarray:
    if rate == TARGET_RATE:
        return x
    from scipy.signal import resample_poly

    g = math.gcd(rate, TARGET_RATE)
    return resample_poly(x, TARGET_RATE // g, rate // g).astype(np.float32)


def write_vfe(values: np.ndarray, hop_s: float, path: Path) -> None:
    """Atomic VFE1 write (temp file + rename)."""
    values = np.ascontiguousarray(values, dtype="<f4")
    header = _VFE_HEADER.pack(_VFE_MAGIC, values.shape[0], values.shape[1], hop_s, _SOURCE_EXTERNAL)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header + values.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(name_or_path: str, device: str = "cpu"):
    """Model plus its waveform preprocessor, when the checkpoint ships one."""
    from transformers import AutoFeatureExtractor, AutoModel

    model = AutoModel.from_pretrained(name_or_path).to(device).eval()
    try:
        extractor = AutoFeatureExtractor.from_pretrained(name_or_path)
    except Exception:
        extractor = None  # bare checkpoint: feed the raw waveform
    return model, extractor


def model_stride_samples(model) -> int:
    """Total downsampling of the convolutional front end, in samples."""
    return int(np.prod(model.config.conv_stride))


def embed(model, extractor, samples: np.ndarray, layer: int, device: str) -> np.ndarray:
    if extractor is not None:
        inputs = extractor(samples, sampling_rate=TARGET_RATE, return_tensors="pt")
        waveform = inputs["input_values"].to(device)
    else:
        waveform = torch.from_numpy(samples).to(device).unsqueeze(0)
    with torch.no_grad():
        if layer == -1:
            hidden = model(waveform).last_hidden_state
        else:
            out = model(waveform, output_hidden_states=True)
            hidden = out.hidden_states[layer]
    return hidden.squeeze(0).cpu().numpy()


def export(job: ExportJob) -> ExportSummary:
    """One VFE1 file per manifest entry; failures are logged per entry."""
    torch.use_deterministic_algorithms(True)
    model, extractor = load_model(job.model, job.device)
    stride = model_stride_samples(model)
    hop_s = stride / TARGET_RATE
    hidden_size = int(model.config.hidden_size)

    summary = ExportSummary(hop_s=hop_s, dims=hidden_size)
    lines = [l for l in Path(job.manifest).read_text().splitlines() if l.strip()]
    manifest_dir = Path(job.manifest).parent
    for line in lines:
        entry = json.loads(line)
        rel = Path(entry["audio"])
        try:
            samples, rate = read_wav_mono(manifest_dir / rel)
            samples = to_16k(samples, rate)
            hidden = embed(model, extractor, samples, job.layer, job.device)
            if hidden.shape[1] != hidden_size:
                raise ValueError(
                    f"model reported hidden size {hidden_size} but emitted {hidden.shape[1]}"
                )
            out_path = job.out_dir / rel.with_suffix(".vfe")
            write_vfe(hidden, hop_s, out_path)
            summary.files_written += 1
            summary.total_frames += hidden.shape[0]
        except Exception as e:
            log.error("export failed for %s: %s", rel, e)
            summary.failures.append({"audio": str(rel), "error": str(e)})
    return summary


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="w2v2-export",
        description="Export wav2vec2 frame embeddings as VFE1 feature files.",
    )
    parser.add_argument("--model", required=True, help="hub id or local checkpoint directory")
    parser.add_argument("--manifest", required=True, help="manifest.jsonl of recordings")
    parser.add_argument("--out", required=True, help="representation root for the .vfe files")
    parser.add_argument("--layer", type=int, default=-1,
                        help="hidden-state layer to export (-1 = final)")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    try:
        summary = export(
            ExportJob(args.model, Path(args.manifest), Path(args.out), args.layer, args.device)
        )
    except Exception as e:
        print(f"w2v2-export: {e}", file=sys.stderr)
        return 2
    print(
        f"wrote {summary.files_written} files, {summary.total_frames} frames x "
        f"{summary.dims} dims at {summary.hop_s * 1e3:.0f} ms hop"
    )
    if summary.failures:
        print(f"{len(summary.failures)} entries failed", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
