"""Command-line entry point: synth, extract, train, eval, sweep, stream, validate.

Exit codes: 0 success, 1 usage/configuration error, 2 data or format error,
3 divergence or real-time violation. Values come from (in order of
precedence) command-line flags, the TOML config file, and built-in defaults.
Every run that produces artifacts also writes a metadata JSON echoing its
effective configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .audio import CANONICAL_RATE, read_wav, resample
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    FormatError,
    ManifestError,
    VadforgeError,
)
from .features import MfbConfig, extract_mfb, fit_stats, normalize_global, normalize_instance
from .gru import GruVadConfig, load_params, save_params, train
from .metrics import (
    DEFAULT_FRACTIONS,
    buffer_sweep,
    condition_rows,
    evaluate,
    load_item,
    sweep_rows,
    write_results,
)
from .store import feature_path, load_features, load_stats, save_features, save_stats
from .stream import (
    BufferConfig,
    CascadeConfig,
    MfbStage2Provider,
    StreamingRuntime,
    VfeStage2Provider,
    run_file_realtime,
)
from .synth import (
    NOISE_TYPES,
    PARTITIONS,
    NoiseBank,
    PauseModel,
    SynthConfig,
    Utterance,
    read_manifest,
    read_spans,
    synthesize_partition,
    write_manifest,
)

log = logging.getLogger("vadforge")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _strings(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        import tomllib
    except ModuleNotFoundError:  # Python 3.10
        import tomli as tomllib
    with open(path, "rb") as f:
        return tomllib.load(f)


class _Settings:
    """Flag > config-file section > default."""

    def __init__(self, args: argparse.Namespace, section: dict):
        self._args = vars(args)
        self._section = section

    def get(self, name: str, default=None):
        value = self._args.get(name)
        if value is not None:
            return value
        if name in self._section:
            return self._section[name]
        return default

    def require(self, name: str):
        value = self.get(name)
        if value is None:
            flag = "--" + name.replace("_", "-")
            raise ConfigError(f"{flag} is required (flag or config file)")
        return value


def _write_meta(out: Path, subcommand: str, settings: dict, wall_s: float) -> None:
    meta = {
        "subcommand": subcommand,
        "settings": {k: (list(v) if isinstance(v, tuple) else v) for k, v in settings.items()},
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "vadforge": __version__,
        },
        "wall_s": wall_s,
    }
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")


def _load_utterances(root: Path, sample_rate: int) -> list[Utterance]:
    """WAVs under per-speaker subdirectories, or a flat directory (no speakers)."""
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    utts = []
    if subdirs:
        for d in subdirs:
            for wav in sorted(d.glob("*.wav")):
                clip = resample(read_wav(wav), sample_rate)
                utts.append(Utterance(clip, f"{d.name}/{wav.stem}", speaker=d.name))
    else:
        for wav in sorted(root.glob("*.wav")):
            utts.append(Utterance(resample(read_wav(wav), sample_rate), wav.stem))
    if not utts:
        raise DataError(f"no .wav utterances found under {root}")
    return utts


def _split_partitions(
    utts: list[Utterance], target_s: float, rng: np.random.Generator
) -> dict[str, list[Utterance]]:
    """Assign utterances to partitions, keeping speakers disjoint when known."""
    split: dict[str, list[Utterance]] = {p: [] for p in PARTITIONS}
    deficits = {p: target_s for p in PARTITIONS}

    speakers = sorted({u.speaker for u in utts if u.speaker is not None})
    if speakers:
        by_speaker = {s: [u for u in utts if u.speaker == s] for s in speakers}
        units = [by_speaker[s] for s in rng.permutation(speakers)]
    else:
        units = [[utts[i]] for i in rng.permutation(len(utts))]

    for unit in units:
        part = max(PARTITIONS, key=lambda p: deficits[p])
        split[part].extend(unit)
        deficits[part] -= sum(u.clip.duration for u in unit)
    return split


def cmd_synth(args: argparse.Namespace, config: dict) -> int:
    started = time.perf_counter()
    s = _Settings(args, config.get("synth", {}))
    out_dir = Path(s.get("out", "corpus"))
    seed = int(s.get("seed", 0))
    noise_types = tuple(s.get("noise_types", ("white",)))
    snrs = tuple(float(v) for v in s.get("snrs", (5.0, 10.0, 15.0)))
    hours = float(s.get("hours_per_part", 0.05))
    group_seconds = float(s.get("group_seconds", 60.0))
    sample_rate = int(s.get("sample_rate", CANONICAL_RATE))
    noise_split = tuple(float(v) for v in s.get("noise_split", (0.6, 0.2, 0.2)))

    utts = _load_utterances(Path(s.require("utterances")), sample_rate)
    bank = NoiseBank.from_dir(s.get("noise_bank"), noise_types, sample_rate, split=noise_split)
    synth_config = SynthConfig(
        noise_types=noise_types,
        snrs=snrs,
        target_duration_s=hours * 3600.0,
        group_seconds=group_seconds,
        include_clean=not bool(s.get("no_clean", False)),
        pause=PauseModel(
            mu=float(s.get("pause_mu", 2.22)),
            sigma=float(s.get("pause_sigma", 1.83)),
        ),
        sample_rate=sample_rate,
    )

    split = _split_partitions(utts, synth_config.target_duration_s, np.random.default_rng([seed, 99]))
    entries = []
    for partition in PARTITIONS:
        entries.extend(
            synthesize_partition(split[partition], bank, synth_config, partition, out_dir, seed)
        )
    write_manifest(entries, out_dir / "manifest.jsonl")
    _write_meta(
        out_dir / "run_meta.json",
        "synth",
        {"seed": seed, "noise_types": noise_types, "snrs": snrs, "hours_per_part": hours,
         "group_seconds": group_seconds, "out": str(out_dir)},
        time.perf_counter() - started,
    )
    print(f"wrote {len(entries)} recordings to {out_dir}")
    return EXIT_OK


def cmd_extract(args: argparse.Namespace, config: dict) -> int:
    started = time.perf_counter()
    s = _Settings(args, config.get("extract", {}))
    manifest_path = Path(s.require("manifest"))
    features_root = Path(s.get("out", manifest_path.parent / "features"))
    rep = s.get("rep", "mfb")
    mfb = MfbConfig(
        n_mels=int(s.get("n_mels", 80)),
        win_s=float(s.get("win", 0.025)),
        hop_s=float(s.get("hop", 0.010)),
        fft_size=int(s.get("fft", 512)),
    )
    entries = read_manifest(manifest_path)
    manifest_dir = manifest_path.parent
    for entry in entries:
        clip = read_wav(manifest_dir / entry.audio)
        save_features(extract_mfb(clip, mfb), feature_path(features_root, rep, entry.audio))
    if bool(s.get("fit_stats", False)):
        train_entries = [e for e in entries if e.partition == "train"]
        if not train_entries:
            raise DataError("cannot fit stats: manifest has no train entries")
        stats = fit_stats(
            load_features(feature_path(features_root, rep, e.audio)) for e in train_entries
        )
        save_stats(stats, features_root / rep / "stats.vns")
    _write_meta(
        features_root / rep / "run_meta.json",
        "extract",
        {"manifest": str(manifest_path), "rep": rep, "n_mels": mfb.n_mels,
         "win": mfb.win_s, "hop": mfb.hop_s, "fft": mfb.fft_size},
        time.perf_counter() - started,
    )
    print(f"extracted {len(entries)} feature files under {features_root / rep}")
    return EXIT_OK


def _assemble_items(entries, manifest_dir, features_root, rep, norm, stats):
    items = []
    for entry in entries:
        feats, labels = load_item(entry, manifest_dir, features_root, rep)
        if norm == "global":
            feats = normalize_global(feats, stats)
        elif norm == "instance":
            feats = normalize_instance(feats)
        items.append((feats.values, labels))
    return items


def cmd_train(args: argparse.Namespace, config: dict) -> int:
    started = time.perf_counter()
    s = _Settings(args, config.get("train", {}))
    manifest_path = Path(s.require("manifest"))
    features_root = Path(s.require("features"))
    rep = s.get("rep", "mfb")
    norm = s.get("norm", "global")
    ckpt_path = Path(s.get("out", "vad.vgp"))
    entries = read_manifest(manifest_path)
    manifest_dir = manifest_path.parent

    stats = None
    if norm == "global":
        stats_path = Path(s.get("stats", features_root / rep / "stats.vns"))
        stats = load_stats(stats_path)

    train_items = _assemble_items(
        [e for e in entries if e.partition == "train"], manifest_dir, features_root, rep, norm, stats
    )
    dev_items = _assemble_items(
        [e for e in entries if e.partition == "dev"], manifest_dir, features_root, rep, norm, stats
    )
    if not train_items or not dev_items:
        raise DataError("manifest must provide both train and dev entries")

    gru_config = GruVadConfig(
        input_dim=train_items[0][0].shape[1],
        layers=int(s.get("layers", 1)),
        hidden=int(s.get("hidden", 64)),
        learning_rate=float(s.get("lr", 0.001)),
        batch=int(s.get("batch", 1)),
        bptt_chunk=int(s.get("chunk", 500)),
        epochs=int(s.get("epochs", 20)),
        seed=int(s.get("seed", 0)),
        loss_kind=s.get("loss", "mse"),
    )
    params, report = train(gru_config, train_items, dev_items)
    save_params(params, ckpt_path)
    report_path = Path(s.get("report", str(ckpt_path) + ".report.json"))
    report_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    _write_meta(
        Path(str(ckpt_path) + ".meta.json"),
        "train",
        {"manifest": str(manifest_path), "rep": rep, "norm": norm, "seed": gru_config.seed,
         "layers": gru_config.layers, "hidden": gru_config.hidden, "lr": gru_config.learning_rate,
         "epochs": gru_config.epochs, "loss": gru_config.loss_kind},
        time.perf_counter() - started,
    )
    best = report.epochs[report.best_epoch] if report.epochs else None
    if best:
        print(f"best epoch {best.epoch}: dev AUC {best.dev_auc:.4f} -> {ckpt_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, config: dict) -> int:
    started = time.perf_counter()
    s = _Settings(args, config.get("eval", {}))
    manifest_path = Path(s.require("manifest"))
    features_root = Path(s.require("features"))
    rep = s.get("rep", "mfb")
    norm = s.get("norm", "global")
    partition = s.get("partition", "test")
    out_dir = Path(s.get("out", "results"))
    params = load_params(Path(s.require("ckpt")))
    entries = [e for e in read_manifest(manifest_path) if e.partition == partition]
    if not entries:
        raise DataError(f"no entries in partition {partition!r}")

    stats = None
    if norm == "global":
        stats = load_stats(Path(s.get("stats", features_root / rep / "stats.vns")))
    table = evaluate(params, entries, manifest_path.parent, features_root, rep, norm, stats)
    rows = condition_rows(rep, table)
    write_results(rows, out_dir / "results.csv", out_dir / "results.json")
    _write_meta(
        out_dir / "run_meta.json",
        "eval",
        {"manifest": str(manifest_path), "rep": rep, "norm": norm, "partition": partition},
        time.perf_counter() - started,
    )
    for row in rows:
        snr = f" snr={row['snr']}" if row["snr"] != "" else ""
        print(f"{row['noise']}{snr}: auc={row['auc']:.4f}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, config: dict) -> int:
    started = time.perf_counter()
    s = _Settings(args, config.get("sweep", {}))
    manifest_path = Path(s.require("manifest"))
    features_root = Path(s.require("features"))
    rep = s.get("rep", "mfb")
    partition = s.get("partition", "test")
    fractions = tuple(float(v) for v in s.get("fractions", DEFAULT_FRACTIONS))
    out_dir = Path(s.get("out", "results"))
    params = load_params(Path(s.require("ckpt")))
    entries = [e for e in read_manifest(manifest_path) if e.partition == partition]
    if not entries:
        raise DataError(f"no entries in partition {partition!r}")

    sweep = buffer_sweep(params, entries, manifest_path.parent, features_root, rep, fractions)
    rows = sweep_rows(rep, sweep)
    write_results(rows, out_dir / "results.csv", out_dir / "results.json")
    _write_meta(
        out_dir / "run_meta.json",
        "sweep",
        {"manifest": str(manifest_path), "rep": rep, "partition": partition, "fractions": fractions},
        time.perf_counter() - started,
    )
    for f, a, r in zip(sweep.fractions, sweep.aucs, sweep.realized_s):
        print(f"fraction {f:4.2f} (~{r:5.1f} s): auc={a:.4f}")
    return EXIT_OK


def cmd_stream(args: argparse.Namespace, config: dict) -> int:
    started = time.perf_counter()
    s = _Settings(args, config.get("stream", {}))
    wav_path = Path(s.require("wav"))
    stage1 = load_params(Path(s.require("stage1")))
    stage2 = load_params(Path(s.get("stage2", s.get("stage1"))))
    stage2_features = s.get("stage2_features", "mfb")
    if stage2_features == "mfb":
        stats_path = s.get("stats")
        stats = load_stats(Path(stats_path)) if stats_path else None
        provider = MfbStage2Provider(stats=stats)
    else:
        vfe = Path(stage2_features) / (wav_path.stem + ".vfe")
        if not vfe.exists():
            raise ConfigError(f"no stage-2 feature file at {vfe}")
        provider = VfeStage2Provider(vfe)

    runtime = StreamingRuntime(
        stage1,
        stage2,
        provider,
        BufferConfig(
            buffer_seconds=float(s.get("buffer", 15.0)),
            poll_interval=float(s.get("poll", 1.0)),
        ),
        CascadeConfig(
            onset_threshold=float(s.get("onset", 0.0)),
            offset_threshold=float(s.get("offset", -0.2)),
            min_segment_s=float(s.get("min_segment", 0.3)),
            hangover_s=float(s.get("hangover", 0.2)),
            stage2_confirm_threshold=float(s.get("confirm", 0.0)),
        ),
    )
    report_path = Path(s.get("report", "stream_report.json"))
    chunk_seconds = s.get("chunk_seconds")
    report = run_file_realtime(
        runtime, wav_path, report_path, float(chunk_seconds) if chunk_seconds else None
    )
    _write_meta(
        Path(str(report_path) + ".meta.json"),
        "stream",
        {"wav": str(wav_path), "buffer": runtime.buffer_config.buffer_seconds,
         "poll": runtime.buffer_config.poll_interval, "stage2_features": str(stage2_features)},
        time.perf_counter() - started,
    )
    print(
        f"{len(report.segments)} confirmed segments; max poll {report.max_poll_s * 1e3:.1f} ms "
        f"over {report.n_polls} polls (rtf {report.rtf:.3f})"
    )
    if report.violation:
        print("real-time violation: a poll exceeded the poll interval", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_validate(args: argparse.Namespace, config: dict) -> int:
    manifest_path = Path(args.manifest)
    entries = read_manifest(manifest_path)
    manifest_dir = manifest_path.parent
    speakers_by_part: dict[str, set] = {}
    for i, entry in enumerate(entries):
        where = f"entry {i} ({entry.audio})"
        if entry.partition not in PARTITIONS:
            raise ManifestError(f"{where}: bad partition {entry.partition!r}")
        if entry.noise != "clean" and entry.noise not in NOISE_TYPES:
            raise ManifestError(f"{where}: bad noise type {entry.noise!r}")
        if (entry.snr_db is None) != (entry.noise == "clean"):
            raise ManifestError(f"{where}: snr_db must be null exactly for clean recordings")
        if entry.duration_s <= 0:
            raise ManifestError(f"{where}: non-positive duration")
        if not (manifest_dir / entry.audio).exists():
            raise ManifestError(f"{where}: missing audio file {entry.audio}")
        if not (manifest_dir / entry.labels).exists():
            raise ManifestError(f"{where}: missing label file {entry.labels}")
        spans = read_spans(manifest_dir / entry.labels)
        last_end = 0.0
        for sp in spans:
            if sp.start_s < last_end:
                raise ManifestError(f"{where}: spans out of order or overlapping")
            last_end = sp.end_s
        if spans and spans[-1].end_s > entry.duration_s + 1e-3:
            raise ManifestError(f"{where}: span ends after the recording")
        speakers_by_part.setdefault(entry.partition, set()).update(entry.speakers)
    parts = sorted(speakers_by_part)
    for i, a in enumerate(parts):
        for b in parts[i + 1 :]:
            shared = speakers_by_part[a] & speakers_by_part[b]
            if shared:
                raise ManifestError(f"speakers {sorted(shared)} appear in both {a!r} and {b!r}")
    print(f"manifest OK ({len(entries)} entries)")
    return EXIT_OK


def _build_parser() -> _Parser:
    parser = _Parser(prog="vadforge", description=__doc__)
    parser.add_argument("--config", help="TOML config file; flags override its values")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="synthesize a labeled noisy corpus")
    p.add_argument("--utterances", help="directory of utterance WAVs (per-speaker subdirs optional)")
    p.add_argument("--noise-bank", dest="noise_bank", help="directory with one subdir per noise type")
    p.add_argument("--noise-types", dest="noise_types", type=_strings, help="comma list, e.g. white,music")
    p.add_argument("--snrs", type=_floats, help="comma list of SNR dB values")
    p.add_argument("--hours-per-part", dest="hours_per_part", type=float)
    p.add_argument("--group-seconds", dest="group_seconds", type=float)
    p.add_argument("--noise-split", dest="noise_split", type=_floats)
    p.add_argument("--no-clean", dest="no_clean", action="store_const", const=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="compute log-Mel features for a manifest")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--rep")
    p.add_argument("--n-mels", dest="n_mels", type=int)
    p.add_argument("--win", type=float)
    p.add_argument("--hop", type=float)
    p.add_argument("--fft", type=int)
    p.add_argument("--fit-stats", dest="fit_stats", action="store_const", const=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the recurrent VAD")
    p.add_argument("--manifest")
    p.add_argument("--features")
    p.add_argument("--rep")
    p.add_argument("--norm", choices=("global", "instance", "none"))
    p.add_argument("--stats")
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--chunk", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--loss", choices=("mse", "bce"))
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="1 guarantees bit-determinism")
    p.add_argument("--out")
    p.add_argument("--report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-condition AUC table")
    p.add_argument("--ckpt")
    p.add_argument("--manifest")
    p.add_argument("--features")
    p.add_argument("--rep")
    p.add_argument("--norm", choices=("global", "instance", "none"))
    p.add_argument("--stats")
    p.add_argument("--partition", choices=PARTITIONS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="AUC vs. buffer-fraction sweep")
    p.add_argument("--ckpt")
    p.add_argument("--manifest")
    p.add_argument("--features")
    p.add_argument("--rep")
    p.add_argument("--partition", choices=PARTITIONS)
    p.add_argument("--fractions", type=_floats)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stream", help="two-stage streaming cascade over a WAV file")
    p.add_argument("--stage1")
    p.add_argument("--stage2")
    p.add_argument("--stage2-features", dest="stage2_features", help="'mfb' or a directory of .vfe files")
    p.add_argument("--stats", help="train stats for the MFB stage-2 provider")
    p.add_argument("--buffer", type=float)
    p.add_argument("--poll", type=float)
    p.add_argument("--wav")
    p.add_argument("--report")
    p.add_argument("--chunk-seconds", dest="chunk_seconds", type=float)
    p.add_argument("--onset", type=float)
    p.add_argument("--offset", type=float)
    p.add_argument("--min-segment", dest="min_segment", type=float)
    p.add_argument("--hangover", type=float)
    p.add_argument("--confirm", type=float)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("validate", help="check a manifest and its sidecars")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except ConfigError as e:
        print(f"vadforge: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"vadforge: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FormatError, DataError, OSError) as e:
        print(f"vadforge: {e}", file=sys.stderr)
        return EXIT_DATA
    except VadforgeError as e:
        print(f"vadforge: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
