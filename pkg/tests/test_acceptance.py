"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line and enforcing its runtime budget.

A1  SNR fidelity of the noise mixer (<= 0.1 dB over 100 random mixes)
A2  rank AUC == pairwise brute force, exactly, ties counted half
A3  BPTT gradients vs central finite differences (< 1e-4 relative)
A4  desk-scale end-to-end: synth -> extract -> train -> eval AUC bars
A5  buffer-sweep direction: full-buffer AUC beats 4% windows, monotone
A6  real-time: 15 s buffer poll under 1 s on a desk CPU
A7  byte-identical reruns of synth / train / eval at a fixed seed
A8  streaming decisions identical under 0.1 s vs 1.0 s push chunking

Run with ``pytest tests/test_acceptance.py -v -s``.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from vadforge.audio import AudioClip, rms
from vadforge.cli import main
from vadforge.demo import make_demo_utterances
from vadforge.gru import GruVadConfig, backward, forward, init_params, loss, zeros_like_params
from vadforge.metrics import auc
from vadforge.synth import white_noise

SR = 16000
SEED = 20240811


def report(criterion: str, ok: bool, detail: str, elapsed: float, budget: float):
    status = "PASS" if ok and elapsed < budget else "FAIL"
    print(f"\n{criterion} {status} ({elapsed:.1f}s / budget {budget:.0f}s): {detail}")
    assert ok, f"{criterion}: {detail}"
    assert elapsed < budget, f"{criterion}: runtime {elapsed:.1f}s exceeded {budget:.0f}s"


class DeskPipeline:
    """synth -> extract -> train once per session; later criteria reuse it."""

    def __init__(self, root: Path):
        self.root = root
        self.corpus = root / "corpus"
        self.features = root / "features"
        self.ckpt = root / "model" / "vad.vgp"
        self.results = root / "results"
        self.stage_s: dict[str, float] = {}

        utts = root / "utterances"
        make_demo_utterances(utts, n_clips=72, duration_range=(1.5, 3.0), n_speakers=6, seed=SEED)

        t0 = time.perf_counter()
        assert main([
            "synth", "--utterances", str(utts), "--noise-types", "white",
            "--snrs", "5,10,15", "--hours-per-part", str(25 / 3600),
            "--group-seconds", "60", "--seed", str(SEED), "--out", str(self.corpus),
        ]) == 0
        self.stage_s["synth"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        assert main([
            "extract", "--manifest", str(self.corpus / "manifest.jsonl"),
            "--out", str(self.features), "--fit-stats",
        ]) == 0
        self.stage_s["extract"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        assert main([
            "train", "--manifest", str(self.corpus / "manifest.jsonl"),
            "--features", str(self.features), "--norm", "global",
            "--layers", "1", "--hidden", "64", "--lr", "0.001", "--epochs", "20",
            "--seed", str(SEED), "--threads", "1", "--out", str(self.ckpt),
        ]) == 0
        self.stage_s["train"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        assert main([
            "eval", "--ckpt", str(self.ckpt),
            "--manifest", str(self.corpus / "manifest.jsonl"),
            "--features", str(self.features), "--norm", "global",
            "--partition", "test", "--out", str(self.results),
        ]) == 0
        self.stage_s["eval"] = time.perf_counter() - t0

    @property
    def total_s(self) -> float:
        return sum(self.stage_s.values())

    def condition_auc(self, noise, snr):
        rows = json.loads((self.results / "results.json").read_text())
        for row in rows:
            if row["noise"] == noise and (row["snr"] == snr or (snr is None and row["snr"] == "")):
                return row["auc"]
        raise KeyError((noise, snr))

    def test_wav(self, min_duration_s=15.0) -> Path:
        entries = [json.loads(l) for l in (self.corpus / "manifest.jsonl").read_text().splitlines()]
        for entry in entries:
            if entry["partition"] == "test" and entry["noise"] == "white" and entry["snr_db"] == 10.0:
                assert entry["duration_s"] >= min_duration_s
                return self.corpus / entry["audio"]
        raise FileNotFoundError("no test recording at white/10dB")


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return DeskPipeline(tmp_path_factory.mktemp("desk"))


def test_a1_snr_fidelity():
    began = time.perf_counter()
    rng = np.random.default_rng(1)
    from vadforge.demo import speech_clip
    from vadforge.synth import mix_noise

    worst = 0.0
    for trial in range(100):
        speech = speech_clip(rng.uniform(0.5, 1.5), rng)
        noise = AudioClip(white_noise(len(speech) + SR, rng), SR)
        snr = float(rng.choice([5.0, 10.0, 15.0]))
        mixed = mix_noise(speech, noise, snr, rng)
        addend = AudioClip(mixed.samples - speech.samples, SR)
        measured = 20 * np.log10(rms(speech) / rms(addend))
        worst = max(worst, abs(measured - snr))
    report("A1 SNR fidelity", worst < 0.1, f"worst |measured - requested| = {worst:.2e} dB",
           time.perf_counter() - began, 10.0)


def test_a2_auc_oracle_equivalence():
    began = time.perf_counter()
    rng = np.random.default_rng(2)

    def brute_force(scores, labels):
        pos = scores[labels == 1]
        neg = scores[labels == -1]
        wins = float((pos[:, None] > neg[None, :]).sum())
        ties = float((pos[:, None] == neg[None, :]).sum())
        return (wins + 0.5 * ties) / (len(pos) * len(neg))

    fixture = auc(np.array([0.8, 0.35, 0.4, 0.1]), np.array([1, 1, -1, -1])).auc
    exact = fixture == 0.75
    checked = 0
    for trial in range(200):
        n = int(rng.integers(2, 1001))
        labels = rng.choice([-1, 1], size=n)
        if len(np.unique(labels)) < 2:
            labels[: n // 2 + 1] = 1
            labels[n // 2 + 1 :] = -1
        if trial % 2:
            scores = np.round(rng.normal(size=n), 1)  # heavy ties
        else:
            scores = rng.normal(size=n)
        exact = exact and auc(scores, labels).auc == brute_force(scores, labels)
        checked += 1
    report("A2 AUC oracle equivalence", exact,
           f"{checked} random instances + fixture agree exactly",
           time.perf_counter() - began, 5.0)


def test_a3_gradient_correctness():
    began = time.perf_counter()
    rng = np.random.default_rng(3)
    worst_rel = 0.0
    instances = 0
    eps = 1e-5
    for trial in range(100):
        dim = int(rng.integers(1, 6))
        hidden = int(rng.integers(1, 9))
        frames = int(rng.integers(1, 11))
        cfg = GruVadConfig(input_dim=dim, hidden=hidden)
        params = init_params(cfg, np.random.default_rng(int(rng.integers(1 << 30))))
        x = rng.normal(size=(frames, dim))
        y = rng.choice([-1.0, 1.0], size=frames)
        grads = backward(params, x, y)

        numeric = zeros_like_params(params)
        for (_, w), (_, g) in zip(params.named_arrays(), numeric.named_arrays()):
            it = np.nditer(w, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = w[idx]
                w[idx] = orig + eps
                up = loss(forward(params, x)[0], y)
                w[idx] = orig - eps
                down = loss(forward(params, x)[0], y)
                w[idx] = orig
                g[idx] = (up - down) / (2 * eps)
        for (_, a), (_, n) in zip(grads.named_arrays(), numeric.named_arrays()):
            scale = np.maximum(np.abs(a), np.abs(n))
            big = scale > 1e-7
            if np.any(big):
                worst_rel = max(worst_rel, float((np.abs(a - n)[big] / scale[big]).max()))
            assert np.all(np.abs(a - n)[~big] < 1e-8)
        instances += 1
    report("A3 gradient correctness", worst_rel < 1e-4,
           f"{instances} instances, worst relative error {worst_rel:.2e}",
           time.perf_counter() - began, 60.0)


def test_a4_desk_scale_end_to_end(desk):
    clean = desk.condition_auc("clean", None)
    snr5 = desk.condition_auc("white", 5.0)
    ok = clean >= 0.90 and snr5 >= 0.80
    report("A4 desk-scale end-to-end", ok,
           f"test AUC clean={clean:.4f} (>=0.90), white@5dB={snr5:.4f} (>=0.80); "
           f"stages {({k: round(v, 1) for k, v in desk.stage_s.items()})}",
           desk.total_s, 900.0)


def test_a5_buffer_sweep_direction(desk):
    began = time.perf_counter()
    out = desk.root / "sweep"
    assert main([
        "sweep", "--ckpt", str(desk.ckpt),
        "--manifest", str(desk.corpus / "manifest.jsonl"),
        "--features", str(desk.features), "--partition", "test",
        "--fractions", "0.04,0.08,0.16,0.32,0.64,1.0", "--out", str(out),
    ]) == 0
    rows = json.loads((out / "results.json").read_text())
    by_fraction = {row["fraction"]: row["auc"] for row in rows}
    fractions = sorted(by_fraction)
    gap = by_fraction[1.0] - by_fraction[0.04]
    violations = [
        round(by_fraction[a] - by_fraction[b], 4)
        for a, b in zip(fractions, fractions[1:])
        if by_fraction[b] < by_fraction[a]
    ]
    ok = gap >= 0.02 and len(violations) <= 1 and all(v <= 0.01 for v in violations)
    report("A5 buffer-sweep direction", ok,
           f"AUC(1.0)-AUC(0.04) = {gap:.4f} (>=0.02); grid "
           f"{[round(by_fraction[f], 4) for f in fractions]}; decreases {violations}",
           time.perf_counter() - began, 300.0)


def test_a6_real_time_poll(desk):
    began = time.perf_counter()
    wav = desk.test_wav()
    report_path = desk.root / "stream_report.json"
    code = main([
        "stream", "--stage1", str(desk.ckpt), "--stage2", str(desk.ckpt),
        "--stage2-features", "mfb", "--stats", str(desk.features / "mfb" / "stats.vns"),
        "--buffer", "15", "--poll", "1",
        "--wav", str(wav), "--report", str(report_path),
    ])
    obj = json.loads(report_path.read_text())
    ok = code == 0 and obj["max_poll_s"] < 1.0
    report("A6 real-time poll", ok,
           f"max poll {obj['max_poll_s'] * 1e3:.1f} ms over a 15 s buffer (< 1000 ms), exit {code}",
           time.perf_counter() - began, 60.0)


def test_a7_determinism(desk):
    began = time.perf_counter()
    utts = desk.root / "utterances"

    corpus_b = desk.root / "corpus_rerun"
    assert main([
        "synth", "--utterances", str(utts), "--noise-types", "white",
        "--snrs", "5,10,15", "--hours-per-part", str(25 / 3600),
        "--group-seconds", "60", "--seed", str(SEED), "--out", str(corpus_b),
    ]) == 0
    synth_same = True
    for path in sorted(desk.corpus.rglob("*")):
        if not path.is_file() or path.name == "run_meta.json":
            continue
        twin = corpus_b / path.relative_to(desk.corpus)
        synth_same = synth_same and twin.exists() and twin.read_bytes() == path.read_bytes()

    ckpt_b = desk.root / "model_rerun" / "vad.vgp"
    assert main([
        "train", "--manifest", str(desk.corpus / "manifest.jsonl"),
        "--features", str(desk.features), "--norm", "global",
        "--layers", "1", "--hidden", "64", "--lr", "0.001", "--epochs", "20",
        "--seed", str(SEED), "--threads", "1", "--out", str(ckpt_b),
    ]) == 0
    train_same = ckpt_b.read_bytes() == desk.ckpt.read_bytes()

    results_b = desk.root / "results_rerun"
    assert main([
        "eval", "--ckpt", str(desk.ckpt),
        "--manifest", str(desk.corpus / "manifest.jsonl"),
        "--features", str(desk.features), "--norm", "global",
        "--partition", "test", "--out", str(results_b),
    ]) == 0
    eval_same = (
        (results_b / "results.csv").read_bytes() == (desk.results / "results.csv").read_bytes()
        and (results_b / "results.json").read_bytes() == (desk.results / "results.json").read_bytes()
    )

    report("A7 determinism", synth_same and train_same and eval_same,
           f"byte-identical reruns: synth={synth_same}, train={train_same}, eval={eval_same}",
           time.perf_counter() - began, 900.0)


def test_a8_streaming_equivalence(desk):
    began = time.perf_counter()
    wav = desk.test_wav()
    segments = {}
    for chunk in ("0.1", "1.0"):
        report_path = desk.root / f"stream_{chunk}.json"
        code = main([
            "stream", "--stage1", str(desk.ckpt), "--stage2", str(desk.ckpt),
            "--stage2-features", "mfb", "--stats", str(desk.features / "mfb" / "stats.vns"),
            "--buffer", "15", "--poll", "1",
            "--chunk-seconds", chunk, "--wav", str(wav), "--report", str(report_path),
        ])
        assert code in (0, 3)  # timing may vary; decisions must not
        segments[chunk] = json.loads(report_path.read_text())["segments"]
    ok = segments["0.1"] == segments["1.0"] and len(segments["1.0"]) >= 1
    report("A8 streaming equivalence", ok,
           f"{len(segments['1.0'])} segments identical under 0.1 s vs 1.0 s chunking",
           time.perf_counter() - began, 60.0)
