"""Recurrent VAD model: stacked GRU, linear head, tanh output in [-1, +1].

Forward inference, exact backpropagation through time over chunks, and a
deterministic Adam training loop, all in double-precision numpy. Checkpoints
are stored as float32 in a small versioned binary format ("VGP1").
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DivergenceError, FormatError, ShapeError
from .features import FeatureMatrix

PARAMS_MAGIC = b"VGP1"
PARAMS_VERSION = 1

_LAYER_FIELDS = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class GruVadConfig:
    input_dim: int
    layers: int = 1
    hidden: int = 64
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 1
    bptt_chunk: int = 500
    epochs: int = 20
    seed: int = 0
    loss_kind: str = "mse"  # alternative: "bce" on (score + 1) / 2

    def __post_init__(self):
        if self.input_dim < 1 or self.layers < 1 or self.hidden < 1:
            raise DataError("input_dim, layers, hidden must all be >= 1")
        if self.batch < 1 or self.bptt_chunk < 1 or self.epochs < 0:
            raise DataError("batch, bptt_chunk must be >= 1 and epochs >= 0")
        if self.loss_kind not in ("mse", "bce"):
            raise DataError(f"unknown loss kind {self.loss_kind!r}")


@dataclass(eq=False)
class GruLayerParams:
    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray


@dataclass(eq=False)
class GruVadParams:
    """All trainable weights; shapes carry the topology."""

    layers: list[GruLayerParams]
    w_out: np.ndarray  # (hidden,)
    b_out: np.ndarray  # (1,)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].W_z.shape[1]

    @property
    def hidden(self) -> int:
        return self.layers[0].W_z.shape[0]

    def named_arrays(self):
        for i, layer in enumerate(self.layers):
            for name in _LAYER_FIELDS:
                yield f"l{i}.{name}", getattr(layer, name)
        yield "w_out", self.w_out
        yield "b_out", self.b_out

    def copy(self) -> "GruVadParams":
        return GruVadParams(
            [GruLayerParams(**{n: getattr(l, n).copy() for n in _LAYER_FIELDS}) for l in self.layers],
            self.w_out.copy(),
            self.b_out.copy(),
        )


def init_params(config: GruVadConfig, rng: np.random.Generator) -> GruVadParams:
    """Uniform(-1/sqrt(hidden), +1/sqrt(hidden)) weights, zero biases."""
    h = config.hidden
    bound = 1.0 / np.sqrt(h)
    layers = []
    for i in range(config.layers):
        d = config.input_dim if i == 0 else h
        layers.append(
            GruLayerParams(
                W_z=rng.uniform(-bound, bound, (h, d)),
                W_r=rng.uniform(-bound, bound, (h, d)),
                W_h=rng.uniform(-bound, bound, (h, d)),
                U_z=rng.uniform(-bound, bound, (h, h)),
                U_r=rng.uniform(-bound, bound, (h, h)),
                U_h=rng.uniform(-bound, bound, (h, h)),
                b_z=np.zeros(h),
                b_r=np.zeros(h),
                b_h=np.zeros(h),
            )
        )
    return GruVadParams(layers, rng.uniform(-bound, bound, h), np.zeros(1))


def zeros_like_params(params: GruVadParams) -> GruVadParams:
    return GruVadParams(
        [
            GruLayerParams(**{n: np.zeros_like(getattr(l, n)) for n in _LAYER_FIELDS})
            for l in params.layers
        ],
        np.zeros_like(params.w_out),
        np.zeros_like(params.b_out),
    )


def _as_values(features) -> np.ndarray:
    if isinstance(features, FeatureMatrix):
        return features.values.astype(np.float64, copy=False)
    return np.asarray(features, dtype=np.float64)


def _check_dims(params: GruVadParams, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"features have shape {x.shape}, model expects (*, {params.input_dim})")


def _init_state(params: GruVadParams, h0) -> np.ndarray:
    if h0 is None:
        return np.zeros((params.n_layers, params.hidden))
    h0 = np.asarray(h0, dtype=np.float64)
    if h0.shape != (params.n_layers, params.hidden):
        raise ShapeError(f"h0 has shape {h0.shape}, expected {(params.n_layers, params.hidden)}")
    return h0.copy()


def _forward_cached(params: GruVadParams, x: np.ndarray, h0: np.ndarray):
    """Run the recurrence keeping every per-step activation for backprop."""
    T = x.shape[0]
    L, H = params.n_layers, params.hidden
    cache = []
    inp = x
    h_final = np.empty((L, H))
    for li, p in enumerate(params.layers):
        # input-side affine terms for the whole sequence at once
        az_in = inp @ p.W_z.T + p.b_z
        ar_in = inp @ p.W_r.T + p.b_r
        ah_in = inp @ p.W_h.T + p.b_h
        Z = np.empty((T, H))
        R = np.empty((T, H))
        C = np.empty((T, H))
        Hs = np.empty((T, H))
        Hprev = np.empty((T, H))
        h = h0[li]
        for t in range(T):
            Hprev[t] = h
            z = _sigmoid(az_in[t] + p.U_z @ h)
            r = _sigmoid(ar_in[t] + p.U_r @ h)
            c = np.tanh(ah_in[t] + p.U_h @ (r * h))
            h = (1.0 - z) * c + z * h
            Z[t], R[t], C[t], Hs[t] = z, r, c, h
        cache.append({"X": inp, "Z": Z, "R": R, "C": C, "H": Hs, "Hprev": Hprev})
        h_final[li] = h
        inp = Hs
    top = cache[-1]["H"] if L else x
    scores = np.tanh(top @ params.w_out + params.b_out[0]) if T else np.zeros(0)
    return scores, h_final, cache


def forward(params: GruVadParams, features, h0=None):
    """Score every frame in [-1, +1]; returns (scores, final hidden state).

    Gate convention: z is the "keep" gate, h' = (1 - z) * candidate + z * h.
    """
    x = _as_values(features)
    _check_dims(params, x)
    state = _init_state(params, h0)
    if x.shape[0] == 0:
        return np.zeros(0), state
    scores, h_final, _ = _forward_cached(params, x, state)
    return scores, h_final


def loss(scores, labels, kind: str = "mse") -> float:
    """Mean frame loss against {-1, +1} targets."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores shape {scores.shape} != labels shape {labels.shape}")
    if scores.size == 0:
        raise DataError("loss over zero frames is undefined")
    if kind == "mse":
        return float(np.mean((scores - labels) ** 2))
    if kind == "bce":
        p = np.clip((scores + 1.0) / 2.0, 1e-12, 1.0 - 1e-12)
        y = (labels + 1.0) / 2.0
        return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))
    raise DataError(f"unknown loss kind {kind!r}")


def _head_grad(scores: np.ndarray, labels: np.ndarray, kind: str) -> np.ndarray:
    """d(loss)/d(pre-tanh head activation), per frame."""
    T = scores.size
    if kind == "mse":
        return 2.0 / T * (scores - labels) * (1.0 - scores**2)
    # bce on (s+1)/2 collapses through the tanh to (s - y) / T
    return (scores - labels) / T


def _backward_chunk(params: GruVadParams, x: np.ndarray, labels: np.ndarray, h0: np.ndarray, kind: str):
    """Gradients of the mean frame loss over one chunk.

    Returns (grads, loss_value, h_final); the incoming state h0 is treated
    as a constant (no gradient flows into earlier chunks).
    """
    T = x.shape[0]
    L, H = params.n_layers, params.hidden
    scores, h_final, cache = _forward_cached(params, x, h0)
    loss_value = loss(scores, labels, kind)
    grads = zeros_like_params(params)

    da_head = _head_grad(scores, labels, kind)  # (T,)
    top_h = cache[-1]["H"]
    grads.w_out += top_h.T @ da_head
    grads.b_out += da_head.sum()

    # per-layer pre-activation gradients, filled back-to-front
    DAZ = [np.zeros((T, H)) for _ in range(L)]
    DAR = [np.zeros((T, H)) for _ in range(L)]
    DAC = [np.zeros((T, H)) for _ in range(L)]
    carry = [np.zeros(H) for _ in range(L)]  # d loss / d h_{t} flowing from t+1

    for t in range(T - 1, -1, -1):
        dx_above = None
        for li in range(L - 1, -1, -1):
            p = params.layers[li]
            c = cache[li]
            dh = carry[li].copy()
            if li == L - 1:
                dh += da_head[t] * params.w_out
            if dx_above is not None:
                dh += dx_above
            z, r, cand, h_prev = c["Z"][t], c["R"][t], c["C"][t], c["Hprev"][t]

            dz = dh * (h_prev - cand)
            dc = dh * (1.0 - z)
            dh_prev = dh * z

            dac = dc * (1.0 - cand**2)
            uh_dac = p.U_h.T @ dac
            dh_prev += uh_dac * r
            dr = uh_dac * h_prev

            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            dh_prev += p.U_z.T @ daz + p.U_r.T @ dar

            DAZ[li][t], DAR[li][t], DAC[li][t] = daz, dar, dac
            carry[li] = dh_prev
            dx_above = p.W_z.T @ daz + p.W_r.T @ dar + p.W_h.T @ dac

    for li, p in enumerate(params.layers):
        c = cache[li]
        g = grads.layers[li]
        rhp = c["R"] * c["Hprev"]
        g.W_z += DAZ[li].T @ c["X"]
        g.W_r += DAR[li].T @ c["X"]
        g.W_h += DAC[li].T @ c["X"]
        g.U_z += DAZ[li].T @ c["Hprev"]
        g.U_r += DAR[li].T @ c["Hprev"]
        g.U_h += DAC[li].T @ rhp
        g.b_z += DAZ[li].sum(axis=0)
        g.b_r += DAR[li].sum(axis=0)
        g.b_h += DAC[li].sum(axis=0)

    return grads, loss_value, h_final


def backward(params: GruVadParams, features, labels, h0=None, loss_kind: str = "mse") -> GruVadParams:
    """Exact gradients of the mean frame loss w.r.t. every parameter."""
    x = _as_values(features)
    _check_dims(params, x)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (x.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} != ({x.shape[0]},)")
    grads, _, _ = _backward_chunk(params, x, labels, _init_state(params, h0), loss_kind)
    return grads


class Adam:
    """Adam with bias correction, one moment pair per named parameter array."""

    def __init__(self, params: GruVadParams, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(a) for name, a in params.named_arrays()}
        self.v = {name: np.zeros_like(a) for name, a in params.named_arrays()}

    def step(self, params: GruVadParams, grads: GruVadParams) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for (name, w), (_, g) in zip(params.named_arrays(), grads.named_arrays()):
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            w -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    dev_auc: float
    wall_s: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return {
            "epochs": [vars(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
        }


def _length_sorted_batches(lengths: list[int], batch: int) -> list[list[int]]:
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i), reverse=True)
    return [order[i : i + batch] for i in range(0, len(order), batch)]


def train(config: GruVadConfig, train_items, dev_items):
    """Fit the model; returns (params of the best dev-AUC epoch, report).

    ``train_items`` and ``dev_items`` are sequences of (features, labels)
    pairs, one per recording. Sequences are consumed one recording per
    batch lane, length-bucketed, chunked for truncated BPTT with the hidden
    state carried across chunks within a recording.
    """
    from .metrics import auc  # deferred: metrics needs forward() from here

    items = [
        (_as_values(f), np.asarray(y, dtype=np.float64))
        for f, y in train_items
        if _as_values(f).shape[0] > 0
    ]
    dev = [
        (_as_values(f), np.asarray(y, dtype=np.float64))
        for f, y in dev_items
        if _as_values(f).shape[0] > 0
    ]
    if not items or not dev:
        raise DataError("training and dev sets must both be non-empty")
    for x, y in items + dev:
        if x.shape[1] != config.input_dim:
            raise ShapeError(f"features have {x.shape[1]} dims, config expects {config.input_dim}")
        if y.shape != (x.shape[0],):
            raise ShapeError("each recording needs one label per frame")

    rng = np.random.default_rng(config.seed)
    params = init_params(config, rng)
    adam = Adam(params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    batches = _length_sorted_batches([x.shape[0] for x, _ in items], config.batch)

    report = TrainReport()
    best_auc = -np.inf
    best_params = params.copy()
    for epoch in range(config.epochs):
        started = time.perf_counter()
        ep_rng = np.random.default_rng([config.seed, 1000 + epoch])
        chunk_losses = []
        for bi in ep_rng.permutation(len(batches)):
            members = batches[bi]
            states = {m: None for m in members}
            eff_len = min(items[m][0].shape[0] for m in members)
            for start in range(0, eff_len, config.bptt_chunk):
                end = min(start + config.bptt_chunk, eff_len)
                total_grads = zeros_like_params(params)
                total_loss = 0.0
                for m in members:
                    x, y = items[m]
                    h0 = states[m] if states[m] is not None else _init_state(params, None)
                    grads, loss_value, h_final = _backward_chunk(
                        params, x[start:end], y[start:end], h0, config.loss_kind
                    )
                    states[m] = h_final
                    total_loss += loss_value
                    for (_, acc), (_, g) in zip(total_grads.named_arrays(), grads.named_arrays()):
                        acc += g
                mean_loss = total_loss / len(members)
                if not np.isfinite(mean_loss):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, chunk starting frame {start}"
                    )
                if len(members) > 1:
                    for _, acc in total_grads.named_arrays():
                        acc /= len(members)
                adam.step(params, total_grads)
                chunk_losses.append(mean_loss)

        pooled_scores = []
        pooled_labels = []
        for x, y in dev:
            s, _ = forward(params, x)
            pooled_scores.append(s)
            pooled_labels.append(y)
        dev_auc = auc(np.concatenate(pooled_scores), np.concatenate(pooled_labels)).auc

        report.epochs.append(
            EpochStats(epoch, float(np.mean(chunk_losses)), dev_auc, time.perf_counter() - started)
        )
        if dev_auc > best_auc:
            best_auc = dev_auc
            best_params = params.copy()
            report.best_epoch = epoch
    return best_params, report


def save_params(params: GruVadParams, path: str | Path) -> None:
    """Write a VGP1 checkpoint: header echoes the topology, arrays are float32."""
    header = struct.pack(
        "<4sIIII", PARAMS_MAGIC, PARAMS_VERSION, params.input_dim, params.n_layers, params.hidden
    )
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in params.named_arrays())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(header + body)


def _expected_payload(input_dim: int, n_layers: int, hidden: int) -> int:
    n = 0
    for i in range(n_layers):
        d = input_dim if i == 0 else hidden
        n += 3 * hidden * d + 3 * hidden * hidden + 3 * hidden
    n += hidden + 1
    return 4 * n


def load_params(path: str | Path) -> GruVadParams:
    blob = Path(path).read_bytes()
    if len(blob) < 20:
        raise FormatError(f"{path}: truncated header")
    magic, version, input_dim, n_layers, hidden = struct.unpack_from("<4sIIII", blob, 0)
    if magic != PARAMS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != PARAMS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if input_dim < 1 or n_layers < 1 or hidden < 1:
        raise ShapeError(f"{path}: invalid topology {input_dim}/{n_layers}/{hidden}")
    expected = _expected_payload(input_dim, n_layers, hidden)
    actual = len(blob) - 20
    if actual < expected:
        raise FormatError(f"{path}: payload truncated ({actual} bytes, topology implies {expected})")
    if actual > expected:
        raise ShapeError(
            f"{path}: payload is {actual} bytes but the declared topology implies {expected}"
        )
    vals = np.frombuffer(blob, dtype="<f4", offset=20).astype(np.float64)
    pos = 0

    def take(*shape):
        nonlocal pos
        n = int(np.prod(shape))
        out = vals[pos : pos + n].reshape(shape)
        pos += n
        return out

    layers = []
    for i in range(n_layers):
        d = input_dim if i == 0 else hidden
        layers.append(
            GruLayerParams(
                W_z=take(hidden, d), W_r=take(hidden, d), W_h=take(hidden, d),
                U_z=take(hidden, hidden), U_r=take(hidden, hidden), U_h=take(hidden, hidden),
                b_z=take(hidden), b_r=take(hidden), b_h=take(hidden),
            )
        )
    return GruVadParams(layers, take(hidden), take(1))
