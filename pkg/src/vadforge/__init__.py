"""Voice activity detection toolkit.

Synthesizes labeled noisy corpora at controlled SNR, extracts log-Mel
features (or ingests external representations), trains a small recurrent
VAD, evaluates with ROC/AUC per noise condition, and runs a two-stage
streaming cascade under real-time buffer constraints.
"""

__version__ = "0.1.0"

from .audio import CANONICAL_RATE, AudioClip, read_wav, resample, rms, write_wav
from .errors import (
    ConfigError,
    CoverageError,
    DataError,
    DivergenceError,
    FormatError,
    ManifestError,
    ShapeError,
    UnsupportedFormatError,
    VadforgeError,
)
from .features import (
    FeatureMatrix,
    MfbConfig,
    NormStats,
    extract_mfb,
    fit_stats,
    frame_count,
    mel_scale,
    normalize_global,
    normalize_instance,
)
from .gru import GruVadConfig, GruVadParams, backward, forward, load_params, loss, save_params, train
from .metrics import RocResult, auc, buffer_sweep, evaluate
from .store import align_labels, load_features, load_stats, save_features, save_stats
from .stream import BufferConfig, CascadeConfig, StreamingRuntime, run_file_realtime
from .synth import (
    LabeledRecording,
    ManifestEntry,
    NoiseBank,
    PauseModel,
    SpeechSpan,
    SynthConfig,
    Utterance,
    concatenate,
    frame_labels,
    mix_noise,
    read_manifest,
    sample_pause,
    synthesize_partition,
    white_noise,
    write_manifest,
)
