"""Acoustic feature pipeline.

WAV ingest, MFCC extraction (13 cepstra, HTK-style mel filterbank, c0 kept
as the 13th coefficient), delta and delta-delta appending, per-utterance
mean/variance normalization, and 9-frame context splicing.  Each step tags
its output with a pipeline stage and refuses inputs from the wrong stage.
"""

from __future__ import annotations

import enum
import wave
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, StageError, TooShortError, WavFormatError


class Stage(enum.Enum):
    RAW_MFCC = "raw_mfcc"
    WITH_DELTAS = "with_deltas"
    NORMALIZED = "normalized"
    SPLICED = "spliced"


@dataclass
class AudioUtterance:
    id: str
    samples: np.ndarray  # int16 PCM
    sample_rate_hz: int = 16000


@dataclass
class FeatureSequence:
    utterance_id: str
    frames: np.ndarray  # (T, D) float64
    stage: Stage

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


@dataclass(frozen=True)
class FrontendConfig:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 26
    n_cepstra: int = 13
    delta_window: int = 2
    context_left: int = 4
    context_right: int = 4
    log_energy_floor: float = 1e-10
    preemphasis: float = 0.97
    cmvn_scope: str = "utterance"  # "utterance" | "speaker"

    def __post_init__(self):
        if not (self.window_ms > self.hop_ms > 0):
            raise ConfigError("need window_ms > hop_ms > 0")
        if self.cmvn_scope not in ("utterance", "speaker"):
            raise ConfigError(f"unknown cmvn_scope {self.cmvn_scope!r}")

    def window_samples(self, sample_rate_hz):
        return int(round(self.window_ms * sample_rate_hz / 1000.0))

    def hop_samples(self, sample_rate_hz):
        return int(round(self.hop_ms * sample_rate_hz / 1000.0))

    @property
    def spliced_dim(self):
        return (self.context_left + self.context_right + 1) * 3 * self.n_cepstra


def decode_wav(path):
    """Read a mono 16-bit PCM RIFF/WAVE file."""
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            n = w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: {channels} channels, only mono supported")
    if width != 2:
        raise WavFormatError(f"{path}: {8 * width}-bit, only 16-bit PCM supported")
    samples = np.frombuffer(raw, dtype="<i2")
    if samples.size == 0:
        raise WavFormatError(f"{path}: no samples")
    import os

    name = os.path.splitext(os.path.basename(str(path)))[0]
    return AudioUtterance(id=name, samples=samples.copy(), sample_rate_hz=rate)


def write_wav(path, samples, sample_rate_hz=16000):
    """Write int16 samples as mono PCM (testing and synthesis helper)."""
    samples = np.asarray(samples)
    if samples.dtype != np.int16:
        samples = np.clip(np.round(samples), -32768, 32767).astype(np.int16)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate_hz)
        w.writeframes(samples.astype("<i2").tobytes())


def frame_count(n_samples, window, hop):
    return (n_samples - window) // hop + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, sample_rate_hz):
    """Triangular filters, linear in mel, peak 1, DC bin excluded."""
    n_bins = n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * (sample_rate_hz / n_fft)
    bin_mel = hz_to_mel(bin_hz)
    edges = np.linspace(0.0, hz_to_mel(sample_rate_hz / 2.0), n_mels + 2)
    fb = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, center, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (bin_mel - lo) / (center - lo)
        down = (hi - bin_mel) / (hi - center)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    fb[:, 0] = 0.0
    return fb


def dct_matrix(n_out, n_in):
    """Orthonormal type-II DCT rows (the usual cepstral transform)."""
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    mat = np.cos(np.pi * k * (2 * n + 1) / (2.0 * n_in)) * np.sqrt(2.0 / n_in)
    mat[0] /= np.sqrt(2.0)
    return mat


def compute_mfcc(utterance, cfg=FrontendConfig()):
    """MFCCs ordered [c1..c12, c0]; c0 doubles as a log-energy term."""
    sr = utterance.sample_rate_hz
    window = cfg.window_samples(sr)
    hop = cfg.hop_samples(sr)
    x = utterance.samples.astype(np.float64)
    if x.shape[0] < window:
        raise TooShortError(
            f"{utterance.id}: {x.shape[0]} samples < one {window}-sample window"
        )
    if cfg.preemphasis > 0:
        x = np.concatenate(([x[0]], x[1:] - cfg.preemphasis * x[:-1]))
    T = frame_count(len(x), window, hop)
    idx = np.arange(window)[None, :] + hop * np.arange(T)[:, None]
    frames = x[idx] * np.hamming(window)
    n_fft = 1 << (window - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fb = mel_filterbank(cfg.n_mels, n_fft, sr)
    log_mel = np.log(np.maximum(power @ fb.T, cfg.log_energy_floor))
    ceps = log_mel @ dct_matrix(cfg.n_cepstra, cfg.n_mels).T
    ceps = np.concatenate([ceps[:, 1:], ceps[:, :1]], axis=1)
    return FeatureSequence(utterance.id, ceps, Stage.RAW_MFCC)


def _require_stage(f, stage, op):
    if f.stage is not stage:
        raise StageError(f"{op} needs stage {stage.value}, got {f.stage.value}")


def _delta(frames, half_window):
    pad = np.concatenate(
        [np.repeat(frames[:1], half_window, axis=0), frames,
         np.repeat(frames[-1:], half_window, axis=0)]
    )
    T = len(frames)
    out = np.zeros_like(frames)
    for k in range(1, half_window + 1):
        out += k * (pad[half_window + k : half_window + k + T]
                    - pad[half_window - k : half_window - k + T])
    return out / (2.0 * sum(k * k for k in range(1, half_window + 1)))


def append_deltas(f, cfg=FrontendConfig()):
    """Append the regression deltas and delta-deltas (edge replication)."""
    _require_stage(f, Stage.RAW_MFCC, "append_deltas")
    d1 = _delta(f.frames, cfg.delta_window)
    d2 = _delta(d1, cfg.delta_window)
    return FeatureSequence(
        f.utterance_id, np.concatenate([f.frames, d1, d2], axis=1), Stage.WITH_DELTAS
    )


def apply_cmvn(f):
    """Normalize each dimension to zero mean and unit variance.

    Dimensions with variance below 1e-12 are only mean-shifted and reported
    through a warning.
    """
    _require_stage(f, Stage.WITH_DELTAS, "apply_cmvn")
    mean = f.frames.mean(axis=0)
    var = f.frames.var(axis=0)
    degenerate = var < 1e-12
    if np.any(degenerate):
        warnings.warn(
            f"{f.utterance_id}: dimension(s) {np.flatnonzero(degenerate).tolist()} "
            "are (near-)constant; mean-shifted only"
        )
    scale = np.where(degenerate, 1.0, np.sqrt(np.maximum(var, 1e-300)))
    return FeatureSequence(f.utterance_id, (f.frames - mean) / scale, Stage.NORMALIZED)


def apply_cmvn_with_stats(f, mean, std):
    """Normalization with externally pooled statistics (per-speaker scope)."""
    _require_stage(f, Stage.WITH_DELTAS, "apply_cmvn_with_stats")
    return FeatureSequence(f.utterance_id, (f.frames - mean) / std, Stage.NORMALIZED)


def pooled_cmvn_stats(sequences):
    """Mean/std over the union of several with-deltas sequences."""
    stacked = np.concatenate([f.frames for f in sequences])
    std = np.sqrt(stacked.var(axis=0))
    return stacked.mean(axis=0), np.where(std < 1e-6, 1.0, std)


def splice_frames(f, cfg=FrontendConfig()):
    """Concatenate each frame with its context window (edge replication)."""
    _require_stage(f, Stage.NORMALIZED, "splice_frames")
    T = f.n_frames
    offsets = range(-cfg.context_left, cfg.context_right + 1)
    cols = [f.frames[np.clip(np.arange(T) + k, 0, T - 1)] for k in offsets]
    return FeatureSequence(f.utterance_id, np.concatenate(cols, axis=1), Stage.SPLICED)


def extract_features(utterance, cfg=FrontendConfig(), stage=Stage.NORMALIZED):
    """Run the pipeline up to the requested stage."""
    f = compute_mfcc(utterance, cfg)
    if stage is Stage.RAW_MFCC:
        return f
    f = append_deltas(f, cfg)
    if stage is Stage.WITH_DELTAS:
        return f
    f = apply_cmvn(f)
    if stage is Stage.NORMALIZED:
        return f
    return splice_frames(f, cfg)
