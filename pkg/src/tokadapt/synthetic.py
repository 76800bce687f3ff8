"""Synthetic language with known ground truth.

Utterances are sampled from per-phone left-to-right Gaussian HMMs; each
speaker renders the shared language through their own affine distortion
(random rotation plus bias).  Two output modes: direct 39-dim feature
emission, or tone-complex waveforms to be run through the acoustic
frontend.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from .errors import ConfigError
from .frontend import FeatureSequence, FrontendConfig, Stage
from .hmm import GranularityConfig, TokenHmm, TokenHmmSet, make_log_trans


@dataclass(frozen=True)
class SyntheticLanguageSpec:
    n_phones: int = 8
    states_per_phone: int = 3
    feature_dim: int = 39
    phone_center_scale: float = 1.2
    state_offset_scale: float = 0.55
    variance_low: float = 0.8
    variance_high: float = 1.2
    self_loop_low: float = 0.55
    self_loop_high: float = 0.75
    utterance_phones_min: int = 4
    utterance_phones_max: int = 8
    # speaker distortion: rotation angle (radians) and per-dim bias, both in
    # units of the within-state sigma
    speaker_rotation: float = 0.4
    speaker_bias: float = 0.25
    n_si_speakers: int = 4
    n_adapt_speakers: int = 2
    si_utterances: int = 250
    adapt_utterances: int = 200
    dev_utterances: int = 100
    test_utterances: int = 100

    def __post_init__(self):
        if self.n_phones < 2 or self.states_per_phone < 1:
            raise ConfigError("need >= 2 phones and >= 1 state per phone")
        if self.utterance_phones_min < 1 or (
            self.utterance_phones_max < self.utterance_phones_min
        ):
            raise ConfigError("bad utterance length range")

    @property
    def n_states(self):
        return self.n_phones * self.states_per_phone

    def state_index(self, phone, state):
        return phone * self.states_per_phone + state


@dataclass
class SpeakerCorpus:
    speaker_id: str
    utterances: dict  # utt_id -> FeatureSequence (normalized stage)
    transcripts: dict  # utt_id -> list of phone ids
    alignments: dict  # utt_id -> int32[T] global state indices
    splits: dict  # split name -> list of utt_ids
    transform: tuple  # (A, b) applied to canonical emissions

    def split_ids(self, name):
        return list(self.splits[name])


@dataclass
class CorpusPartition:
    """Disjoint utterance-id sets: labeled / unlabeled / dev / test."""

    labeled: list
    unlabeled: list
    dev: list
    test: list

    def validate_disjoint(self):
        all_ids = self.labeled + self.unlabeled + self.dev + self.test
        assert len(all_ids) == len(set(all_ids)), "partition sets overlap"


@dataclass
class SyntheticCorpus:
    spec: SyntheticLanguageSpec
    language: list  # canonical per-phone TokenHmm
    si_speakers: list
    adapt_speakers: list

    def phone_models(self, variance_floor=1e-3):
        cfg = GranularityConfig(self.spec.states_per_phone, self.spec.n_phones)
        return TokenHmmSet(cfg, self.language, variance_floor)


def make_language(spec, seed):
    """Canonical phone HMMs: separated phone centers with state sub-structure."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xAC0]))
    models = []
    d = spec.feature_dim
    for p in range(spec.n_phones):
        center = rng.normal(0.0, spec.phone_center_scale, size=d)
        means = center + rng.normal(
            0.0, spec.state_offset_scale, size=(spec.states_per_phone, d)
        )
        variances = rng.uniform(
            spec.variance_low, spec.variance_high, size=(spec.states_per_phone, d)
        )
        loops = rng.uniform(
            spec.self_loop_low, spec.self_loop_high, size=spec.states_per_phone
        )
        models.append(
            TokenHmm(p, means, variances, make_log_trans(np.log(loops),
                                                         np.log1p(-loops)))
        )
    return models


def make_speaker_transform(spec, rng):
    """Random rotation by speaker_rotation radians plus a bias vector."""
    d = spec.feature_dim
    g = rng.normal(size=(d, d))
    skew = (g - g.T) / 2.0
    norm = np.linalg.norm(skew, 2)
    rotation = expm(spec.speaker_rotation * skew / norm)
    bias = spec.speaker_bias * rng.normal(size=d)
    return rotation, bias


def _sample_utterance(spec, language, rng):
    n_phones = int(rng.integers(spec.utterance_phones_min,
                                spec.utterance_phones_max + 1))
    transcript = []
    prev = -1
    for _ in range(n_phones):
        p = int(rng.integers(spec.n_phones))
        while p == prev:  # adjacent repeats are undecidable for the metric
            p = int(rng.integers(spec.n_phones))
        transcript.append(p)
        prev = p
    frames = []
    states = []
    for p in transcript:
        h = language[p]
        loops = np.exp(h.log_self)
        for s in range(h.n_states):
            dur = int(rng.geometric(1.0 - loops[s]))
            for _ in range(dur):
                frames.append(rng.normal(h.means[s], np.sqrt(h.variances[s])))
                states.append(spec.state_index(p, s))
    return transcript, np.array(frames), np.array(states, dtype=np.int32)


def _speaker(spec, language, seed, speaker_id, counts):
    rng = np.random.default_rng(seed)
    transform = make_speaker_transform(spec, rng)
    rotation, bias = transform
    utterances, transcripts, alignments, splits = {}, {}, {}, {}
    idx = 0
    for split, count in counts.items():
        ids = []
        for _ in range(count):
            utt_id = f"{speaker_id}-{idx:04d}"
            idx += 1
            transcript, frames, states = _sample_utterance(spec, language, rng)
            warped = frames @ rotation.T + bias
            utterances[utt_id] = FeatureSequence(utt_id, warped, Stage.NORMALIZED)
            transcripts[utt_id] = transcript
            alignments[utt_id] = states
            ids.append(utt_id)
        splits[split] = ids
    return SpeakerCorpus(speaker_id, utterances, transcripts, alignments,
                         splits, transform)


def synthesize_corpus(spec, seed):
    """Full synthetic corpus: SI speakers plus adaptation/test speakers."""
    language = make_language(spec, seed)
    ss = np.random.SeedSequence([seed, 0x5EED])
    seeds = ss.generate_state(spec.n_si_speakers + spec.n_adapt_speakers)
    si_speakers = [
        _speaker(spec, language, int(seeds[i]), f"si{i}",
                 {"train": spec.si_utterances})
        for i in range(spec.n_si_speakers)
    ]
    adapt_speakers = [
        _speaker(
            spec, language, int(seeds[spec.n_si_speakers + i]), f"spk{i}",
            {
                "adapt": spec.adapt_utterances,
                "dev": spec.dev_utterances,
                "test": spec.test_utterances,
            },
        )
        for i in range(spec.n_adapt_speakers)
    ]
    return SyntheticCorpus(spec, language, si_speakers, adapt_speakers)


def make_partition(speaker, labeled_budget, seed):
    """Split a speaker's adaptation set into labeled/unlabeled by budget."""
    adapt = speaker.split_ids("adapt")
    if labeled_budget > len(adapt):
        raise ConfigError(
            f"labeled budget {labeled_budget} exceeds {len(adapt)} utterances"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(adapt))
    labeled = [adapt[i] for i in order[:labeled_budget]]
    unlabeled = [adapt[i] for i in order[labeled_budget:]]
    part = CorpusPartition(
        labeled=labeled,
        unlabeled=unlabeled,
        dev=speaker.split_ids("dev"),
        test=speaker.split_ids("test"),
    )
    part.validate_disjoint()
    return part


# -- waveform mode -----------------------------------------------------------


def phone_tone(phone, n_samples, sample_rate_hz, freq_scale=1.0, rng=None):
    """Tone complex for one phone: distinct fundamental plus two harmonics."""
    f0 = (220.0 + 65.0 * phone) * freq_scale
    t = np.arange(n_samples) / sample_rate_hz
    wave = (
        6000.0 * np.sin(2 * np.pi * f0 * t)
        + 3000.0 * np.sin(2 * np.pi * 2 * f0 * t)
        + 1500.0 * np.sin(2 * np.pi * 3 * f0 * t)
    )
    if rng is not None:
        wave = wave + 50.0 * rng.normal(size=n_samples)
    return wave


def synthesize_waveform_utterance(spec, transcript, seed, sample_rate_hz=16000,
                                  frontend_cfg=None, frames_per_phone=8):
    """One utterance as (samples int16, per-frame phone ids).

    Durations are laid out on the frame grid so the frontend's frame count
    matches the alignment exactly.
    """
    cfg = frontend_cfg or FrontendConfig()
    hop = cfg.hop_samples(sample_rate_hz)
    window = cfg.window_samples(sample_rate_hz)
    rng = np.random.default_rng(seed)
    freq_scale = 1.0 + 0.03 * rng.normal()
    frame_phones = []
    for p in transcript:
        dur = frames_per_phone + int(rng.integers(-2, 3))
        frame_phones.extend([p] * max(3, dur))
    total_frames = len(frame_phones)
    n_samples = (total_frames - 1) * hop + window
    samples = np.zeros(n_samples)
    # frame t covers samples [t*hop, t*hop + window); give each frame's hop
    # region the tone of its phone, letting windows blur the boundaries
    for t, p in enumerate(frame_phones):
        start = t * hop
        end = n_samples if t == total_frames - 1 else (t + 1) * hop
        samples[start:end] = phone_tone(p, end - start, sample_rate_hz,
                                        freq_scale, rng)
    pcm = np.clip(np.round(samples), -32767, 32767).astype(np.int16)
    return pcm, np.array(frame_phones, dtype=np.int32)
