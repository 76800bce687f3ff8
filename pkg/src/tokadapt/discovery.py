"""Unsupervised acoustic-token discovery.

Pipeline: contour-based segmentation of each utterance, K-means over
segment mean vectors to get the initial token labeling, then alternating
per-token HMM re-estimation and whole-corpus re-decoding until the frame
labels stop changing.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NoPathError
from .frontend import Stage
from .hmm import (
    GranularityConfig,
    TokenHmmSet,
    baum_welch_update,
    forward_log_likelihood,
    init_flat_start,
    token_loop_decode,
)
from .kmeans import kmeans

log = logging.getLogger(__name__)

# re-exported: granularity lives with the token machinery but is part of
# this module's vocabulary
__all__ = [
    "AcousticSegment",
    "DiscoveryReport",
    "GranularityConfig",
    "TokenLabeling",
    "discover",
    "discover_multi",
    "kmeans_initialize",
    "load_labels",
    "reestimate_models",
    "relabel_corpus",
    "save_labels",
    "segment_utterance",
]


@dataclass
class AcousticSegment:
    utterance_id: str
    start_frame: int
    end_frame: int
    mean_vector: np.ndarray


@dataclass
class TokenLabeling:
    """Token occupancies per utterance, tiling each utterance exactly."""

    occupancies: dict  # utt_id -> list of (token_id, start, end)
    states: dict | None = None  # utt_id -> int32[T] per-frame state indices
    iteration_index: int = 0

    def frame_tokens(self, utt_id, n_frames):
        out = np.full(n_frames, -1, dtype=np.int32)
        for token_id, start, end in self.occupancies[utt_id]:
            out[start:end] = token_id
        if np.any(out < 0):
            raise ValueError(f"{utt_id}: labeling does not tile the utterance")
        return out

    def token_ids_used(self):
        used = set()
        for runs in self.occupancies.values():
            used.update(token_id for token_id, _, _ in runs)
        return sorted(used)

    def validate_tiling(self, lengths):
        for utt_id, T in lengths.items():
            runs = self.occupancies[utt_id]
            pos = 0
            for token_id, start, end in runs:
                assert start == pos and end > start, f"{utt_id}: gap or overlap"
                pos = end
            assert pos == T, f"{utt_id}: labeling stops at {pos} of {T}"


@dataclass
class DiscoveryReport:
    granularity: GranularityConfig
    seed: int
    iterations_run: int
    changed_fractions: list
    converged: bool
    models: TokenHmmSet
    labels: TokenLabeling

    @property
    def surviving_tokens(self):
        return len(self.models)


def segment_utterance(f, sensitivity=1.0, min_frames=3, n_static=13):
    """Split an utterance at discontinuities of its feature contour.

    The contour is the 3-frame-smoothed Euclidean distance between
    consecutive frames over the static coefficients; boundaries go where it
    exceeds mean + sensitivity * stddev, then get merged so every segment
    keeps at least min_frames frames.
    """
    if f.stage is not Stage.NORMALIZED:
        raise ConfigError(f"segmentation expects normalized features, got {f.stage}")
    if min_frames < 1:
        raise ConfigError("min_frames must be >= 1")
    T = f.n_frames
    if T < 2 * min_frames:
        return [_segment(f, 0, T)]
    static = f.frames[:, :n_static]
    contour = np.linalg.norm(np.diff(static, axis=0), axis=1)  # contour[i]: i -> i+1
    kernel = np.ones(3) / 3.0
    smoothed = np.convolve(np.pad(contour, 1, mode="edge"), kernel, mode="valid")
    threshold = smoothed.mean() + sensitivity * smoothed.std()
    padded = np.concatenate(([-np.inf], smoothed, [-np.inf]))
    is_peak = (smoothed >= padded[:-2]) & (smoothed >= padded[2:])
    candidates = np.flatnonzero(is_peak & (smoothed > threshold)) + 1  # boundary index

    bounds = []
    last = 0
    for pos in candidates:
        if pos - last >= min_frames:
            bounds.append(int(pos))
            last = int(pos)
    while bounds and T - bounds[-1] < min_frames:
        bounds.pop()
    edges = [0] + bounds + [T]
    return [_segment(f, a, b) for a, b in zip(edges, edges[1:])]


def _segment(f, start, end):
    return AcousticSegment(
        f.utterance_id, start, end, f.frames[start:end].mean(axis=0)
    )


def kmeans_initialize(segments, cfg, seed):
    """Cluster segment means into n tokens; returns the initial labeling."""
    if len(segments) < cfg.n:
        raise ConfigError(
            f"{len(segments)} segments cannot seed {cfg.n} tokens; lower n"
        )
    X = np.stack([s.mean_vector for s in segments])
    labels, _, _ = kmeans(X, cfg.n, seed)
    occupancies = {}
    for seg, token in zip(segments, labels):
        occupancies.setdefault(seg.utterance_id, []).append(
            (int(token), seg.start_frame, seg.end_frame)
        )
    for runs in occupancies.values():
        runs.sort(key=lambda r: r[1])
    return TokenLabeling(occupancies, states=None, iteration_index=0)


def default_variance_floor(corpus):
    """1e-3 of the average per-dimension corpus variance."""
    stacked = np.concatenate([f.frames for f in corpus.values()])
    return 1e-3 * float(stacked.var(axis=0).mean())


def reestimate_models(labels, corpus, cfg, prev=None, variance_floor=None,
                      bw_iters=10, bw_tol=1e-5):
    """Train one HMM per token on its labeled segments (boundaries fixed).

    First pass flat-starts each token; later passes warm-start from the
    previous set.  Tokens that lost all segments are dropped.  A token whose
    segments are all shorter than m frames is trained on edge-replicated
    padding and flagged.
    """
    if variance_floor is None:
        variance_floor = (
            prev.variance_floor if prev is not None else default_variance_floor(corpus)
        )
    per_token = {}
    for utt_id, runs in labels.occupancies.items():
        frames = corpus[utt_id].frames
        for token_id, start, end in runs:
            per_token.setdefault(token_id, []).append(frames[start:end])

    models = []
    for token_id in sorted(per_token):
        segments = per_token[token_id]
        if all(len(s) < cfg.m for s in segments):
            warnings.warn(
                f"token {token_id}: all {len(segments)} segments shorter than "
                f"m={cfg.m}; training on edge-replicated padding"
            )
            segments = [_pad_to(s, cfg.m) for s in segments]
        if prev is not None and token_id in prev.token_ids:
            h = prev.model_for(token_id)
        else:
            h = init_flat_start(segments, cfg.m, variance_floor)
            h.token_id = token_id
        prev_ll = None
        for _ in range(bw_iters):
            h = baum_welch_update(h, segments)
            h.variances = np.maximum(h.variances, variance_floor)
            h.token_id = token_id
            ll = sum(forward_log_likelihood(h, s) for s in segments)
            if prev_ll is not None and abs(ll - prev_ll) < bw_tol * abs(prev_ll):
                break
            prev_ll = ll
        models.append(h)

    dropped = set(range(cfg.n)) - set(per_token)
    if prev is not None:
        dropped = set(prev.token_ids) - set(per_token)
    if dropped:
        log.info("dropping tokens with no segments: %s", sorted(dropped))
    return TokenHmmSet(cfg, models, variance_floor)


def _pad_to(seg, m):
    if len(seg) >= m:
        return seg
    pad = np.repeat(seg[-1:], m - len(seg), axis=0)
    return np.concatenate([seg, pad])


def relabel_corpus(models, corpus, insertion_penalty=0.0, iteration_index=0):
    """Decode every utterance with the free token loop."""
    occupancies = {}
    states = {}
    for utt_id, f in corpus.items():
        try:
            path = token_loop_decode(
                models, f.frames, insertion_penalty, utterance_id=utt_id
            )
            occupancies[utt_id] = path.occupancies()
            states[utt_id] = path.states
        except NoPathError:
            token_id, st = _best_whole_utterance_token(models, f.frames)
            warnings.warn(
                f"{utt_id}: too short for any model; labeled whole as token {token_id}"
            )
            occupancies[utt_id] = [(token_id, 0, f.n_frames)]
            states[utt_id] = st
    return TokenLabeling(occupancies, states, iteration_index)


def _best_whole_utterance_token(models, frames):
    best, best_ll = None, -np.inf
    for h in models.models:
        padded = _pad_to(frames, h.n_states)
        ll = forward_log_likelihood(h, padded)
        if ll > best_ll:
            best, best_ll = h, ll
    states = np.minimum(np.arange(len(frames)), best.n_states - 1).astype(np.int32)
    return best.token_id, states


def changed_frame_fraction(old, new, lengths):
    changed = 0
    total = 0
    for utt_id, T in lengths.items():
        changed += int(
            np.sum(old.frame_tokens(utt_id, T) != new.frame_tokens(utt_id, T))
        )
        total += T
    return changed / total


def discover(corpus, cfg, seed, max_iters=20, threshold=0.01,
             insertion_penalty=0.0, sensitivity=1.0, min_frames=3):
    """Full discovery loop for one granularity.

    Non-convergence within max_iters is an outcome, not an error: the report
    carries converged=False together with the last models and labels.
    """
    if not corpus:
        raise ConfigError("empty corpus")
    lengths = {utt_id: f.n_frames for utt_id, f in corpus.items()}
    segments = []
    for f in corpus.values():
        segments.extend(segment_utterance(f, sensitivity, min_frames))
    labels = kmeans_initialize(segments, cfg, seed)

    models = None
    fractions = []
    converged = False
    for iteration in range(1, max_iters + 1):
        models = reestimate_models(labels, corpus, cfg, prev=models)
        new_labels = relabel_corpus(
            models, corpus, insertion_penalty, iteration_index=iteration
        )
        frac = changed_frame_fraction(labels, new_labels, lengths)
        fractions.append(frac)
        labels = new_labels
        if frac <= threshold:
            converged = True
            break
    return DiscoveryReport(
        granularity=cfg,
        seed=seed,
        iterations_run=len(fractions),
        changed_fractions=fractions,
        converged=converged,
        models=models,
        labels=labels,
    )


def discover_multi(corpus, grid, seed, **kwargs):
    """Independent discovery per granularity, same seed for each."""
    if not grid:
        raise ConfigError("empty granularity grid")
    return [discover(corpus, cfg, seed, **kwargs) for cfg in grid]


def save_labels(labeling, path, granularity=None, seed=None):
    """Line-oriented labels file: one `utt token start end` row per occupancy."""
    with open(path, "w", encoding="utf-8") as f:
        meta = [f"iteration={labeling.iteration_index}"]
        if granularity is not None:
            meta = [f"m={granularity.m}", f"n={granularity.n}"] + meta
        if seed is not None:
            meta.append(f"seed={seed}")
        f.write("# tokadapt-labels " + " ".join(meta) + "\n")
        for utt_id in labeling.occupancies:
            for token_id, start, end in labeling.occupancies[utt_id]:
                f.write(f"{utt_id} {token_id} {start} {end}\n")


def load_labels(path):
    occupancies = {}
    meta = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for part in line.lstrip("# ").split():
                    if "=" in part:
                        key, value = part.split("=", 1)
                        meta[key] = value
                continue
            utt_id, token_id, start, end = line.split()
            occupancies.setdefault(utt_id, []).append(
                (int(token_id), int(start), int(end))
            )
    labeling = TokenLabeling(
        occupancies, states=None, iteration_index=int(meta.get("iteration", 0))
    )
    return labeling, meta
