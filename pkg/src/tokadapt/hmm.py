"""Left-to-right HMMs with diagonal-Gaussian emissions.

The same machinery serves discovered acoustic tokens and phones: forward
likelihood, Viterbi decoding (single model and free loop), Baum-Welch
re-estimation, and forced alignment.  All scores are natural-log
probabilities; the exit arc out of a model's last state is part of every
complete-path score.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigError, InitError, NoPathError, ShapeError

LOG_2PI = float(np.log(2.0 * np.pi))

MODEL_MAGIC = b"TKHM"
MODEL_VERSION = 1


@dataclass(frozen=True)
class GranularityConfig:
    """Token-set granularity: m states per model, n distinct tokens."""

    m: int
    n: int

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.n < 2:
            raise ConfigError(f"n must be >= 2, got {self.n}")


@dataclass(frozen=True)
class GaussianState:
    mean: np.ndarray
    variance: np.ndarray


def gaussian_loglik(frames, means, variances):
    """Log-densities of diagonal Gaussians, per frame and state.

    frames (T, D), means/variances (S, D) -> (T, S).
    """
    frames = np.asarray(frames, dtype=np.float64)
    inv = 1.0 / variances
    const = -0.5 * (frames.shape[1] * LOG_2PI + np.log(variances).sum(axis=1))
    quad = (
        (frames**2) @ inv.T
        - 2.0 * (frames @ (means * inv).T)
        + (means**2 * inv).sum(axis=1)
    )
    return const - 0.5 * quad


class TokenHmm:
    """One strictly left-to-right model: self and +1 arcs only.

    ``log_trans`` is an (m+1)x(m+1) matrix over states plus the exit node;
    row m is the absorbing exit row.  Every row's finite entries sum to one.
    """

    def __init__(self, token_id, means, variances, log_trans):
        self.token_id = int(token_id)
        self.means = np.asarray(means, dtype=np.float64)
        self.variances = np.asarray(variances, dtype=np.float64)
        self.log_trans = np.asarray(log_trans, dtype=np.float64)
        m = self.means.shape[0]
        if self.log_trans.shape != (m + 1, m + 1):
            raise ShapeError(
                f"transition matrix {self.log_trans.shape} does not match {m} states"
            )

    @property
    def n_states(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def states(self):
        return [
            GaussianState(self.means[s].copy(), self.variances[s].copy())
            for s in range(self.n_states)
        ]

    @property
    def log_self(self):
        return np.diag(self.log_trans)[: self.n_states].copy()

    @property
    def log_next(self):
        m = self.n_states
        return self.log_trans[np.arange(m), np.arange(1, m + 1)].copy()

    def emission_loglik(self, frames):
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.dim:
            raise ShapeError(
                f"frames of dim {frames.shape} do not match model dim {self.dim}"
            )
        return gaussian_loglik(frames, self.means, self.variances)

    def validate(self, variance_floor=0.0):
        assert np.all(self.variances >= variance_floor)
        m = self.n_states
        finite = np.isfinite(self.log_trans)
        allowed = np.zeros_like(finite)
        idx = np.arange(m)
        allowed[idx, idx] = True
        allowed[idx, idx + 1] = True
        allowed[m, m] = True
        assert not np.any(finite & ~allowed), "non left-to-right arc present"
        for row in range(m + 1):
            total = np.exp(self.log_trans[row][finite[row]]).sum()
            assert abs(total - 1.0) <= 1e-10, f"row {row} sums to {total}"


def make_log_trans(log_self, log_next):
    """Assemble the (m+1)x(m+1) banded transition matrix."""
    m = len(log_self)
    lt = np.full((m + 1, m + 1), -np.inf)
    idx = np.arange(m)
    lt[idx, idx] = log_self
    lt[idx, idx + 1] = log_next
    lt[m, m] = 0.0
    return lt


class TokenHmmSet:
    """All models for one granularity, treated as immutable once built."""

    def __init__(self, granularity, models, variance_floor):
        self.granularity = granularity
        self.models = list(models)
        self.variance_floor = float(variance_floor)
        ids = [h.token_id for h in self.models]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate token ids in model set")
        if len(self.models) > granularity.n:
            raise ConfigError("more models than the configured token count")
        self._stack = None

    def __len__(self):
        return len(self.models)

    @property
    def token_ids(self):
        return [h.token_id for h in self.models]

    def model_for(self, token_id):
        for h in self.models:
            if h.token_id == token_id:
                return h
        raise KeyError(token_id)

    def state_count(self):
        return sum(h.n_states for h in self.models)

    def _stacked(self):
        # cached concatenated layout shared by decoding kernels
        if self._stack is None:
            lens = np.array([h.n_states for h in self.models], dtype=np.int32)
            starts = np.zeros(len(lens), dtype=np.int32)
            starts[1:] = np.cumsum(lens)[:-1].astype(np.int32)
            self._stack = {
                "means": np.concatenate([h.means for h in self.models]),
                "variances": np.concatenate([h.variances for h in self.models]),
                "log_self": np.concatenate([h.log_self for h in self.models]),
                "log_next": np.concatenate([h.log_next for h in self.models]),
                "starts": starts,
                "lens": lens,
            }
        return self._stack

    def emission_loglik(self, frames):
        st = self._stacked()
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != st["means"].shape[1]:
            raise ShapeError("frame dimension does not match model set")
        return gaussian_loglik(frames, st["means"], st["variances"])


@dataclass
class StatePath:
    """Per-frame (token_id, state_index) alignment with its log-score."""

    utterance_id: str
    tokens: np.ndarray
    states: np.ndarray
    total_log_prob: float

    def __len__(self):
        return len(self.tokens)

    def occupancies(self):
        """Contiguous runs as (token_id, start_frame, end_frame) triples.

        A new occupancy starts wherever the state index does not continue
        monotonically (so immediate repeats of the same token are kept
        separate).
        """
        runs = []
        t0 = 0
        for t in range(1, len(self.tokens)):
            same = self.tokens[t] == self.tokens[t - 1] and (
                self.states[t] == self.states[t - 1]
                or self.states[t] == self.states[t - 1] + 1
            )
            if not same:
                runs.append((int(self.tokens[t0]), t0, t))
                t0 = t
        runs.append((int(self.tokens[t0]), t0, len(self.tokens)))
        return runs


def init_flat_start(segments, m, floor):
    """Flat-start a fresh m-state model from example segments.

    Each segment at least m frames long is split into m near-equal chunks;
    state k pools chunk k across segments.  The self-loop probability is
    (L-1)/L for L the mean chunk length.
    """
    usable = [np.asarray(s, dtype=np.float64) for s in segments if len(s) >= m]
    if not usable:
        raise InitError(f"no segment has >= {m} frames; cannot flat-start")
    dim = usable[0].shape[1]
    pooled = [[] for _ in range(m)]
    for seg in usable:
        for k, chunk in enumerate(np.array_split(seg, m)):
            pooled[k].append(chunk)
    means = np.empty((m, dim))
    variances = np.empty((m, dim))
    for k in range(m):
        frames = np.concatenate(pooled[k])
        means[k] = frames.mean(axis=0)
        variances[k] = np.maximum(frames.var(axis=0), floor)
    mean_chunk = np.mean([len(s) / m for s in usable])
    p_self = (mean_chunk - 1.0) / mean_chunk
    with np.errstate(divide="ignore"):
        log_self = np.full(m, np.log(p_self) if p_self > 0 else -np.inf)
        log_next = np.full(m, np.log(1.0 - p_self))
    return TokenHmm(0, means, variances, make_log_trans(log_self, log_next))


def forward_log_likelihood(h, frames):
    """Log-probability of the frames under the model, summed over paths.

    Returns -inf when no legal left-to-right traversal exists (T < m).
    """
    log_obs = h.emission_loglik(frames)
    return _kernels.chain_forward(log_obs, h.log_self, h.log_next)


def viterbi_decode(h, frames, utterance_id=""):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] < h.n_states:
        raise NoPathError(
            f"{frames.shape[0]} frames cannot traverse {h.n_states} states"
        )
    log_obs = h.emission_loglik(frames)
    states, score = _kernels.chain_viterbi(log_obs, h.log_self, h.log_next)
    if not np.isfinite(score):
        raise NoPathError("no finite-score path")
    tokens = np.full(len(states), h.token_id, dtype=np.int32)
    return StatePath(utterance_id, tokens, states, score)


def baum_welch_update(h, segments):
    """One Baum-Welch (EM) iteration over the given segments.

    Segments shorter than the state count carry no legal path and are
    skipped.  States with zero occupancy keep their Gaussian and are
    reported via a warning.  Variances are not floored here; the caller
    owning the set-level floor applies it (see ``reestimate_models``).
    """
    m, dim = h.n_states, h.dim
    log_self, log_next = h.log_self, h.log_next
    occ = np.zeros(m)
    mean_acc = np.zeros((m, dim))
    sq_acc = np.zeros((m, dim))
    self_acc = np.zeros(m)
    next_acc = np.zeros(m)
    exit_acc = 0.0
    used = 0
    for seg in segments:
        seg = np.asarray(seg, dtype=np.float64)
        if len(seg) < m:
            continue
        log_obs = h.emission_loglik(seg)
        la, lb, ll = _kernels.chain_forward_backward(log_obs, log_self, log_next)
        if not np.isfinite(ll):
            continue
        used += 1
        gamma = np.exp(la + lb - ll)
        occ += gamma.sum(axis=0)
        mean_acc += gamma.T @ seg
        sq_acc += gamma.T @ seg**2
        if len(seg) > 1:
            self_acc += np.exp(la[:-1] + log_self + log_obs[1:] + lb[1:] - ll).sum(
                axis=0
            )
            nxt = la[:-1, :-1] + log_next[:-1] + log_obs[1:, 1:] + lb[1:, 1:] - ll
            next_acc[:-1] += np.exp(nxt).sum(axis=0)
        exit_acc += gamma[-1, -1]
    if used == 0:
        warnings.warn("baum_welch_update: no usable segment; model unchanged")
        return TokenHmm(h.token_id, h.means.copy(), h.variances.copy(), h.log_trans.copy())

    means = h.means.copy()
    variances = h.variances.copy()
    starved = occ <= 1e-10
    if np.any(starved):
        warnings.warn(
            f"baum_welch_update: state(s) {np.flatnonzero(starved).tolist()} "
            "of token {} had zero occupancy".format(h.token_id)
        )
    live = ~starved
    means[live] = mean_acc[live] / occ[live, None]
    variances[live] = sq_acc[live] / occ[live, None] - means[live] ** 2
    variances[live] = np.maximum(variances[live], 0.0)

    denom = self_acc + next_acc
    denom[-1] = self_acc[-1] + exit_acc
    new_self = np.where(
        denom > 0, self_acc / np.maximum(denom, 1e-300), np.exp(log_self)
    )
    with np.errstate(divide="ignore"):
        ls = np.log(new_self)
        ln = np.log1p(-new_self)
    return TokenHmm(h.token_id, means, variances, make_log_trans(ls, ln))


def token_loop_decode(model_set, frames, insertion_penalty=0.0, utterance_id=""):
    """Unconstrained decoding over a free loop of all models.

    Any model may follow any model; ``insertion_penalty`` is subtracted from
    the score at every model entry (the first included).
    """
    frames = np.asarray(frames, dtype=np.float64)
    log_obs = model_set.emission_loglik(frames)
    return loop_decode_scores(
        model_set, log_obs, insertion_penalty, utterance_id=utterance_id
    )


def loop_decode_scores(model_set, log_obs, insertion_penalty=0.0, utterance_id=""):
    """Free-loop Viterbi over caller-supplied per-state scores (T, S_total)."""
    if len(model_set) == 0:
        raise ConfigError("empty model set")
    st = model_set._stacked()
    log_obs = np.ascontiguousarray(log_obs, dtype=np.float64)
    if log_obs.shape[1] != model_set.state_count():
        raise ShapeError("score matrix does not match the set's state count")
    entry = np.full(len(model_set), -float(insertion_penalty))
    model_idx, states, score = _kernels.loop_viterbi(
        log_obs, st["starts"], st["lens"], st["log_self"], st["log_next"], entry
    )
    if not np.isfinite(score):
        raise NoPathError("no model fits within the utterance length")
    ids = np.asarray(model_set.token_ids, dtype=np.int32)
    return StatePath(utterance_id, ids[model_idx], states, score)


def force_align(model_set, frames, token_sequence, utterance_id=""):
    """Viterbi constrained to a given token order.

    The models are concatenated into one left-to-right chain whose junction
    arcs are the exit probabilities, so a single-token sequence degenerates
    to ``viterbi_decode`` exactly.
    """
    frames = np.asarray(frames, dtype=np.float64)
    models = [model_set.model_for(tid) for tid in token_sequence]
    if not models:
        raise ConfigError("empty token sequence")
    total = sum(h.n_states for h in models)
    if total > frames.shape[0]:
        raise NoPathError(
            f"sequence needs {total} frames, utterance has {frames.shape[0]}"
        )
    cols = {}
    for h in models:
        if h.token_id not in cols:
            cols[h.token_id] = h.emission_loglik(frames)
    log_obs = np.concatenate([cols[h.token_id] for h in models], axis=1)
    log_self = np.concatenate([h.log_self for h in models])
    log_next = np.concatenate([h.log_next for h in models])
    states, score = _kernels.chain_viterbi(
        np.ascontiguousarray(log_obs), log_self, log_next
    )
    if not np.isfinite(score):
        raise NoPathError("no finite-score alignment")

    bounds = np.cumsum([h.n_states for h in models])
    seq_idx = np.searchsorted(bounds, states, side="right")
    offsets = np.concatenate(([0], bounds[:-1]))
    tokens = np.asarray([h.token_id for h in models], dtype=np.int32)[seq_idx]
    local_states = (states - offsets[seq_idx]).astype(np.int32)
    return StatePath(utterance_id, tokens, local_states, score)


def save_model_set(model_set, path):
    """Write the versioned binary model file (magic TKHM, little-endian)."""
    g = model_set.granularity
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(
            struct.pack(
                "<IIIdI",
                MODEL_VERSION,
                g.m,
                g.n,
                model_set.variance_floor,
                len(model_set.models),
            )
        )
        for h in model_set.models:
            f.write(struct.pack("<III", h.token_id, h.n_states, h.dim))
            f.write(h.means.astype("<f8").tobytes())
            f.write(h.variances.astype("<f8").tobytes())
            f.write(h.log_trans.astype("<f8").tobytes())


def load_model_set(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MODEL_MAGIC:
            raise ConfigError(f"not a model file (magic {magic!r})")
        version, m, n, floor, count = struct.unpack("<IIIdI", f.read(24))
        if version != MODEL_VERSION:
            raise ConfigError(f"unsupported model file version {version}")
        models = []
        for _ in range(count):
            tid, st, dim = struct.unpack("<III", f.read(12))
            means = np.frombuffer(f.read(8 * st * dim), dtype="<f8").reshape(st, dim)
            variances = np.frombuffer(f.read(8 * st * dim), dtype="<f8").reshape(
                st, dim
            )
            sz = (st + 1) * (st + 1)
            log_trans = np.frombuffer(f.read(8 * sz), dtype="<f8").reshape(
                st + 1, st + 1
            )
            models.append(TokenHmm(tid, means.copy(), variances.copy(), log_trans.copy()))
    return TokenHmmSet(GranularityConfig(m, n), models, floor)
