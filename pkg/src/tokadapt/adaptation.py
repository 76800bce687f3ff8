"""Speaker adaptation: the three-stage schedule and the classic baselines.

Stage 1 trains fresh token heads only (input transform, shared stack, and
phoneme head all frozen).  Stage 2 jointly optimizes the input transform and
every output head, drawing labeled and unlabeled mini-batches interleaved:
labeled batches use the weighted phoneme+token loss, unlabeled batches the
token-only loss.  Stage 3 fine-tunes the phoneme head alone on the labeled
data.  Baselines: input-transform-only adaptation, a learned speaker code,
and lightly supervised training on machine-generated transcriptions.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, NoPathError, TargetError
from .frontend import FrontendConfig, splice_frames
from .hmm import GranularityConfig, force_align, loop_decode_scores, token_loop_decode
from .network import (
    PHONEME_HEAD,
    LossWeights,
    PtdnnModel,
    multitask_loss,
    sgd_step,
    softmax,
)

log = logging.getLogger(__name__)

# multi-granularity default at full corpus scale; desk-scale harnesses pass
# their own, smaller grids
DEFAULT_MULTI_GRANULARITIES = (
    GranularityConfig(3, 50),
    GranularityConfig(5, 200),
    GranularityConfig(13, 50),
    GranularityConfig(13, 300),
)


@dataclass(frozen=True)
class AdaptationConfig:
    stage1_epochs: int = 100
    stage1_lr: float = 0.01
    stage2_epochs: int = 50
    stage2_lr: float = 1e-3
    stage3_epochs: int = 50
    stage3_lr: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 256
    shuffle_seed: int = 0
    momentum: float = 0.9
    stage3_unfreeze_fdlr: bool = False  # strict reading keeps it frozen

    def __post_init__(self):
        if min(self.stage1_epochs, self.stage2_epochs, self.stage3_epochs) < 0:
            raise ConfigError("epochs must be >= 0")
        if min(self.stage1_lr, self.stage2_lr, self.stage3_lr) <= 0:
            raise ConfigError("learning rates must be > 0")


@dataclass
class TargetSet:
    """Per-frame training targets.

    Phoneme-state targets exist for the labeled subset only; token-state
    targets (one dict per token head) cover every adaptation utterance.
    """

    phoneme: dict  # utt_id -> int32[T]
    token: dict  # head name -> utt_id -> int32[T]
    labeled_ids: list
    unlabeled_ids: list
    excluded_ids: list = field(default_factory=list)


@dataclass
class StageReport:
    stage: str
    epoch_losses: list
    epoch_components: list
    batch_log: list  # (mode, tuple of component names) per batch
    group_change_norms: dict
    wall_time_s: float


class FramePool:
    """Spliced frames for a set of utterances, indexable by utterance."""

    def __init__(self, features, frontend_cfg=None):
        cfg = frontend_cfg or FrontendConfig()
        self.slices = {}
        rows = []
        pos = 0
        for utt_id, f in features.items():
            spliced = splice_frames(f, cfg).frames
            rows.append(spliced)
            self.slices[utt_id] = slice(pos, pos + len(spliced))
            pos += len(spliced)
        self.X = np.concatenate(rows) if rows else np.zeros((0, 0))

    def rows(self, ids):
        return np.concatenate([np.arange(s.start, s.stop)
                               for s in (self.slices[u] for u in ids)])

    def gather_targets(self, per_utt, ids):
        return np.concatenate([per_utt[u] for u in ids])


def head_name(granularity):
    return f"token_m{granularity.m}_n{granularity.n}"


def token_state_encoder(model_set):
    """token_id -> offset of its state block in the set's stacked layout."""
    offsets = {}
    pos = 0
    for h in model_set.models:
        offsets[h.token_id] = pos
        pos += h.n_states
    return offsets


def encode_token_targets(path, offsets):
    base = np.array([offsets[int(t)] for t in path.tokens], dtype=np.int32)
    return base + path.states.astype(np.int32)


def prepare_targets(si_phone_hmms, token_sets, partition, features, transcripts,
                    insertion_penalty=0.0):
    """Phoneme targets by forced alignment, token targets by decoding.

    Labeled utterances that cannot be aligned (transcript longer than the
    utterance allows) are excluded and logged.
    """
    sp = si_phone_hmms.models[0].n_states
    phone_offsets = token_state_encoder(si_phone_hmms)
    phoneme = {}
    excluded = []
    for utt_id in partition.labeled:
        frames = features[utt_id].frames
        try:
            path = force_align(si_phone_hmms, frames, transcripts[utt_id], utt_id)
        except NoPathError:
            log.warning("cannot align %s; excluded from labeled targets", utt_id)
            excluded.append(utt_id)
            continue
        phoneme[utt_id] = encode_token_targets(path, phone_offsets)

    labeled = [u for u in partition.labeled if u not in excluded]
    all_ids = labeled + list(partition.unlabeled)
    token = {}
    for ts in token_sets:
        offsets = token_state_encoder(ts)
        per_utt = {}
        for utt_id in all_ids:
            path = token_loop_decode(
                ts, features[utt_id].frames, insertion_penalty, utterance_id=utt_id
            )
            per_utt[utt_id] = encode_token_targets(path, offsets)
        token[_unique_name(head_name(ts.granularity), token)] = per_utt
    return TargetSet(phoneme, token, labeled, list(partition.unlabeled), excluded)


def _unique_name(name, existing):
    if name not in existing:
        return name
    i = 2
    while f"{name}_{i}" in existing:
        i += 1
    return f"{name}_{i}"


def run_training(model, pools, epochs, learning_rate, weights, batch_size=256,
                 seed=0, momentum=0.9, stage=""):
    """Mini-batch SGD over one or more (rows, targets, mode) pools.

    Batches from all pools are shuffled together each epoch, so labeled and
    unlabeled batches interleave at the mini-batch level.
    """
    rng = np.random.default_rng(seed)
    before = {
        g: {k: v.copy() for k, v in model.group_params(g).items()}
        for g in model.group_names()
    }
    velocity = None
    epoch_losses, epoch_components, batch_log = [], [], []
    t0 = time.time()
    for _ in range(epochs):
        batches = []
        for pool_idx, (X, _, _) in enumerate(pools):
            order = rng.permutation(len(X))
            batches.extend(
                (pool_idx, order[i : i + batch_size])
                for i in range(0, len(X), batch_size)
            )
        rng.shuffle(batches)
        total = 0.0
        comp_sums = {}
        for pool_idx, idx in batches:
            X, targets, mode = pools[pool_idx]
            bt = {k: v[idx] for k, v in targets.items()}
            grads, loss, comps = model.backward(
                X[idx], bt, weights, mode, return_loss=True
            )
            model, velocity = sgd_step(
                model, grads, learning_rate, momentum, velocity
            )
            total += loss
            for k, v in comps.items():
                comp_sums[k] = comp_sums.get(k, 0.0) + v
            batch_log.append((mode, tuple(sorted(comps))))
        n = max(1, len(batches))
        epoch_losses.append(total / n)
        epoch_components.append({k: v / n for k, v in comp_sums.items()})
    change = {}
    for g in model.group_names():
        params = model.group_params(g)
        change[g] = float(
            np.sqrt(
                sum(np.sum((params[k] - before[g][k]) ** 2) for k in params)
            )
        )
    return StageReport(stage, epoch_losses, epoch_components, batch_log, change,
                       time.time() - t0)


def _token_pool(pool, targets, ids):
    rows = pool.rows(ids)
    cols = {
        name: np.concatenate([per_utt[u] for u in ids])
        for name, per_utt in targets.token.items()
    }
    return pool.X[rows], cols, "unlabeled"


def _labeled_pool(pool, targets):
    ids = targets.labeled_ids
    rows = pool.rows(ids)
    cols = {PHONEME_HEAD: np.concatenate([targets.phoneme[u] for u in ids])}
    for name, per_utt in targets.token.items():
        cols[name] = np.concatenate([per_utt[u] for u in ids])
    return pool.X[rows], cols, "labeled"


def stage1_initialize(model, targets, pool, cfg):
    """Train the fresh token heads only; everything else stays fixed."""
    if not targets.token:
        raise ConfigError("stage 1 needs at least one token head with targets")
    model.freeze_all_except([f"head:{n}" for n in targets.token])
    ids = targets.labeled_ids + targets.unlabeled_ids
    report = run_training(
        model,
        [_token_pool(pool, targets, ids)],
        cfg.stage1_epochs,
        cfg.stage1_lr,
        cfg.weights,
        cfg.batch_size,
        seed=cfg.shuffle_seed,
        momentum=cfg.momentum,
        stage="stage1",
    )
    return model, report


def stage2_joint_optimize(model, targets, pool, cfg):
    """Joint pass: input transform and all heads learn, shared stack fixed."""
    unfrozen = ["fdlr"] + [f"head:{n}" for n in model.head_names()]
    model.freeze_all_except(unfrozen)
    pools = [_labeled_pool(pool, targets)]
    if targets.unlabeled_ids:
        pools.append(_token_pool(pool, targets, targets.unlabeled_ids))
    else:
        log.warning("stage 2 without unlabeled data degenerates to labeled-only")
    report = run_training(
        model,
        pools,
        cfg.stage2_epochs,
        cfg.stage2_lr,
        cfg.weights,
        cfg.batch_size,
        seed=cfg.shuffle_seed + 1,
        momentum=cfg.momentum,
        stage="stage2",
    )
    return model, report


def stage3_transfer_back(model, targets, pool, cfg):
    """Fine-tune the phoneme head alone on the labeled subset."""
    unfrozen = [f"head:{PHONEME_HEAD}"]
    if cfg.stage3_unfreeze_fdlr:
        unfrozen.append("fdlr")
    model.freeze_all_except(unfrozen)
    report = run_training(
        model,
        [_labeled_pool(pool, targets)],
        cfg.stage3_epochs,
        cfg.stage3_lr,
        LossWeights(1.0, 0.0),
        cfg.batch_size,
        seed=cfg.shuffle_seed + 2,
        momentum=cfg.momentum,
        stage="stage3",
    )
    return model, report


def adapt_ptdnn(si_model, token_sets, targets, pool, cfg, head_seed=0):
    """Full three-stage adaptation starting from the SI network."""
    model = si_model.clone()
    for i, ts in enumerate(token_sets):
        name = _unique_name(head_name(ts.granularity), model.heads)
        model.add_head(name, ts.state_count(), seed=head_seed + i)
    have = sorted(targets.token)
    want = sorted(model.token_head_names())
    if have != want:
        raise TargetError(f"token targets {have} do not match heads {want}")
    model, r1 = stage1_initialize(model, targets, pool, cfg)
    model, r2 = stage2_joint_optimize(model, targets, pool, cfg)
    model, r3 = stage3_transfer_back(model, targets, pool, cfg)
    return model, [r1, r2, r3]


# -- baselines ---------------------------------------------------------------


def adapt_fdlr_baseline(si_model, targets, pool, cfg, epochs=None, lr=None):
    """Train the input transform only, on the labeled subset only."""
    model = si_model.clone()
    model.freeze_all_except(["fdlr"])
    report = run_training(
        model,
        [_labeled_pool(pool, targets)],
        cfg.stage1_epochs if epochs is None else epochs,
        cfg.stage1_lr if lr is None else lr,
        LossWeights(1.0, 0.0),
        cfg.batch_size,
        seed=cfg.shuffle_seed,
        momentum=cfg.momentum,
        stage="fdlr-baseline",
    )
    return model, report


class SpeakerCodeModel:
    """Frozen base network plus a learned per-speaker input correction.

    The spliced input is shifted by adapter @ code before entering the base
    network; with a zero code and zero adapter the output equals the base
    network's exactly.
    """

    def __init__(self, base, code_dim=50, seed=0, adapter_scale=0.01):
        rng = np.random.default_rng(seed)
        self.base = base
        dim = base.fdlr.input_dim
        # zero code, small random adapter: the all-zero saddle point has no
        # code gradient, so the adapter starts slightly off it
        self.adapter = rng.normal(0.0, adapter_scale, size=(dim, code_dim))
        self.code = np.zeros(code_dim)

    def corrected(self, batch):
        return np.asarray(batch, dtype=np.float64) + self.adapter @ self.code

    def forward(self, batch):
        return self.base.forward(self.corrected(batch))

    def gradients(self, batch, targets, weights):
        frozen = dict(self.base.frozen)
        self.base.set_frozen(self.base.group_names())
        _, loss, comps, d_x = self.base.backward(
            self.corrected(batch), targets, weights, "labeled",
            return_loss=True, return_input_grad=True,
        )
        self.base.frozen = frozen
        pooled = d_x.sum(axis=0)
        return {
            "adapter": np.outer(pooled, self.code),
            "code": self.adapter.T @ pooled,
        }, loss, comps


def adapt_speaker_code_baseline(si_model, targets, pool, cfg, code_dim=50,
                                epochs=None, lr=None, seed=0):
    """Learn a speaker code and its input adapter; base network frozen."""
    sc = SpeakerCodeModel(si_model, code_dim=code_dim, seed=seed)
    X, cols, _ = _labeled_pool(pool, targets)
    epochs = cfg.stage1_epochs if epochs is None else epochs
    lr = cfg.stage1_lr if lr is None else lr
    rng = np.random.default_rng(cfg.shuffle_seed)
    velocity = {"adapter": np.zeros_like(sc.adapter), "code": np.zeros_like(sc.code)}
    losses = []
    weights = LossWeights(1.0, 0.0)
    t0 = time.time()
    for _ in range(epochs):
        order = rng.permutation(len(X))
        total, n_batches = 0.0, 0
        for i in range(0, len(X), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            bt = {k: v[idx] for k, v in cols.items()}
            grads, loss, _ = sc.gradients(X[idx], bt, weights)
            for key in ("adapter", "code"):
                v = cfg.momentum * velocity[key] - lr * grads[key]
                velocity[key] = v
                if key == "adapter":
                    sc.adapter += v
                else:
                    sc.code += v
            total += loss
            n_batches += 1
        losses.append(total / max(1, n_batches))
    report = StageReport("speaker-code", losses, [], [], {}, time.time() - t0)
    return sc, report


def generate_pseudo_labels(si_model, phone_hmms, features, ids, pool=None):
    """Machine-generated phone-state targets for unlabeled utterances.

    Per-frame posteriors from the SI network become scaled log-likelihoods
    (posterior over prior), then a free phone loop Viterbi-decodes them.
    Utterances with no decoding path are dropped.
    """
    log_priors = np.asarray(
        si_model.metadata.get(
            "state_log_priors",
            np.full(si_model.head_inventory(PHONEME_HEAD),
                    -np.log(si_model.head_inventory(PHONEME_HEAD))).tolist(),
        )
    )
    offsets = token_state_encoder(phone_hmms)
    out = {}
    for utt_id in ids:
        if pool is not None:
            X = pool.X[pool.slices[utt_id]]
        else:
            X = splice_frames(features[utt_id]).frames
        post = si_model.forward(X)[PHONEME_HEAD]
        scores = np.log(np.maximum(post, 1e-300)) - log_priors
        try:
            path = loop_decode_scores(phone_hmms, scores, utterance_id=utt_id)
        except NoPathError:
            log.warning("pseudo-labeling failed for %s; dropped", utt_id)
            continue
        out[utt_id] = encode_token_targets(path, offsets)
    return out


def adapt_lightly_supervised(si_model, phone_hmms, targets, pool, cfg,
                             features=None, epochs=None, lr=None):
    """Adapt on true plus machine-generated transcriptions.

    Pseudo phone-state targets for the unlabeled utterances are merged with
    the true labeled targets; the input transform and the phoneme head
    train on the union.
    """
    pseudo = generate_pseudo_labels(
        si_model, phone_hmms, features, targets.unlabeled_ids, pool=pool
    )
    merged = dict(targets.phoneme)
    merged.update(pseudo)
    ids = targets.labeled_ids + sorted(pseudo)
    rows = pool.rows(ids)
    cols = {PHONEME_HEAD: np.concatenate([merged[u] for u in ids])}
    model = si_model.clone()
    model.freeze_all_except(["fdlr", f"head:{PHONEME_HEAD}"])
    report = run_training(
        model,
        [(pool.X[rows], cols, "labeled")],
        cfg.stage1_epochs if epochs is None else epochs,
        cfg.stage1_lr if lr is None else lr,
        LossWeights(1.0, 0.0),
        cfg.batch_size,
        seed=cfg.shuffle_seed,
        momentum=cfg.momentum,
        stage="lightly-supervised",
    )
    return model, report
