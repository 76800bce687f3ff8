"""End-to-end experiment orchestration on the synthetic corpus.

Builds the speaker-independent system (phone HMMs plus a single-head
network), runs every configured adaptation method per seed against held-out
adaptation speakers, and scores frame accuracy and unit accuracy (the
word-accuracy analogue over phone sequences) against the generator's ground
truth.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adaptation import (
    AdaptationConfig,
    FramePool,
    adapt_fdlr_baseline,
    adapt_lightly_supervised,
    adapt_ptdnn,
    adapt_speaker_code_baseline,
    prepare_targets,
    token_state_encoder,
)
from .discovery import discover
from .errors import ConfigError, NoPathError, NumericsError
from .hmm import (
    GranularityConfig,
    TokenHmmSet,
    baum_welch_update,
    force_align,
    init_flat_start,
    loop_decode_scores,
)
from .metrics import frame_accuracy, unit_accuracy, unit_error_rate
from .network import PHONEME_HEAD, LossWeights, PtdnnModel, fuse_posteriors
from .synthetic import make_partition

log = logging.getLogger(__name__)

KNOWN_METHODS = ("si", "fdlr", "spkcode", "lightly", "ptdnn", "ptdnn_multi",
                 "fusion")


@dataclass(frozen=True)
class ExperimentConfig:
    labeled_budget: int = 50
    granularity: GranularityConfig = field(
        default_factory=lambda: GranularityConfig(3, 8)
    )
    multi_granularities: tuple = (
        GranularityConfig(2, 8),
        GranularityConfig(3, 8),
        GranularityConfig(5, 12),
    )
    methods: tuple = ("si", "fdlr", "ptdnn", "fusion")
    seeds: tuple = (0, 1, 2, 3, 4)
    fusion_alpha_grid: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    baseline_epochs: int = 60
    baseline_lr: float = 0.02
    si_hidden: tuple = (128, 128, 128)
    si_epochs: int = 30
    si_lr: float = 0.3
    si_seed: int = 12345
    insertion_penalty: float = 0.0
    eval_utterances: int = 0  # 0: use the full dev/test splits

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("need at least one seed")
        unknown = set(self.methods) - set(KNOWN_METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}")
        if self.labeled_budget < 1:
            raise ConfigError("labeled budget must be >= 1")


@dataclass
class SiSystem:
    phone_hmms: TokenHmmSet
    model: PtdnnModel
    states_per_phone: int
    heldout_frame_accuracy: float


# -- SI construction ---------------------------------------------------------


def train_phone_hmms(features, transcripts, states_per_phone, n_phones,
                     align_iters=4, bw_iters=2, variance_floor=None):
    """Embedded training of monophone HMMs from transcribed utterances.

    Flat start from uniform time-splitting, then alternating forced
    alignment and per-phone Baum-Welch passes.
    """
    if variance_floor is None:
        stacked = np.concatenate([f.frames for f in features.values()])
        variance_floor = 1e-3 * float(stacked.var(axis=0).mean())

    segments = {p: [] for p in range(n_phones)}
    for utt_id, f in features.items():
        bounds = np.linspace(0, f.n_frames, len(transcripts[utt_id]) + 1)
        bounds = np.round(bounds).astype(int)
        for phone, a, b in zip(transcripts[utt_id], bounds, bounds[1:]):
            if b > a:
                segments[phone].append(f.frames[a:b])
    models = []
    for p in range(n_phones):
        h = init_flat_start(segments[p], states_per_phone, variance_floor)
        h.token_id = p
        models.append(h)
    cfg = GranularityConfig(states_per_phone, max(n_phones, 2))
    hmms = TokenHmmSet(cfg, models, variance_floor)

    for _ in range(align_iters):
        segments = {p: [] for p in range(n_phones)}
        for utt_id, f in features.items():
            try:
                path = force_align(hmms, f.frames, transcripts[utt_id], utt_id)
            except NoPathError:
                continue
            for phone, a, b in path.occupancies():
                segments[phone].append(f.frames[a:b])
        models = []
        for p in range(n_phones):
            h = hmms.model_for(p)
            for _ in range(bw_iters):
                if segments[p]:
                    h = baum_welch_update(h, segments[p])
                    h.variances = np.maximum(h.variances, variance_floor)
                    h.token_id = p
            models.append(h)
        hmms = TokenHmmSet(cfg, models, variance_floor)
    return hmms


def align_corpus(hmms, features, transcripts):
    """Forced per-frame state targets; unalignable utterances dropped."""
    offsets = token_state_encoder(hmms)
    out = {}
    for utt_id, f in features.items():
        try:
            path = force_align(hmms, f.frames, transcripts[utt_id], utt_id)
        except NoPathError:
            log.warning("SI alignment failed for %s", utt_id)
            continue
        base = np.array([offsets[int(t)] for t in path.tokens], dtype=np.int32)
        out[utt_id] = base + path.states.astype(np.int32)
    return out


def build_si_system(corpus, cfg):
    """Phone HMMs plus the speaker-independent network, trained on the
    SI speakers; 10% of utterances held out for the recorded accuracy."""
    spec = corpus.spec
    features, transcripts = {}, {}
    for spk in corpus.si_speakers:
        for utt_id in spk.split_ids("train"):
            features[utt_id] = spk.utterances[utt_id]
            transcripts[utt_id] = spk.transcripts[utt_id]
    hmms = train_phone_hmms(
        features, transcripts, spec.states_per_phone, spec.n_phones
    )
    targets = align_corpus(hmms, features, transcripts)

    ids = sorted(targets)
    rng = np.random.default_rng(cfg.si_seed)
    order = rng.permutation(len(ids))
    n_heldout = max(1, len(ids) // 10)
    heldout = [ids[i] for i in order[:n_heldout]]
    train = [ids[i] for i in order[n_heldout:]]

    pool = FramePool({u: features[u] for u in ids})
    model = PtdnnModel.build(
        input_dim=pool.X.shape[1],
        hidden_dims=list(cfg.si_hidden),
        head_inventories={PHONEME_HEAD: spec.n_states},
        seed=cfg.si_seed,
    )
    model.set_frozen(["fdlr"])  # identity transform is part of the SI system
    from .adaptation import run_training

    rows = pool.rows(train)
    cols = {PHONEME_HEAD: pool.gather_targets(targets, train)}
    run_training(
        model,
        [(pool.X[rows], cols, "labeled")],
        cfg.si_epochs,
        cfg.si_lr,
        LossWeights(1.0, 0.0),
        cfg.adaptation.batch_size,
        seed=cfg.si_seed,
        momentum=cfg.adaptation.momentum,
        stage="si",
    )
    counts = np.bincount(
        np.concatenate([targets[u] for u in train]), minlength=spec.n_states
    ).astype(np.float64)
    model.metadata["state_log_priors"] = np.log(
        np.maximum(counts, 1.0) / counts.sum()
    ).tolist()
    model.metadata["states_per_phone"] = spec.states_per_phone
    model.metadata["n_phones"] = spec.n_phones

    ho_rows = pool.rows(heldout)
    post = model.forward(pool.X[ho_rows])[PHONEME_HEAD]
    acc = frame_accuracy(
        post.argmax(axis=1), pool.gather_targets(targets, heldout)
    )
    if not np.isfinite(acc):
        raise NumericsError("SI training diverged")
    return SiSystem(hmms, model, spec.states_per_phone, float(acc))


# -- evaluation --------------------------------------------------------------


def posteriors_for(model, pool, ids):
    rows = pool.rows(ids)
    return model.forward(pool.X[rows])[PHONEME_HEAD]


def eval_frame_accuracy(posteriors, speaker, ids):
    truth = np.concatenate([speaker.alignments[u] for u in ids])
    return frame_accuracy(posteriors.argmax(axis=1), truth)


def decode_phones(posteriors, phone_hmms, log_priors, states_per_phone,
                  insertion_penalty=0.0):
    """Hybrid decode: posterior/prior scores through a free phone loop."""
    scores = np.log(np.maximum(posteriors, 1e-300)) - log_priors
    path = loop_decode_scores(phone_hmms, scores, insertion_penalty)
    return [tok for tok, _, _ in path.occupancies()]


def eval_unit_accuracy(model_forward, speaker, ids, phone_hmms, log_priors,
                       states_per_phone, pool, insertion_penalty=0.0):
    """Mean per-utterance unit accuracy (1 - UER, clamped at 0)."""
    scores = []
    for utt_id in ids:
        post = model_forward(pool.X[pool.slices[utt_id]])
        decoded = decode_phones(post, phone_hmms, log_priors, states_per_phone,
                                insertion_penalty)
        scores.append(unit_accuracy(decoded, speaker.transcripts[utt_id]))
    return float(np.mean(scores))


# -- orchestration -----------------------------------------------------------


@dataclass
class MetricsReport:
    """Per-(method, seed) metrics plus aggregate medians and diagnostics."""

    cells: dict = field(default_factory=dict)  # (method, seed) -> metrics dict
    discovery: dict = field(default_factory=dict)  # seed -> diagnostics
    si_heldout_accuracy: float = float("nan")
    config: dict = field(default_factory=dict)

    def add(self, method, seed, **metrics):
        self.cells[(method, seed)] = dict(metrics)

    def methods(self):
        return sorted({m for m, _ in self.cells})

    def seeds(self):
        return sorted({s for _, s in self.cells})

    def median(self, method, metric):
        vals = [
            v[metric]
            for (m, s), v in self.cells.items()
            if m == method and metric in v and v[metric] is not None
        ]
        return float(np.median(vals)) if vals else None

    def validate_complete(self, methods, seeds):
        for m in methods:
            for s in seeds:
                assert (m, s) in self.cells, f"missing cell ({m}, {s})"


def _forward_fn(model):
    return lambda X: model.forward(X)[PHONEME_HEAD]


def _fused_forward(model_a, model_b, alpha):
    def fn(X):
        return fuse_posteriors(
            model_a.forward(X)[PHONEME_HEAD], model_b.forward(X)[PHONEME_HEAD],
            alpha,
        )

    return fn


def run_experiment(cfg, corpus, si_system, progress=None):
    """Run every configured (method, seed) cell and collect metrics.

    Seed i adapts to speaker i mod n_adapt_speakers with training seed i;
    fusion weights are picked on the dev split.
    """
    report = MetricsReport(config={"labeled_budget": cfg.labeled_budget})
    report.si_heldout_accuracy = si_system.heldout_frame_accuracy
    needs_tokens = bool({"ptdnn", "ptdnn_multi", "fusion"} & set(cfg.methods))
    for seed in cfg.seeds:
        speaker = corpus.adapt_speakers[seed % len(corpus.adapt_speakers)]
        cells = run_methods_for_seed(
            cfg, corpus, si_system, speaker, seed,
            needs_tokens=needs_tokens, report=report,
        )
        for method, metrics in cells.items():
            report.add(method, seed, **metrics)
        if progress:
            progress(seed, cells)
    report.validate_complete(cfg.methods, cfg.seeds)
    return report


def run_methods_for_seed(cfg, corpus, si_system, speaker, seed, needs_tokens,
                         report=None):
    """All configured methods for one (speaker, seed) cell."""
    t_start = time.time()
    partition = make_partition(speaker, cfg.labeled_budget, seed)
    eval_ids = {
        "dev": partition.dev[: cfg.eval_utterances or None],
        "test": partition.test[: cfg.eval_utterances or None],
    }
    pool = FramePool(speaker.utterances)
    adapt_features = {
        u: speaker.utterances[u] for u in partition.labeled + partition.unlabeled
    }
    acfg = replace(cfg.adaptation, shuffle_seed=seed)
    log_priors = np.asarray(si_system.model.metadata["state_log_priors"])
    sp = si_system.states_per_phone

    def evaluate(forward_fn, split="test"):
        ids = eval_ids[split]
        post = np.concatenate([forward_fn(pool.X[pool.slices[u]]) for u in ids])
        facc = eval_frame_accuracy(post, speaker, ids)
        uacc = eval_unit_accuracy(
            forward_fn, speaker, ids, si_system.phone_hmms, log_priors, sp,
            pool, cfg.insertion_penalty,
        )
        return facc, uacc

    cells = {}
    models = {}

    def record(method, forward_fn, extra=None):
        facc, uacc = evaluate(forward_fn)
        cells[method] = {
            "frame_accuracy": facc,
            "unit_accuracy": uacc,
            **(extra or {}),
        }

    if "si" in cfg.methods:
        record("si", _forward_fn(si_system.model))

    token_sets = []
    if needs_tokens:
        reports = []
        for i, g in enumerate(
            [cfg.granularity]
            if "ptdnn_multi" not in cfg.methods
            else list(dict.fromkeys((cfg.granularity,) + tuple(cfg.multi_granularities)))
        ):
            rep = discover(
                adapt_features, g, seed,
                insertion_penalty=cfg.insertion_penalty,
            )
            reports.append(rep)
        token_sets = {r.granularity: r.models for r in reports}
        if report is not None:
            report.discovery[seed] = [
                {
                    "m": r.granularity.m,
                    "n": r.granularity.n,
                    "converged": r.converged,
                    "iterations": r.iterations_run,
                    "surviving_tokens": r.surviving_tokens,
                }
                for r in reports
            ]

    def targets_for(sets):
        return prepare_targets(
            si_system.phone_hmms, sets, partition,
            speaker.utterances, speaker.transcripts, cfg.insertion_penalty,
        )

    base_targets = targets_for([])  # phoneme-only targets for baselines

    if "fdlr" in cfg.methods:
        model, _ = adapt_fdlr_baseline(
            si_system.model, base_targets, pool, acfg,
            epochs=cfg.baseline_epochs, lr=cfg.baseline_lr,
        )
        models["fdlr"] = model
        record("fdlr", _forward_fn(model))

    if "spkcode" in cfg.methods:
        sc, _ = adapt_speaker_code_baseline(
            si_system.model, base_targets, pool, acfg,
            epochs=cfg.baseline_epochs, lr=cfg.baseline_lr, seed=seed,
        )
        record("spkcode", lambda X: sc.forward(X)[PHONEME_HEAD])

    if "lightly" in cfg.methods:
        model, _ = adapt_lightly_supervised(
            si_system.model, si_system.phone_hmms, base_targets, pool, acfg,
            features=adapt_features,
            epochs=cfg.baseline_epochs, lr=cfg.baseline_lr,
        )
        record("lightly", _forward_fn(model))

    if "ptdnn" in cfg.methods or "fusion" in cfg.methods:
        sets = [token_sets[cfg.granularity]]
        targets = targets_for(sets)
        model, stage_reports = adapt_ptdnn(
            si_system.model, sets, targets, pool, acfg, head_seed=seed
        )
        models["ptdnn"] = model
        if "ptdnn" in cfg.methods:
            record("ptdnn", _forward_fn(model))

    if "ptdnn_multi" in cfg.methods:
        sets = [token_sets[g] for g in token_sets]
        targets = targets_for(sets)
        model, _ = adapt_ptdnn(
            si_system.model, sets, targets, pool, acfg, head_seed=seed
        )
        record("ptdnn_multi", _forward_fn(model))

    if "fusion" in cfg.methods:
        if "fdlr" not in models:
            fdlr_model, _ = adapt_fdlr_baseline(
                si_system.model, base_targets, pool, acfg,
                epochs=cfg.baseline_epochs, lr=cfg.baseline_lr,
            )
            models["fdlr"] = fdlr_model
        best_alpha, best_dev = None, -1.0
        for alpha in cfg.fusion_alpha_grid:
            fn = _fused_forward(models["ptdnn"], models["fdlr"], alpha)
            ids = eval_ids["dev"]
            post = np.concatenate(
                [fn(pool.X[pool.slices[u]]) for u in ids]
            )
            dev_acc = eval_frame_accuracy(post, speaker, ids)
            if dev_acc > best_dev:
                best_dev, best_alpha = dev_acc, alpha
        record(
            "fusion",
            _fused_forward(models["ptdnn"], models["fdlr"], best_alpha),
            extra={"alpha": best_alpha, "dev_frame_accuracy": best_dev},
        )

    for metrics in cells.values():
        metrics["wall_time_s"] = time.time() - t_start
    return cells


# -- report emission ---------------------------------------------------------


def emit_report(report, out_dir, fmt="csv", budgets=None, granularity_rows=None):
    """Write the comparison tables; missing cells become explicit NA."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    if fmt not in ("csv", "json"):
        raise ConfigError(f"unknown report format {fmt!r}")

    rows = []
    for method in report.methods():
        rows.append(
            {
                "method": method,
                "frame_accuracy_median": _fmt(report.median(method, "frame_accuracy")),
                "unit_accuracy_median": _fmt(report.median(method, "unit_accuracy")),
                "seeds": len(report.seeds()),
            }
        )
    paths["table1"] = _write_table(
        os.path.join(out_dir, "table1"), fmt,
        ["method", "frame_accuracy_median", "unit_accuracy_median", "seeds"],
        rows,
    )

    if budgets:
        methods = sorted({m for b in budgets.values() for m in b.methods()})
        rows = []
        for method in methods:
            row = {"method": method}
            for budget, rep in sorted(budgets.items()):
                med = rep.median(method, "frame_accuracy")
                row[f"frame_accuracy_{budget}"] = _fmt(med)
            rows.append(row)
        paths["table2"] = _write_table(
            os.path.join(out_dir, "table2"), fmt,
            ["method"] + [f"frame_accuracy_{b}" for b in sorted(budgets)],
            rows,
        )

    if granularity_rows is not None:
        rows = [
            {
                "m": r["m"],
                "n": r["n"],
                "converged": r["converged"],
                "unit_accuracy_median": _fmt(
                    r["unit_accuracy_median"] if r["converged"] else None
                ),
            }
            for r in granularity_rows
        ]
        paths["fig2"] = _write_table(
            os.path.join(out_dir, "fig2"), fmt,
            ["m", "n", "converged", "unit_accuracy_median"],
            rows,
        )

    cells = [
        {"method": m, "seed": s, **v} for (m, s), v in sorted(report.cells.items())
    ]
    with open(os.path.join(out_dir, "cells.json"), "w", encoding="utf-8") as f:
        json.dump(
            {
                "si_heldout_accuracy": report.si_heldout_accuracy,
                "config": report.config,
                "cells": cells,
                "discovery": report.discovery,
            },
            f,
            indent=2,
            default=float,
        )
    paths["cells"] = os.path.join(out_dir, "cells.json")
    return paths


def _fmt(value):
    return "NA" if value is None else value


def _write_table(stem, fmt, fieldnames, rows):
    if fmt == "json":
        path = stem + ".json"
        with open(path, "w", encoding="utf-8") as f:
            json.dump(rows, f, indent=2, default=float)
        return path
    path = stem + ".csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return path
