"""Command-line interface.

Subcommands: features, discover, discover-grid, synth, train-si, adapt,
evaluate.  Configuration files are flat key=value text; every command that
takes --config also accepts --dump-defaults to print the keys it reads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from .adaptation import (
    AdaptationConfig,
    FramePool,
    adapt_fdlr_baseline,
    adapt_lightly_supervised,
    adapt_ptdnn,
    adapt_speaker_code_baseline,
    prepare_targets,
)
from .archive import load_archive, save_archive
from .discovery import GranularityConfig, discover, save_labels
from .errors import TokadaptError
from .experiment import (
    ExperimentConfig,
    build_si_system,
    emit_report,
    run_experiment,
    SiSystem,
)
from .frontend import FrontendConfig, Stage, decode_wav, extract_features
from .hmm import load_model_set, save_model_set
from .network import FdlrTransform, load_model, save_model
from .synthetic import (
    CorpusPartition,
    SpeakerCorpus,
    SyntheticCorpus,
    SyntheticLanguageSpec,
    make_language,
    synthesize_corpus,
)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="tokadapt",
        description="Weakly supervised personalized acoustic modeling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="extract features from WAV files")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--stage", default="normalized",
                   choices=[s.value for s in Stage])
    p.add_argument("--dump-defaults", action="store_true")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("discover", help="discover one acoustic token set")
    p.add_argument("--features", required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--max-iters", type=int, default=20)
    p.add_argument("--threshold", type=float, default=0.01)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("discover-grid", help="discovery over a granularity grid")
    p.add_argument("--features", required=True)
    p.add_argument("--grid", required=True,
                   help="file with one `m n` pair per line")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_discover_grid)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--spec")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-defaults", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-si", help="build the speaker-independent system")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--dump-defaults", action="store_true")
    p.set_defaults(func=cmd_train_si)

    p = sub.add_parser("adapt", help="adapt the SI model to one speaker")
    p.add_argument("--method", required=True,
                   choices=["ptdnn", "fdlr", "spkcode", "lightly"])
    p.add_argument("--si", required=True, help="SI model path prefix")
    p.add_argument("--tokens", help="token model dir(s), comma separated")
    p.add_argument("--features", required=True, help="feature archive")
    p.add_argument("--transcripts", help="transcripts for the labeled list")
    p.add_argument("--labeled", required=True, help="utterance-id list file")
    p.add_argument("--unlabeled", required=True, help="utterance-id list file")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-defaults", action="store_true")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="run the full experiment grid")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--si", help="SI model path prefix (built if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="csv", choices=["csv", "json"])
    p.add_argument("--dump-defaults", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except TokadaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


# -- commands ----------------------------------------------------------------


def cmd_features(args):
    if args.dump_defaults:
        print(cfgmod.dump_defaults(FrontendConfig))
        return
    cfg = (
        cfgmod.load_frontend_config(cfgmod.parse_kv_file(args.config))
        if args.config
        else FrontendConfig()
    )
    stage = Stage(args.stage)
    names = sorted(
        f for f in os.listdir(args.in_dir) if f.lower().endswith(".wav")
    )
    if not names:
        print(f"error: no .wav files in {args.in_dir}", file=sys.stderr)
        return 1
    sequences = []
    for name in names:
        utt = decode_wav(os.path.join(args.in_dir, name))
        sequences.append(extract_features(utt, cfg, stage=stage))
    save_archive(sequences, args.out)
    print(f"wrote {len(sequences)} utterances to {args.out}")


def cmd_discover(args):
    corpus = load_archive(args.features)
    cfg = GranularityConfig(args.m, args.n)
    report = discover(corpus, cfg, args.seed, max_iters=args.max_iters,
                      threshold=args.threshold)
    os.makedirs(args.out, exist_ok=True)
    save_model_set(report.models, os.path.join(args.out, "tokens.tkhm"))
    save_labels(report.labels, os.path.join(args.out, "labels.txt"),
                granularity=cfg, seed=args.seed)
    summary = {
        "m": cfg.m,
        "n": cfg.n,
        "seed": args.seed,
        "converged": report.converged,
        "iterations": report.iterations_run,
        "changed_fractions": report.changed_fractions,
        "surviving_tokens": report.surviving_tokens,
    }
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(summary, f, indent=2)
    print(json.dumps(summary))


def cmd_discover_grid(args):
    corpus = load_archive(args.features)
    grid = []
    with open(args.grid) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if line:
                m, n = line.replace(",", " ").split()
                grid.append(GranularityConfig(int(m), int(n)))
    rows = []
    for g in grid:
        report = discover(corpus, g, args.seed)
        sub = os.path.join(args.out, f"m{g.m}_n{g.n}")
        os.makedirs(sub, exist_ok=True)
        save_model_set(report.models, os.path.join(sub, "tokens.tkhm"))
        save_labels(report.labels, os.path.join(sub, "labels.txt"),
                    granularity=g, seed=args.seed)
        rows.append(
            {"m": g.m, "n": g.n, "converged": report.converged,
             "iterations": report.iterations_run}
        )
        print(json.dumps(rows[-1]))
    with open(os.path.join(args.out, "grid.json"), "w") as f:
        json.dump(rows, f, indent=2)


def cmd_synth(args):
    if args.dump_defaults:
        print(cfgmod.dump_defaults(SyntheticLanguageSpec))
        return
    spec = (
        cfgmod.load_language_spec(cfgmod.parse_kv_file(args.spec))
        if args.spec
        else SyntheticLanguageSpec()
    )
    corpus = synthesize_corpus(spec, args.seed)
    write_corpus_dir(corpus, args.out, args.seed)
    n_utts = sum(
        len(s.utterances) for s in corpus.si_speakers + corpus.adapt_speakers
    )
    print(f"wrote {n_utts} utterances to {args.out}")


def cmd_train_si(args):
    if args.dump_defaults:
        print(cfgmod.dump_defaults(ExperimentConfig))
        print(cfgmod.dump_defaults(AdaptationConfig))
        return
    cfg = _experiment_config(args.config)
    corpus = read_corpus_dir(args.corpus)
    si = build_si_system(corpus, cfg)
    save_si_system(si, args.out)
    print(f"SI held-out frame accuracy: {si.heldout_frame_accuracy:.4f}")
    print(f"wrote {args.out}.ptdn and {args.out}.tkhm")


def cmd_adapt(args):
    if args.dump_defaults:
        print(cfgmod.dump_defaults(AdaptationConfig))
        return
    values = cfgmod.parse_kv_file(args.config) if args.config else {}
    acfg = cfgmod.load_adaptation_config(values)
    si_model = load_model(args.si + ".ptdn")
    phone_hmms = load_model_set(args.si + ".tkhm")
    features = load_archive(args.features)
    labeled = _read_list(args.labeled)
    unlabeled = _read_list(args.unlabeled)
    partition = CorpusPartition(labeled, unlabeled, [], [])
    partition.validate_disjoint()
    transcripts = _read_transcripts(args.transcripts) if args.transcripts else {}

    token_sets = []
    if args.tokens:
        for d in args.tokens.split(","):
            token_sets.append(load_model_set(os.path.join(d, "tokens.tkhm")))
    if args.method == "ptdnn" and not token_sets:
        print("error: --method ptdnn needs --tokens", file=sys.stderr)
        return 1

    pool = FramePool(
        {u: features[u] for u in labeled + unlabeled}
    )
    sets_for_targets = token_sets if args.method == "ptdnn" else []
    targets = prepare_targets(
        phone_hmms, sets_for_targets, partition, features, transcripts
    )
    if args.method == "ptdnn":
        model, _ = adapt_ptdnn(si_model, token_sets, targets, pool, acfg)
    elif args.method == "fdlr":
        model, _ = adapt_fdlr_baseline(si_model, targets, pool, acfg)
    elif args.method == "lightly":
        model, _ = adapt_lightly_supervised(
            si_model, phone_hmms, targets, pool, acfg,
            features={u: features[u] for u in unlabeled},
        )
    else:  # spkcode
        sc, _ = adapt_speaker_code_baseline(si_model, targets, pool, acfg)
        model = _fold_speaker_code(sc)
    save_model(model, args.out)
    print(f"wrote {args.out}")


def cmd_evaluate(args):
    if args.dump_defaults:
        print(cfgmod.dump_defaults(ExperimentConfig))
        print(cfgmod.dump_defaults(AdaptationConfig))
        return
    cfg = _experiment_config(args.config)
    corpus = read_corpus_dir(args.corpus)
    if args.si:
        si = load_si_system(args.si)
    else:
        si = build_si_system(corpus, cfg)
    report = run_experiment(cfg, corpus, si)
    paths = emit_report(report, args.out, fmt=args.format)
    for name, path in paths.items():
        print(f"{name}: {path}")
    for method in report.methods():
        print(
            f"{method}: frame={report.median(method, 'frame_accuracy'):.4f} "
            f"unit={report.median(method, 'unit_accuracy'):.4f}"
        )


# -- corpus directory layout --------------------------------------------------


def write_corpus_dir(corpus, out_dir, seed):
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "seed": seed,
        "spec": dataclasses.asdict(corpus.spec),
        "speakers": {},
    }
    for spk in corpus.si_speakers + corpus.adapt_speakers:
        save_archive(
            list(spk.utterances.values()),
            os.path.join(out_dir, f"features-{spk.speaker_id}.tkfa"),
        )
        rotation, bias = spk.transform
        np.savez(
            os.path.join(out_dir, f"truth-{spk.speaker_id}.npz"),
            rotation=rotation,
            bias=bias,
            **{f"align-{u}": a for u, a in spk.alignments.items()},
        )
        with open(
            os.path.join(out_dir, f"transcripts-{spk.speaker_id}.txt"), "w"
        ) as f:
            for u, phones in spk.transcripts.items():
                f.write(u + " " + " ".join(map(str, phones)) + "\n")
        meta["speakers"][spk.speaker_id] = {
            "splits": spk.splits,
            "role": "si" if spk.speaker_id.startswith("si") else "adapt",
        }
    with open(os.path.join(out_dir, "corpus.json"), "w") as f:
        json.dump(meta, f, indent=2)


def read_corpus_dir(path):
    with open(os.path.join(path, "corpus.json")) as f:
        meta = json.load(f)
    spec = SyntheticLanguageSpec(**meta["spec"])
    language = make_language(spec, meta["seed"])
    si_speakers, adapt_speakers = [], []
    for speaker_id, info in meta["speakers"].items():
        utterances = load_archive(
            os.path.join(path, f"features-{speaker_id}.tkfa")
        )
        transcripts = _read_transcripts(
            os.path.join(path, f"transcripts-{speaker_id}.txt")
        )
        data = np.load(os.path.join(path, f"truth-{speaker_id}.npz"))
        alignments = {
            k[len("align-"):]: data[k].astype(np.int32)
            for k in data.files
            if k.startswith("align-")
        }
        spk = SpeakerCorpus(
            speaker_id, utterances, transcripts, alignments,
            {k: list(v) for k, v in info["splits"].items()},
            (data["rotation"], data["bias"]),
        )
        (si_speakers if info["role"] == "si" else adapt_speakers).append(spk)
    return SyntheticCorpus(spec, language, si_speakers, adapt_speakers)


def save_si_system(si, prefix):
    si.model.metadata["heldout_frame_accuracy"] = si.heldout_frame_accuracy
    save_model(si.model, prefix + ".ptdn")
    save_model_set(si.phone_hmms, prefix + ".tkhm")


def load_si_system(prefix):
    model = load_model(prefix + ".ptdn")
    hmms = load_model_set(prefix + ".tkhm")
    return SiSystem(
        phone_hmms=hmms,
        model=model,
        states_per_phone=int(model.metadata["states_per_phone"]),
        heldout_frame_accuracy=float(
            model.metadata.get("heldout_frame_accuracy", float("nan"))
        ),
    )


def _fold_speaker_code(sc):
    """Bake the constant input correction into a full-mode input transform."""
    model = sc.base.clone()
    dim = model.fdlr.input_dim
    delta = sc.adapter @ sc.code
    model.fdlr = FdlrTransform(np.eye(dim), delta, mode="full")
    model.metadata["speaker_code"] = sc.code.tolist()
    return model


def _experiment_config(path):
    if not path:
        return ExperimentConfig()
    return cfgmod.load_experiment_config(cfgmod.parse_kv_file(path))


def _read_list(path):
    with open(path) as f:
        return [line.strip() for line in f if line.strip()]


def _read_transcripts(path):
    out = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if parts:
                out[parts[0]] = [int(p) for p in parts[1:]]
    return out


if __name__ == "__main__":
    sys.exit(main())
