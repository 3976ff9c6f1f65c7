"""Command-line entry point: ``convemo {synth,featurize,train,eval,analyze,gradcheck}``.

Exit codes: 0 success, 1 failed self-check, 2 config/validation error,
3 missing input, 4 capacity error, 5 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .augmentation import DcaConfig, dca_conversations, label_diversity_entropy, slice_conversation
from .corpus import (
    CapacityError, Corpus, Fold, align_labels_to_frames, load_corpus, loso_splits, parse_segments,
    save_corpus, synth_corpus, SynthConfig, write_segments,
)
from .features import FeatureFileError, MfccConfig, WavFormatError, mfcc, read_wav, write_features
from .metrics import (
    ConfusionMatrix, heterogeneous_fraction, inertia_report, report_from_confusion, report_to_dict,
    trigram_probs, write_inertia_csv, write_matrix_csv, write_per_class_csv,
)
from .model import CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .train import REGIMES, DivergenceError, TrainerConfig, evaluate, train

logger = logging.getLogger("convemo")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_MISSING, EXIT_CAPACITY, EXIT_DIVERGED = 0, 1, 2, 3, 4, 5
JOBS_ENV = "CONVEMO_JOBS"


class MissingInputError(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# config helpers


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_overrides(sections: dict[str, dict], overrides: list[str]) -> None:
    """Apply ``section.key=value`` flags in place; values are parsed as JSON when possible."""
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects section.key=value, got {item!r}")
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise ValueError(f"--set key must start with one of {sorted(sections)}, got {key!r}")
        sections[section][name] = _parse_value(value)


def _read_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{p}: invalid JSON ({exc})") from None


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_manifest(out: Path, command: str, config: dict, seed: int | None, fingerprint: str | None,
                   artifacts: list[str], started: float) -> Path:
    manifest = {
        "command": command,
        "config": json.loads(canonical_json(config)),
        "seed": seed,
        "corpus_fingerprint": fingerprint,
        "artifacts": sorted(artifacts),
        "wall_time_s": round(time.time() - started, 3),
        "version": __version__,
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_corpus(path) -> Corpus:
    root = Path(path)
    if not (root / "manifest.json").exists() or not (root / "segments.jsonl").exists():
        raise MissingInputError(f"{root} is not a corpus directory (needs manifest.json and segments.jsonl)")
    return load_corpus(root)


def _write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "dev_micro_f1", "dev_weighted_f1"])
        for row in history:
            w.writerow([row["epoch"], f"{row['loss']:.6f}",
                        *(f"{row[k]:.6f}" if k in row else "" for k in ("dev_micro_f1", "dev_weighted_f1"))])


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    raw = _read_json(args.config)
    sections = {"synth": raw}
    _apply_overrides(sections, args.set)
    for flag in ("seed", "inertia", "num_sessions"):
        value = getattr(args, flag)
        if value is not None:
            raw[flag] = value
    cfg = SynthConfig.from_dict(raw)
    corpus = synth_corpus(cfg)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} conversations in {len(corpus.sessions)} sessions to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# featurize


def cmd_featurize(args) -> int:
    wav_dir, out = Path(args.wav_dir), Path(args.out)
    segments = Path(args.segments)
    if not segments.exists():
        raise MissingInputError(f"segments file not found: {segments}")
    conversations = parse_segments(segments)
    missing = sorted(c.id for c in conversations if not (wav_dir / f"{c.id}.wav").exists())
    if missing:
        raise MissingInputError(f"missing WAV files for conversations: {', '.join(missing)}")
    cfg = MfccConfig(frame_length_ms=args.frame_length_ms, frame_shift_ms=args.frame_shift_ms,
                     num_mel_filters=args.num_filters, num_ceps=args.num_ceps)
    (out / "features").mkdir(parents=True, exist_ok=True)
    files = {}
    for c in conversations:
        rel = f"features/{c.id}.fmx"
        target = out / rel
        files[c.id] = rel
        if target.exists() and not args.force:
            print(f"{c.id}: cached (use --force to recompute)")
            continue
        write_features(target, mfcc(read_wav(wav_dir / f"{c.id}.wav"), cfg))
    write_segments(out / "segments.jsonl", conversations)
    manifest = {"conversations": files, "frame_length_ms": cfg.frame_length_ms, "synth_config": None,
                "mfcc_config": dataclasses.asdict(cfg)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"featurized {len(conversations)} conversations into {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _train_configs(args, corpus: Corpus) -> tuple[ModelConfig, TrainerConfig]:
    raw = _read_json(args.config)
    unknown = set(raw) - {"model", "trainer"}
    if unknown:
        raise ValueError(f"config file may only contain 'model' and 'trainer' sections, got {sorted(unknown)}")
    sections = {"model": dict(raw.get("model", {})), "trainer": dict(raw.get("trainer", {}))}
    _apply_overrides(sections, args.set)
    trainer = sections["trainer"]
    if args.regime is not None:
        trainer["regime"] = args.regime
    for flag in ("epochs", "seed", "train_len"):
        if getattr(args, flag) is not None:
            trainer[flag] = getattr(args, flag)
    if args.strict_deterministic:
        trainer["strict_deterministic"] = True
    model = sections["model"]
    model.setdefault("input_dim", corpus.conversations[0].features.num_features)
    model.setdefault("seed", trainer.get("seed", 0))
    tcfg = TrainerConfig.from_dict(trainer)
    mcfg = ModelConfig.from_dict(model)
    if tcfg.train_len > mcfg.max_positions:
        raise ValueError(f"trainer.train_len {tcfg.train_len} exceeds model.max_positions {mcfg.max_positions}")
    return mcfg, tcfg


def _run_fold(corpus_dir: str, fold_index: int, fold: Fold, mcfg: ModelConfig, tcfg: TrainerConfig,
              out: str) -> dict:
    """Train on one fold and score its test session; returns artifact paths and the test confusion."""
    corpus = load_corpus(corpus_dir)
    fold_dir = Path(out) / f"fold{fold_index}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    result = train(corpus.by_session(fold.train), corpus.by_session([fold.dev]), mcfg, tcfg)
    save_checkpoint(fold_dir / "checkpoint.cerc", result.model)
    _write_history(fold_dir / "history.csv", result.history)
    report = evaluate(result.model, corpus.by_session([fold.test]), tcfg.chunk_len, tcfg.eval_chunk_overlap)
    report.write_json(fold_dir / "metrics.json")
    write_matrix_csv(fold_dir / "confusion.csv", report.confusion.counts)
    write_per_class_csv(fold_dir / "per_class.csv", report)
    names = ["checkpoint.cerc", "history.csv", "metrics.json", "confusion.csv", "per_class.csv"]
    return {"fold": fold_index, "test": fold.test, "dev": fold.dev, "train": list(fold.train),
            "best_epoch": result.best_epoch, "weighted_f1": report.weighted_f1, "micro_f1": report.micro_f1,
            "confusion": report.confusion.counts.tolist(), "ignored": report.ignored_frames,
            "artifacts": [f"fold{fold_index}/{n}" for n in names]}


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        raise ValueError(f"{JOBS_ENV} must be an integer, got {os.environ[JOBS_ENV]!r}") from None


def cmd_train(args) -> int:
    started = time.time()
    corpus = _load_corpus(args.corpus)
    mcfg, tcfg = _train_configs(args, corpus)
    folds = loso_splits(corpus)
    if args.all_folds:
        chosen = list(range(len(folds)))
    else:
        k = args.fold or 0
        if not 0 <= k < len(folds):
            raise ValueError(f"--fold must be in [0, {len(folds) - 1}], got {k}")
        chosen = [k]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = 1 if tcfg.strict_deterministic else (args.jobs or _default_jobs())
    work = [(str(args.corpus), k, folds[k], mcfg, tcfg, str(out)) for k in chosen]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, *zip(*work)))
    else:
        results = [_run_fold(*w) for w in work]

    artifacts = [a for r in results for a in r["artifacts"]]
    for r in results:
        print(f"fold {r['fold']} test={r['test']} weighted_f1={r['weighted_f1']:.4f} micro_f1={r['micro_f1']:.4f}")
    summary = {"folds": [{k: v for k, v in r.items() if k != "artifacts"} for r in results]}
    if len(results) > 1:
        pooled = report_from_confusion(ConfusionMatrix(np.sum([r["confusion"] for r in results], axis=0)),
                                       sum(r["ignored"] for r in results))
        pooled.write_json(out / "pooled_metrics.json")
        write_per_class_csv(out / "pooled_per_class.csv", pooled)
        artifacts += ["pooled_metrics.json", "pooled_per_class.csv"]
        summary["pooled"] = {"weighted_f1": pooled.weighted_f1, "micro_f1": pooled.micro_f1}
        print(f"pooled weighted_f1={pooled.weighted_f1:.4f} micro_f1={pooled.micro_f1:.4f}")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    artifacts.append("summary.json")
    config = {"model": dataclasses.asdict(mcfg), "trainer": dataclasses.asdict(tcfg), "folds": chosen,
              "corpus": str(args.corpus)}
    write_manifest(out, "train", config, tcfg.seed, corpus.fingerprint(), artifacts, started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    started = time.time()
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise MissingInputError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    corpus = _load_corpus(args.corpus)
    sessions = args.sessions or corpus.sessions
    unknown = sorted(set(sessions) - set(corpus.sessions))
    if unknown:
        raise ValueError(f"unknown session(s) {unknown}; corpus has {corpus.sessions}")
    chunk = args.chunk_len or model.config.max_positions
    report = evaluate(model, corpus.by_session(sessions), chunk, args.overlap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "metrics.json")
    write_matrix_csv(out / "confusion.csv", report.confusion.counts)
    write_matrix_csv(out / "confusion_normalized.csv", report.confusion.normalized())
    artifacts = ["metrics.json", "confusion.csv", "confusion_normalized.csv"]
    print(f"weighted_f1={report.weighted_f1:.4f} micro_f1={report.micro_f1:.4f} frames={report.frames_evaluated}")
    if args.per_class:
        write_per_class_csv(out / "per_class.csv", report)
        artifacts.append("per_class.csv")
        print((out / "per_class.csv").read_text(), end="")
    config = {"checkpoint": str(ckpt), "corpus": str(args.corpus), "sessions": list(sessions),
              "chunk_len": chunk, "overlap": args.overlap}
    write_manifest(out, "eval", config, None, corpus.fingerprint(), artifacts, started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze


def diversity_by_window(conversations, window: int, samples: int, seed: int) -> dict:
    """Mean label-diversity entropy of plain windows and of DCA pairs built from half windows."""
    rng = np.random.default_rng(seed)
    plain = [label_diversity_entropy(slice_conversation(conversations[rng.integers(len(conversations))],
                                                        window, rng).labels) for _ in range(samples)]
    cfg = DcaConfig(batch_conversations=min(6, len(conversations)), slice_len=window // 2, train_len=window)
    dca = []
    while len(dca) < samples:
        group = [conversations[i] for i in rng.choice(len(conversations), cfg.batch_conversations, replace=False)]
        dca.extend(label_diversity_entropy(s.labels) for s in dca_conversations(group, cfg, rng))
    return {"window": window, "plain_mean_bits": float(np.mean(plain)),
            "dca_conversations_mean_bits": float(np.mean(dca[:samples])), "samples": samples}


def cmd_analyze(args) -> int:
    started = time.time()
    src, out = Path(args.input), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if (src / "metrics.json").exists() and not (src / "segments.jsonl").exists():
        metrics = json.loads((src / "metrics.json").read_text())
        cm = ConfusionMatrix(np.asarray(metrics["confusion"], dtype=np.int64))
        write_matrix_csv(out / "confusion_normalized.csv", cm.normalized())
        write_manifest(out, "analyze", {"input": str(src)}, None, None, ["confusion_normalized.csv"], started)
        print(f"wrote row-normalized confusion to {out / 'confusion_normalized.csv'}")
        return EXIT_OK
    corpus = _load_corpus(src)
    convs = corpus.conversations
    inertia = inertia_report(convs)
    write_inertia_csv(out / "inertia.csv", inertia)
    table = trigram_probs(convs)
    write_matrix_csv(out / "trigram.csv", table, row_label="central")
    summary = {"inertia": {k: v for k, v in report_to_dict(inertia).items() if k != "rows"},
               "heterogeneous_fraction": dict(zip(
                   ["Angry", "Frustration", "Happy", "Neutral", "Sad"],
                   [None if np.isnan(x) else float(x) for x in heterogeneous_fraction(table)]))}
    artifacts = ["inertia.csv", "trigram.csv", "analysis.json"]
    if args.windows:
        summary["diversity"] = [diversity_by_window(convs, w, args.samples, args.seed) for w in args.windows]
        for d in summary["diversity"]:
            print(f"window {d['window']}: plain {d['plain_mean_bits']:.4f} bits, "
                  f"dca-conversations {d['dca_conversations_mean_bits']:.4f} bits")
    (out / "analysis.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{len(convs)} conversations, {inertia.flagged_fraction:.1%} with a dominant emotion "
          f"above {inertia.threshold:.0%} of duration")
    write_manifest(out, "analyze", {"input": str(src), "windows": args.windows, "samples": args.samples},
                   args.seed, corpus.fingerprint(), artifacts, started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    from . import autograd as ag
    from .verify import ELEMENTARY_CASES, run_gradchecks

    if args.perturb is not None and not callable(getattr(ag, args.perturb, None)):
        raise ValueError(f"--perturb must name a differentiable op, e.g. one of {sorted(ELEMENTARY_CASES)}")
    results = run_gradchecks(args.cases, args.model_seeds, perturb=args.perturb, seed=args.seed)
    ok = all(r.passed for r in results)
    if args.json:
        print(json.dumps({"passed": ok, "checks": [
            {"name": r.name, "max_error": r.max_error, "tolerance": r.tolerance, "passed": r.passed}
            for r in results]}, indent=2))
    else:
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24s} max_rel_err={r.max_error:.3e}  tol={r.tolerance:g}")
        failed = [r.name for r in results if not r.passed]
        print("all gradient checks passed" if ok else f"failed: {', '.join(failed)}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="convemo", description="Frame-level conversational emotion recognition.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--config", help="JSON file with SynthConfig fields")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--inertia", type=float)
    s.add_argument("--num-sessions", type=int)
    s.add_argument("--set", action="append", metavar="synth.KEY=VALUE", help="override any config field")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("featurize", help="compute MFCC feature files from WAV recordings")
    f.add_argument("--wav-dir", required=True, help="directory holding <conversation id>.wav")
    f.add_argument("--segments", required=True, help="segment JSONL file")
    f.add_argument("--out", required=True)
    f.add_argument("--frame-length-ms", type=float, default=25.0)
    f.add_argument("--frame-shift-ms", type=int, default=10)
    f.add_argument("--num-filters", type=int, default=26)
    f.add_argument("--num-ceps", type=int, default=13)
    f.add_argument("--force", action="store_true", help="recompute existing feature files")
    f.set_defaults(func=cmd_featurize)

    t = sub.add_parser("train", help="train on leave-one-session-out folds")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file with 'model' and 'trainer' sections")
    t.add_argument("--regime", choices=list(dict.fromkeys([r.replace("_", "-") for r in REGIMES] + list(REGIMES))),
                   metavar="{" + ",".join(r.replace("_", "-") for r in REGIMES) + "}")
    folds = t.add_mutually_exclusive_group()
    folds.add_argument("--fold", type=int, help="train a single fold (default 0)")
    folds.add_argument("--all-folds", action="store_true")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--train-len", type=int)
    t.add_argument("--strict-deterministic", action="store_true", help="single-threaded, serial folds")
    t.add_argument("--jobs", type=int, help=f"parallel folds (default ${JOBS_ENV} or 1)")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a model.* or trainer.* field")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on corpus sessions")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--sessions", nargs="+", help="sessions to score (default: all)")
    e.add_argument("--chunk-len", type=int, help="default: the model's max_positions")
    e.add_argument("--overlap", type=int, default=0)
    e.add_argument("--per-class", action="store_true", help="also emit the per-class f1 row")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="inertia, trigram and diversity reports")
    a.add_argument("input", help="corpus directory or eval output directory")
    a.add_argument("--out", required=True)
    a.add_argument("--windows", type=int, nargs="+", help="window lengths for the label-diversity report")
    a.add_argument("--samples", type=int, default=1000)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_analyze)

    g = sub.add_parser("gradcheck", help="finite-difference checks of every op and the model")
    g.add_argument("--json", action="store_true")
    g.add_argument("--cases", type=int, default=20, help="random cases per op")
    g.add_argument("--model-seeds", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--perturb", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, CheckpointError, FeatureFileError, WavFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
