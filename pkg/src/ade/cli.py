"""Command-line entry point orchestrating all stages.

Exit codes: 0 success, 2 configuration error, 3 numeric/training
failure, 4 data failure. Configuration precedence is defaults < config
file (JSON) < explicit flags, and every artifact-producing command
writes a sidecar manifest with the effective config, seed, input hashes,
artifact hashes, and timings.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import distill as distill_mod
from . import evalbench
from . import pipeline as pipe
from .codebook import (build_vp, compression_report, load_codebook,
                       save_codebook)
from .errors import (ConfigurationError, CorruptionError, DataError,
                     TrainingError)
from .manifest import file_sha256, manifest_path, write_manifest
from .sat import count_params

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_DATA = 4


def _add_task_flags(p: argparse.ArgumentParser):
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--task-vocab", type=int, default=None)
    p.add_argument("--triggers", type=int, default=None)
    p.add_argument("--cues-per-sense", type=int, default=None)
    p.add_argument("--min-len", type=int, default=None)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--trigger-position", type=int, default=None,
                   help="fixed trigger word position; -1 = random per sample")


def _task_spec(args, seed: int) -> data_mod.SynthTaskSpec:
    spec = data_mod.SynthTaskSpec(seed=seed)
    overrides = {
        "n_classes": args.classes, "vocab_size": args.task_vocab,
        "n_triggers": args.triggers, "cues_per_sense": args.cues_per_sense,
        "min_len": args.min_len, "max_len": args.max_len,
        "noise_rate": args.noise, "n_train": args.n_train,
        "n_test": args.n_test,
    }
    for key, val in overrides.items():
        if val is not None:
            setattr(spec, key, val)
    if args.trigger_position is not None:
        spec.trigger_position = (None if args.trigger_position < 0
                                 else args.trigger_position)
    return spec


def _apply_config_file(args: argparse.Namespace, parser_defaults: dict):
    """Layer: parser defaults < config file < explicitly passed flags."""
    if not getattr(args, "config", None):
        return args
    loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
    for key, val in loaded.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ConfigurationError(f"unknown config key '{key}'")
        if getattr(args, attr) == parser_defaults.get(attr):
            setattr(args, attr, val)
    return args


def _effective_config(args) -> dict:
    skip = {"func", "config"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _write_run_manifest(artifact, command, args, inputs: dict, started: float):
    write_manifest(manifest_path(artifact), {
        "command": command,
        "config": _effective_config(args),
        "seed": getattr(args, "seed", None),
        "input_hashes": inputs,
        "artifact_hashes": {Path(artifact).name: file_sha256(artifact)},
        "elapsed_s": round(time.time() - started, 3),
    })


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_distill(args) -> int:
    started = time.time()
    inputs = {}
    if args.teacher:
        teacher = distill_mod.load_teacher(args.teacher)
        inputs[Path(args.teacher).name] = file_sha256(args.teacher)
    elif args.synthetic:
        teacher = distill_mod.synthetic_teacher(
            args.n_vocab, args.d, n_latent=args.latent or args.anchors,
            seed=args.seed)
    else:
        raise ConfigurationError("provide --teacher PATH or --synthetic")

    cfg = distill_mod.DistillConfig(
        anchor_count=args.anchors, steps=args.steps, lr=args.lr, l1=args.l1,
        batch_size=args.batch_size, seed=args.seed)
    anchors, transform, history = distill_mod.learn_anchors(teacher, cfg)
    cb = build_vp(transform, args.tau)
    save_codebook(args.out, cb, anchors, args.tau)

    cosine = distill_mod.mean_cosine(anchors, transform, teacher)
    cards = cb.cardinalities
    print(f"final loss {history[-1]:.6f}  mean cosine {cosine:.4f}")
    print(f"cardinalities: mean {cards.mean():.2f}  max {cards.max()}  "
          f"vocab {cb.n_vocab}  anchors {cb.anchor_count}")
    inputs["teacher_hash"] = teacher.content_hash
    _write_run_manifest(args.out, "distill", args, inputs, started)
    return EXIT_OK


def cmd_synth_data(args) -> int:
    started = time.time()
    spec = _task_spec(args, args.seed)
    train, test, bayes = data_mod.synth_polysemy(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_mod.save_csv(out / "train.csv", train)
    data_mod.save_csv(out / "test.csv", test)
    report = {"context_aware_bayes": bayes.context_aware,
              "context_free_bayes": bayes.context_free,
              "noise_rate": bayes.noise_rate, "n_classes": bayes.n_classes}
    (out / "bayes.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report))
    _write_run_manifest(out / "train.csv", "synth-data", args,
                        {"test.csv": file_sha256(out / "test.csv")}, started)
    return EXIT_OK


def _load_datasets(args, seed):
    """Returns (train corpus, eval corpus or None, bayes or None, hashes)."""
    hashes = {}
    if args.synth_task:
        spec = _task_spec(args, seed)
        train, test, bayes = data_mod.synth_polysemy(spec)
        return train, test, bayes, hashes
    if not args.data:
        raise ConfigurationError("provide --data CSV or --synth-task")
    preset = data_mod.CSV_PRESETS[args.preset]
    train = data_mod.load_csv(args.data, has_header=args.has_header, **preset)
    hashes[Path(args.data).name] = file_sha256(args.data)
    test = None
    if args.eval_data:
        test = data_mod.load_csv(args.eval_data, has_header=args.has_header,
                                 **preset)
        hashes[Path(args.eval_data).name] = file_sha256(args.eval_data)
        if test.n_classes > train.n_classes:
            raise DataError("eval split has labels unseen in training")
        test.n_classes = train.n_classes
    return train, test, None, hashes


def cmd_train(args) -> int:
    started = time.time()
    train_corpus, eval_corpus, bayes, inputs = _load_datasets(args, args.seed)
    vocab = data_mod.build_vocab(train_corpus, args.vocab_size)
    ids, mask, labels = data_mod.encode_corpus(train_corpus, vocab, args.l_max)

    if args.codebook:
        cb, anchors, _tau = load_codebook(args.codebook)
        inputs[Path(args.codebook).name] = file_sha256(args.codebook)
        if cb.n_vocab != vocab.size:
            raise ConfigurationError(
                f"codebook vocab {cb.n_vocab} != data vocab {vocab.size}")
        if anchors.width != args.d:
            raise ConfigurationError(
                f"codebook width {anchors.width} != --d {args.d}")
    else:
        teacher = distill_mod.synthetic_teacher(
            vocab.size, args.d, n_latent=min(args.anchors, vocab.size),
            seed=args.seed)
        anchors_m, transform, _ = distill_mod.learn_anchors(
            teacher, distill_mod.DistillConfig(
                anchor_count=args.anchors, steps=args.distill_steps,
                lr=args.distill_lr, l1=args.l1, seed=args.seed))
        cb, anchors = build_vp(transform, args.tau), anchors_m

    config = pipe.AdeConfig(
        d=args.d, heads=args.heads, n_classes=train_corpus.n_classes,
        l_max=args.l_max, tau=args.tau, dropout=args.dropout,
        use_sat=not args.no_sat,
        trainable_embeddings=not args.freeze_embeddings, seed=args.seed)
    model = pipe.build_model(cb, anchors, config)
    tcfg = pipe.TrainConfig(
        lr=args.lr, batch_size=args.batch_size, warmup_steps=args.warmup,
        total_steps=args.steps, seed=args.seed, use_sat=not args.no_sat,
        trainable_embeddings=not args.freeze_embeddings)
    model, history = pipe.train_classifier(model, ids, mask, labels, tcfg)
    print(f"trained {len(history)} steps; final loss {history[-1][1]:.4f}")

    metrics_payload = None
    if eval_corpus is not None:
        eids, emask, elabels = data_mod.encode_corpus(eval_corpus, vocab,
                                                      args.l_max)
        metrics = evalbench.evaluate_model(model, eids, emask, elabels)
        metrics_payload = metrics.as_dict()
        if bayes is not None:
            metrics_payload["context_free_bayes"] = bayes.context_free
            metrics_payload["context_aware_bayes"] = bayes.context_aware
        print(f"eval accuracy {metrics.accuracy:.4f}  "
              f"macro-F1 {metrics.macro_f1:.4f}")

    pipe.checkpoint_save(model, args.out)
    if metrics_payload is not None:
        Path(str(args.out) + ".metrics.json").write_text(
            json.dumps(metrics_payload, indent=2) + "\n")
    inputs["dataset_hash"] = data_mod_hash(train_corpus)
    _write_run_manifest(args.out, "train", args, inputs, started)
    return EXIT_OK


def data_mod_hash(corpus: data_mod.Corpus) -> str:
    from .manifest import sha256_hex
    blob = "\x1e".join(f"{t}\x1f{int(l)}" for t, l in
                       zip(corpus.texts, corpus.labels))
    return sha256_hex(blob.encode("utf-8"))


def cmd_eval(args) -> int:
    model = pipe.checkpoint_load(args.model)
    train_corpus, eval_corpus, bayes, _ = _load_datasets(args, args.seed)
    corpus = eval_corpus if eval_corpus is not None else train_corpus
    vocab = data_mod.build_vocab(train_corpus, args.vocab_size)
    ids, mask, labels = data_mod.encode_corpus(corpus, vocab, model.config.l_max)
    metrics = evalbench.evaluate_model(model, ids, mask, labels)
    payload = metrics.as_dict()
    if bayes is not None:
        payload["context_free_bayes"] = bayes.context_free
    print(json.dumps(payload, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.time()
    anchor_counts = _int_list(args.k_list)
    seeds = _int_list(args.seeds)
    if not anchor_counts:
        raise ConfigurationError("empty K list")
    cfg = evalbench.SweepConfig(task=_task_spec(args, args.seed))
    cfg.d, cfg.heads, cfg.l_max = args.d, args.heads, args.l_max
    cfg.distill_steps, cfg.distill_lr = args.distill_steps, args.distill_lr
    cfg.train = pipe.TrainConfig(lr=args.lr, batch_size=args.batch_size,
                                 warmup_steps=args.warmup,
                                 total_steps=args.steps)
    result = evalbench.run_ablation_sweep(cfg, anchor_counts, seeds)

    rows = result.rows()
    table = evalbench.format_table(
        ["anchors", "sat", "accuracy", "f1", "precision", "recall", "failed"],
        [[r["anchors"], "yes" if r["sat"] else "no",
          f"{r['accuracy']:.4f}", f"{r['macro_f1']:.4f}",
          f"{r['macro_precision']:.4f}", f"{r['macro_recall']:.4f}",
          r["failed"]] for r in rows])
    print(table)
    print(f"context-free bayes {result.bayes.context_free:.4f}  "
          f"context-aware bayes {result.bayes.context_aware:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "rows": rows,
            "bayes": {"context_free": result.bayes.context_free,
                      "context_aware": result.bayes.context_aware},
            "cells": [{"anchors": c.anchor_count, "sat": c.use_sat,
                       "seed": c.seed, "runtime_s": round(c.runtime_s, 3),
                       "error": c.error,
                       "metrics": c.metrics.as_dict() if c.metrics else None}
                      for c in result.cells],
        }
        (out / "sweep.json").write_text(json.dumps(payload, indent=2) + "\n")
        (out / "sweep.txt").write_text(table + "\n")
        _write_run_manifest(out / "sweep.json", "sweep", args, {}, started)
    failed = sum(1 for c in result.cells if c.metrics is None)
    return EXIT_NUMERIC if failed == len(result.cells) else EXIT_OK


def cmd_report(args) -> int:
    if not args.params and not args.compression:
        raise ConfigurationError("choose --params and/or --compression")
    if args.params:
        table = count_params(d=args.d, n_classes=args.classes,
                             anchor_count=args.anchors or 0,
                             total_weights=int((args.avg_k or 0) * (args.vocab or 0)),
                             trainable_embeddings=not args.frozen)
        print(evalbench.format_table(
            ["component", "parameters"],
            [[k, f"{v:,}"] for k, v in table.items()]))
        if args.vocab:
            print(f"dense baseline embedding: {args.vocab * args.d:,} parameters")
    if args.compression:
        if not args.vocab or not args.anchors:
            raise ConfigurationError("--compression needs --vocab and --anchors")
        rep = compression_report(
            n_vocab=args.vocab, d=args.d, anchor_count=args.anchors,
            cardinalities=args.avg_k, index_bytes=args.index_bytes,
            weight_bytes=args.weight_bytes,
            cardinality_bytes=args.cardinality_bytes,
            baseline_params=args.baseline_params)
        print(evalbench.format_table(
            ["field", "value"],
            [["anchor params", f"{rep.anchor_params:,}"],
             ["storage (MB)", f"{rep.storage_mb:.2f}"],
             ["baseline (MB)", f"{rep.baseline_mb:.1f}"],
             ["ratio", f"{rep.ratio:.1f}x"],
             ["reduction", f"{rep.reduction_pct:.1f}%"]]))
    return EXIT_OK


def cmd_bench(args) -> int:
    model = pipe.checkpoint_load(args.model)
    report = evalbench.latency_bench(model, batch=args.batch,
                                     seq_len=args.seq_len,
                                     warmup_iters=args.warmup_iters,
                                     iters=args.iters, seed=args.seed)
    print(json.dumps(report, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


def _int_list(text: str) -> list:
    return [int(t) for t in text.split(",") if t.strip()] if text else []


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(
        prog="ade",
        description="sparse multi-anchor embeddings: distill, project, train, report")
    sub = root.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", type=str, default=None,
                       help="JSON file of flag defaults")

    p = sub.add_parser("distill", help="learn anchors from a teacher matrix")
    common(p)
    p.add_argument("--teacher", type=str, default=None)
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--n-vocab", type=int, default=1000)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--latent", type=int, default=None)
    p.add_argument("--anchors", type=int, default=16)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--l1", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("synth-data", help="generate the synthetic polysemy task")
    common(p)
    _add_task_flags(p)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_synth_data)

    def train_like(p, needs_out):
        common(p)
        _add_task_flags(p)
        p.add_argument("--synth-task", action="store_true")
        p.add_argument("--data", type=str, default=None)
        p.add_argument("--eval-data", type=str, default=None)
        p.add_argument("--preset", choices=sorted(data_mod.CSV_PRESETS),
                       default="plain")
        p.add_argument("--has-header", action="store_true")
        p.add_argument("--vocab-size", type=int, default=4096)
        if needs_out:
            p.add_argument("--codebook", type=str, default=None)
            p.add_argument("--anchors", type=int, default=16)
            p.add_argument("--tau", type=float, default=0.1)
            p.add_argument("--distill-steps", type=int, default=600)
            p.add_argument("--distill-lr", type=float, default=3e-3)
            p.add_argument("--l1", type=float, default=3e-2)
            p.add_argument("--d", type=int, default=32)
            p.add_argument("--heads", type=int, default=4)
            p.add_argument("--l-max", type=int, default=16)
            p.add_argument("--dropout", type=float, default=0.1)
            p.add_argument("--no-sat", action="store_true")
            p.add_argument("--freeze-embeddings", action="store_true")
            p.add_argument("--steps", type=int, default=2000)
            p.add_argument("--lr", type=float, default=3e-3)
            p.add_argument("--batch-size", type=int, default=32)
            p.add_argument("--warmup", type=int, default=100)
            p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("train", help="train the classifier end to end")
    train_like(p, needs_out=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    train_like(p, needs_out=False)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="anchor-count ablation sweep")
    common(p)
    _add_task_flags(p)
    p.add_argument("--k-list", type=str, required=True)
    p.add_argument("--seeds", type=str, default="0,1,2")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--l-max", type=int, default=16)
    p.add_argument("--distill-steps", type=int, default=500)
    p.add_argument("--distill-lr", type=float, default=3e-3)
    p.add_argument("--steps", type=int, default=700)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="parameter and compression accounting")
    common(p)
    p.add_argument("--params", action="store_true")
    p.add_argument("--compression", action="store_true")
    p.add_argument("--d", type=int, default=768)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--anchors", type=int, default=None)
    p.add_argument("--vocab", type=int, default=None)
    p.add_argument("--avg-k", type=float, default=8.4)
    p.add_argument("--frozen", action="store_true")
    p.add_argument("--index-bytes", type=int, default=4)
    p.add_argument("--weight-bytes", type=int, default=4)
    p.add_argument("--cardinality-bytes", type=int, default=2)
    p.add_argument("--baseline-params", type=int, default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", help="inference latency harness")
    common(p)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--warmup-iters", type=int, default=2)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=cmd_bench)

    return root


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    defaults = {a.dest: a.default for g in parser._subparsers._group_actions
                for a in g.choices[args.command]._actions}
    try:
        args = _apply_config_file(args, defaults)
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CorruptionError, FileNotFoundError) as exc:
        print(f"data failure: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
