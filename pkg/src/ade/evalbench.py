"""Classification metrics, anchor-count ablation sweeps, latency timing."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import distill as distill_mod
from . import pipeline as pipe
from .codebook import build_vp, lookup
from .errors import ConfigurationError, DataError
from .rng import SplitMix64


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray  # (C, C) rows = true class, cols = predicted

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "confusion": self.confusion.tolist(),
        }


def classification_metrics(preds, labels, n_classes: int) -> MetricsReport:
    """Accuracy plus macro-averaged precision/recall/F1.

    Per-class rates define 0/0 as 0; macro averages weight classes
    equally regardless of support.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.size == 0 or preds.shape != labels.shape:
        raise DataError("predictions and labels must be equal-length and non-empty")
    if preds.max() >= n_classes or labels.max() >= n_classes or min(
            preds.min(), labels.min()) < 0:
        raise DataError("class id outside [0, n_classes)")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)

    tp = np.diag(confusion).astype(np.float64)
    pred_count = confusion.sum(axis=0).astype(np.float64)
    true_count = confusion.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred_count, out=np.zeros_like(tp),
                          where=pred_count > 0)
    recall = np.divide(tp, true_count, out=np.zeros_like(tp),
                       where=true_count > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp),
                   where=denom > 0)
    return MetricsReport(
        accuracy=float(tp.sum() / preds.size),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        confusion=confusion,
    )


def evaluate_model(model, token_ids, attn_mask, labels) -> MetricsReport:
    logits = pipe.predict_logits(model, token_ids, attn_mask)
    return classification_metrics(logits.argmax(axis=1), labels,
                                  model.config.n_classes)


# ---------------------------------------------------------------------------
# ablation sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepCell:
    anchor_count: int
    use_sat: bool
    seed: int
    metrics: MetricsReport | None
    runtime_s: float
    error: str = ""


@dataclass
class SweepResult:
    cells: list = field(default_factory=list)
    bayes: data_mod.BayesReport | None = None

    def row(self, anchor_count: int, use_sat: bool) -> dict:
        group = [c for c in self.cells
                 if c.anchor_count == anchor_count and c.use_sat == use_sat]
        ok = [c for c in group if c.metrics is not None]
        agg = {
            "anchors": anchor_count,
            "sat": use_sat,
            "seeds": len(group),
            "failed": len(group) - len(ok),
        }
        for name in ("accuracy", "macro_f1", "macro_precision", "macro_recall"):
            agg[name] = (float(np.mean([getattr(c.metrics, name) for c in ok]))
                         if ok else float("nan"))
        return agg

    def rows(self) -> list:
        keys = sorted({(c.anchor_count, c.use_sat) for c in self.cells},
                      key=lambda kv: (kv[0], not kv[1]))
        return [self.row(k, s) for k, s in keys]


@dataclass
class SweepConfig:
    task: data_mod.SynthTaskSpec = field(default_factory=data_mod.SynthTaskSpec)
    d: int = 32
    heads: int = 4
    l_max: int = 16
    tau: float = 0.2
    dropout: float = 0.1
    distill_steps: int = 500
    distill_lr: float = 3e-3
    l1: float = 3e-2
    train: pipe.TrainConfig = field(default_factory=lambda: pipe.TrainConfig(
        lr=3e-3, batch_size=32, warmup_steps=50, total_steps=700))


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("ADE_THREADS", "1")))
    except ValueError:
        return 1


def _run_cell(payload):
    (cfg, anchor_count, use_sat, seed, cb_parts, anchors_values,
     train_arrays, test_arrays) = payload
    start = time.perf_counter()
    try:
        from .codebook import AnchorMatrix, SparseCodebook
        cb = SparseCodebook(*cb_parts)
        model = pipe.build_model(
            cb, AnchorMatrix(anchors_values),
            pipe.AdeConfig(d=cfg.d, heads=cfg.heads,
                           n_classes=cfg.task.n_classes, l_max=cfg.l_max,
                           tau=cfg.tau, dropout=cfg.dropout, use_sat=use_sat,
                           seed=seed))
        tcfg = pipe.TrainConfig(**{**cfg.train.__dict__,
                                   "seed": seed, "use_sat": use_sat})
        pipe.train_classifier(model, *train_arrays, tcfg)
        metrics = evaluate_model(model, *test_arrays)
        return SweepCell(anchor_count, use_sat, seed, metrics,
                         time.perf_counter() - start)
    except Exception as exc:  # cell failure must not kill the sweep
        return SweepCell(anchor_count, use_sat, seed, None,
                         time.perf_counter() - start, error=str(exc))


def run_ablation_sweep(cfg: SweepConfig, anchor_counts, seeds) -> SweepResult:
    """Train and evaluate every (K, with/without attention, seed) cell on
    the synthetic task; emits per-row aggregates mirroring the published
    ablation layout. Individual cell failures are recorded, not raised."""
    anchor_counts = list(anchor_counts)
    seeds = list(seeds)
    if not anchor_counts or not seeds:
        raise ConfigurationError("sweep needs at least one K and one seed")

    train_c, test_c, bayes = data_mod.synth_polysemy(cfg.task)
    vocab = data_mod.build_vocab(train_c, cfg.task.vocab_size + 2)
    train_arrays = data_mod.encode_corpus(train_c, vocab, cfg.l_max)
    test_arrays = data_mod.encode_corpus(test_c, vocab, cfg.l_max)

    payloads = []
    for k in anchor_counts:
        teacher = distill_mod.synthetic_teacher(vocab.size, cfg.d,
                                                n_latent=min(k, vocab.size),
                                                seed=cfg.task.seed)
        anchors, transform, _ = distill_mod.learn_anchors(
            teacher, distill_mod.DistillConfig(
                anchor_count=k, steps=cfg.distill_steps, lr=cfg.distill_lr,
                l1=cfg.l1, seed=cfg.task.seed))
        cb = build_vp(transform, cfg.tau)
        cb_parts = (cb.n_vocab, cb.anchor_count, cb.indices, cb.weights,
                    cb.offsets)
        for use_sat in (True, False):
            for seed in seeds:
                payloads.append((cfg, k, use_sat, seed, cb_parts,
                                 anchors.values, train_arrays, test_arrays))

    workers = _worker_count()
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell, payloads))
    else:
        cells = [_run_cell(p) for p in payloads]
    return SweepResult(cells=cells, bayes=bayes)


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------

def latency_bench(model, batch: int = 32, seq_len: int = 128,
                  warmup_iters: int = 2, iters: int = 5, seed: int = 0) -> dict:
    """Median wall-clock per forward batch plus the anchor-expanded
    length actually processed. Numbers are hardware-relative."""
    if iters < 1:
        raise ConfigurationError("need at least one timed iteration")
    rng = SplitMix64(seed)
    seq_len = min(seq_len, model.config.l_max)
    ids = rng.integers(0, model.codebook.n_vocab, (batch, seq_len))
    mask = np.ones((batch, seq_len), dtype=bool)
    gs = lookup(model.codebook, model.anchors, ids, mask)
    expanded = int(gs.sub_lengths.sum())

    for _ in range(warmup_iters):
        pipe.forward(model, ids, mask)
    times = []
    for _ in range(iters):
        start = time.perf_counter()
        pipe.forward(model, ids, mask)
        times.append((time.perf_counter() - start) * 1000.0)
    ms = float(np.median(times))
    return {
        "ms_per_batch": ms,
        "samples_per_s": batch * 1000.0 / ms,
        "expanded_len": expanded,
        "batch": batch,
        "seq_len": seq_len,
        "iters": iters,
    }


def format_table(headers, rows) -> str:
    """Aligned plain-text table used by the command-line reports."""
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
