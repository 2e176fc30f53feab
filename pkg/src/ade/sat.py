"""Single-layer anchor-reweighting transformer block, pooler, classifier.

The block is attention-only: Q/K/V/O projections with biases, one
residual connection, and one trailing layer norm. There is no
feed-forward sublayer, so its trainable size is exactly 4*(d*d + d);
the layer norm's 2*d parameters are accounted as their own component.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigurationError
from .gpe import PositionalTable, grouped_pe
from .rng import SplitMix64


@dataclass
class SatParams:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    heads: int


@dataclass
class PoolerParams:
    score_w: np.ndarray  # (d,)
    score_b: np.ndarray  # scalar


@dataclass
class HeadParams:
    w: np.ndarray  # (C, d)
    b: np.ndarray  # (C,)


def init_sat(d: int, heads: int, rng: SplitMix64) -> SatParams:
    if d % heads != 0:
        raise ConfigurationError(f"width {d} not divisible by {heads} heads")
    std = 1.0 / np.sqrt(d)
    mk = lambda: rng.normal((d, d), scale=std)
    return SatParams(
        wq=mk(), bq=np.zeros(d), wk=mk(), bk=np.zeros(d),
        wv=mk(), bv=np.zeros(d), wo=mk(), bo=np.zeros(d),
        ln_gain=np.ones(d), ln_bias=np.zeros(d), heads=heads,
    )


def init_pooler(d: int, rng: SplitMix64) -> PoolerParams:
    return PoolerParams(score_w=rng.normal((d,), scale=1.0 / np.sqrt(d)),
                        score_b=np.zeros(()))


def init_head(d: int, n_classes: int, rng: SplitMix64) -> HeadParams:
    return HeadParams(w=rng.normal((n_classes, d), scale=1.0 / np.sqrt(d)),
                      b=np.zeros(n_classes))


def _project(x, w, bias, b, t, d, tape):
    flat = nc.reshape(x, (b * t, d), tape=tape)
    out = nc.add(nc.matmul(flat, w, tape=tape), bias, tape=tape)
    return nc.reshape(out, (b, t, d), tape=tape)


def _split_heads(x, b, t, h, dk, tape):
    return nc.transpose(nc.reshape(x, (b, t, h, dk), tape=tape),
                        (0, 2, 1, 3), tape=tape)


def attention(x, mask, p: SatParams, tape=None):
    """Multi-head scaled dot-product attention over valid key positions.

    Masked positions get -inf scores on the key side, so they receive
    exactly zero weight and cannot leak into valid outputs.
    """
    xv = nc.value_of(x)
    b, t, d = xv.shape
    h = p.heads
    dk = d // h

    q = _split_heads(_project(x, p.wq, p.bq, b, t, d, tape), b, t, h, dk, tape)
    k = _split_heads(_project(x, p.wk, p.bk, b, t, d, tape), b, t, h, dk, tape)
    v = _split_heads(_project(x, p.wv, p.bv, b, t, d, tape), b, t, h, dk, tape)

    kt = nc.transpose(k, (0, 1, 3, 2), tape=tape)
    scores = nc.scale(nc.matmul(q, kt, tape=tape), 1.0 / np.sqrt(dk), tape=tape)
    key_mask = np.asarray(mask, dtype=bool)[:, None, None, :]  # (b,1,1,t)
    probs = nc.masked_softmax(scores, key_mask, tape=tape)

    ctx = nc.matmul(probs, v, tape=tape)                       # (b,h,t,dk)
    merged = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3), tape=tape),
                        (b * t, d), tape=tape)
    out = nc.add(nc.matmul(merged, p.wo, tape=tape), p.bo, tape=tape)
    return nc.reshape(out, (b, t, d), tape=tape)


def batch_grouped_pe(table: PositionalTable, sub_lengths, t_max: int) -> np.ndarray:
    """Per-row grouped positional signal, zero at padding slots."""
    s = np.asarray(sub_lengths)
    out = np.zeros((s.shape[0], t_max, table.d), dtype=np.float64)
    for bi in range(s.shape[0]):
        row = s[bi][s[bi] > 0]
        if row.size == 0:
            continue
        pe = grouped_pe(table, row)
        out[bi, : pe.shape[0]] = pe
    return out


def sat_forward(x, sub_lengths, mask, p: SatParams, pe: PositionalTable,
                tape=None, ln_eps=1e-12):
    """Grouped PE add, masked attention with residual, then layer norm."""
    xv = nc.value_of(x)
    pe_rows = batch_grouped_pe(pe, sub_lengths, xv.shape[1])
    with_pe = nc.add(x, pe_rows, tape=tape)
    attended = attention(with_pe, mask, p, tape=tape)
    resid = nc.add(with_pe, attended, tape=tape)
    return nc.layer_norm(resid, p.ln_gain, p.ln_bias, eps=ln_eps, tape=tape)


def pool(x, mask, pp: PoolerParams, tape=None):
    """Score-weighted average of valid positions: softmax(w.x + b) mix."""
    xv = nc.value_of(x)
    b, t, d = xv.shape
    flat = nc.reshape(x, (b * t, d), tape=tape)
    scores = nc.add(nc.matmul(flat, nc.reshape(pp.score_w, (d, 1), tape=tape),
                              tape=tape),
                    pp.score_b, tape=tape)
    scores = nc.reshape(scores, (b, t), tape=tape)
    weights = nc.masked_softmax(scores, np.asarray(mask, dtype=bool), tape=tape)
    return nc.weighted_sum(weights, x, tape=tape)


def classify(pooled, hp: HeadParams, tape=None):
    """Affine map onto class logits."""
    wt = nc.transpose(hp.w, (1, 0), tape=tape)
    return nc.add(nc.matmul(pooled, wt, tape=tape), hp.b, tape=tape)


def count_params(d: int, n_classes: int, anchor_count: int = 0,
                 total_weights: int = 0, trainable_embeddings: bool = False) -> dict:
    """Per-component parameter table with totals split by trainability."""
    table = {
        "sat": 4 * (d * d + d),
        "layer_norm": 2 * d,
        "pooler": d + 1,
        "classifier": n_classes * (d + 1),
    }
    embedding = anchor_count * d + total_weights
    trainable = sum(table.values())
    frozen = 0
    if embedding:
        table["embedding"] = embedding
        if trainable_embeddings:
            trainable += embedding
        else:
            frozen += embedding
    table["total_trainable"] = trainable
    table["total_frozen"] = frozen
    return table
