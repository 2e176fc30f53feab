"""Sparse multi-anchor vocabulary: thresholding, lookup, composition.

A word is represented by a small set of anchor indices into a shared
anchor matrix plus one scalar weight per active anchor. Records are kept
in CSR-style flat arrays so that batched lookup is a pair of gathers.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigurationError, CorruptionError, DimensionError

_MAGIC = b"ADECB1"


@dataclass
class AnchorMatrix:
    """The shared pool of learnable anchor vectors."""

    values: np.ndarray  # (K, d) float64

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ConfigurationError(f"anchor matrix shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ConfigurationError("anchor matrix contains non-finite values")

    @property
    def anchor_count(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class SparseCodebook:
    """Per-word active anchor indices and weights, flat CSR layout.

    Word i owns indices[offsets[i]:offsets[i+1]] (strictly increasing)
    and the matching weights slice; its cardinality is the slice length.
    """

    n_vocab: int
    anchor_count: int
    indices: np.ndarray   # (total,) int64, sorted within each word
    weights: np.ndarray   # (total,) float64
    offsets: np.ndarray   # (n_vocab + 1,) int64

    @property
    def cardinalities(self) -> np.ndarray:
        return np.diff(self.offsets)

    def word(self, i: int):
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return self.indices[lo:hi], self.weights[lo:hi]


@dataclass
class FlattenedEmbedding:
    """Per-word anchors concatenated then zero-padded to K*d."""

    table: np.ndarray         # (N, K*d) float64
    cardinalities: np.ndarray  # (N,) int64
    width: int                # d


@dataclass
class GroupedSequence:
    """A batch of flattened anchor rows with the maps Alg-style lookup needs.

    One entry per retrieved anchor, in batch-then-word order. `pos_map`
    is the word position inside its sequence, `slot_map` the anchor slot
    inside the row's expanded sequence, `weight_slots` the position of
    the anchor's weight inside the codebook's flat weight array (-1 for
    the sentinel emitted on fully masked rows).
    """

    batch_size: int
    seq_len: int
    width: int
    anchor_ids: np.ndarray    # (M,) int64 rows into the anchor matrix
    weight_slots: np.ndarray  # (M,) int64
    anchors: np.ndarray       # (M, d) float64, gathered anchor rows
    weights: np.ndarray       # (M,) float64
    batch_map: np.ndarray     # (M,) int64
    pos_map: np.ndarray       # (M,) int64 word positions
    slot_map: np.ndarray      # (M,) int64 expanded-sequence positions
    sub_lengths: np.ndarray   # (B, L) int64, zero for masked-off words
    mask: np.ndarray          # (B, T_max) bool padding mask
    t_max: int = field(default=0)

    @property
    def global_id(self) -> np.ndarray:
        return self.batch_map * self.seq_len + self.pos_map

    @property
    def expanded_lengths(self) -> np.ndarray:
        return self.sub_lengths.sum(axis=1).clip(min=1)


def build_vp(transform: np.ndarray, tau: float) -> SparseCodebook:
    """Threshold a dense word-to-anchor transform into sparse records.

    Anchors with transform weight >= tau stay active; a word whose row
    falls entirely below the threshold keeps its single largest-weight
    anchor so every cardinality is at least one.
    """
    t = np.asarray(transform, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] == 0 or t.shape[1] == 0:
        raise ConfigurationError(f"transform shape {t.shape}")
    if not np.all(np.isfinite(t)) or not np.isfinite(tau):
        raise ConfigurationError("non-finite transform or threshold")
    n, k = t.shape
    active = t >= tau
    empty = ~active.any(axis=1)
    if empty.any():
        active[np.flatnonzero(empty), t[empty].argmax(axis=1)] = True
    counts = active.sum(axis=1)
    rows, cols = np.nonzero(active)  # row-major, so columns sorted per row
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return SparseCodebook(
        n_vocab=n,
        anchor_count=k,
        indices=cols.astype(np.int64),
        weights=t[rows, cols],
        offsets=offsets,
    )


def flatten_codebook(cb: SparseCodebook, anchors: AnchorMatrix) -> FlattenedEmbedding:
    """Materialise each word's anchors into one padded lookup row."""
    if cb.indices.size and cb.indices.max() >= anchors.anchor_count:
        raise CorruptionError("codebook index exceeds anchor matrix")
    k, d = anchors.anchor_count, anchors.width
    table = np.zeros((cb.n_vocab, k * d), dtype=np.float64)
    cards = cb.cardinalities
    rows = np.repeat(np.arange(cb.n_vocab), cards)
    within = np.arange(cb.indices.size) - np.repeat(cb.offsets[:-1], cards)
    gathered = anchors.values[cb.indices]  # (total, d)
    flat_cols = within[:, None] * d + np.arange(d)[None, :]
    table[rows[:, None], flat_cols] = gathered
    return FlattenedEmbedding(table=table, cardinalities=cards.astype(np.int64), width=d)


def unflatten(fe: FlattenedEmbedding):
    """Recover the per-word anchor rows and cardinalities from a flat table."""
    d = fe.width
    rows = []
    for i, k in enumerate(fe.cardinalities):
        rows.append(fe.table[i, : int(k) * d].reshape(int(k), d))
    return rows, fe.cardinalities.copy()


def lookup(cb: SparseCodebook, anchors: AnchorMatrix, token_ids, attn_mask) -> GroupedSequence:
    """Gather the active anchors of every unmasked token in a batch.

    Masked-off tokens contribute no anchors. A fully masked row emits a
    single zero-weight sentinel slot so downstream masks keep at least
    one valid position.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    mask_in = np.asarray(attn_mask, dtype=bool)
    if ids.ndim != 2 or mask_in.shape != ids.shape:
        raise DimensionError(f"token ids {ids.shape} vs mask {mask_in.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= cb.n_vocab):
        raise IndexError(f"token id out of range [0, {cb.n_vocab})")
    b, l = ids.shape
    cards = cb.cardinalities

    sub_lengths = np.where(mask_in, cards[ids], 0).astype(np.int64)

    anchor_ids, weight_slots, weights = [], [], []
    batch_map, pos_map, slot_map = [], [], []
    for bi in range(b):
        slot = 0
        for li in range(l):
            if not mask_in[bi, li]:
                continue
            lo, hi = cb.offsets[ids[bi, li]], cb.offsets[ids[bi, li] + 1]
            span = hi - lo
            anchor_ids.append(cb.indices[lo:hi])
            weight_slots.append(np.arange(lo, hi))
            weights.append(cb.weights[lo:hi])
            batch_map.append(np.full(span, bi))
            pos_map.append(np.full(span, li))
            slot_map.append(np.arange(slot, slot + span))
            slot += span
        if slot == 0:  # sentinel keeps the >=1-valid-position contract
            anchor_ids.append(np.zeros(1, dtype=np.int64))
            weight_slots.append(np.full(1, -1, dtype=np.int64))
            weights.append(np.zeros(1))
            batch_map.append(np.full(1, bi))
            pos_map.append(np.zeros(1, dtype=np.int64))
            slot_map.append(np.zeros(1, dtype=np.int64))

    def cat(parts, dtype):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

    slot_map = cat(slot_map, np.int64)
    batch_map_arr = cat(batch_map, np.int64)
    lengths = sub_lengths.sum(axis=1).clip(min=1)
    t_max = int(lengths.max()) if b else 0
    mask = np.arange(t_max)[None, :] < lengths[:, None]

    return GroupedSequence(
        batch_size=b,
        seq_len=l,
        width=anchors.width,
        anchor_ids=cat(anchor_ids, np.int64),
        weight_slots=cat(weight_slots, np.int64),
        anchors=anchors.values[cat(anchor_ids, np.int64)],
        weights=cat(weights, np.float64),
        batch_map=batch_map_arr,
        pos_map=cat(pos_map, np.int64),
        slot_map=slot_map,
        sub_lengths=sub_lengths,
        mask=mask,
        t_max=t_max,
    )


def compose(gs: GroupedSequence, tape=None, anchors=None, weights=None):
    """Static word embeddings: out[b, l] = sum of weight * anchor per word.

    `anchors`/`weights` default to the arrays captured at lookup time;
    training passes taped variables gathered from the live parameters.
    """
    a = gs.anchors if anchors is None else anchors
    w = gs.weights if weights is None else weights
    weighted = nc.row_scale(a, w, tape=tape)
    flat = nc.scatter_add(weighted, gs.global_id, gs.batch_size * gs.seq_len, tape=tape)
    return nc.reshape(flat, (gs.batch_size, gs.seq_len, gs.width), tape=tape)


def expand_slots(gs: GroupedSequence, tape=None, anchors=None, weights=None):
    """Weighted anchors laid out as a padded (B, T_max, d) slot tensor.

    Each anchor keeps its own slot (ids are unique) so the scatter-add is
    a pure densification; padding slots stay exactly zero.
    """
    a = gs.anchors if anchors is None else anchors
    w = gs.weights if weights is None else weights
    weighted = nc.row_scale(a, w, tape=tape)
    slot_gid = gs.batch_map * gs.t_max + gs.slot_map
    flat = nc.scatter_add(weighted, slot_gid, gs.batch_size * gs.t_max, tape=tape)
    return nc.reshape(flat, (gs.batch_size, gs.t_max, gs.width), tape=tape)


# ---------------------------------------------------------------------------
# compression accounting
# ---------------------------------------------------------------------------

@dataclass
class CompressionReport:
    anchor_params: int
    storage_bytes: float
    storage_mb: float
    baseline_bytes: float
    baseline_mb: float
    ratio: float
    reduction_pct: float


def compression_report(n_vocab, d, anchor_count, cardinalities,
                       index_bytes=4, weight_bytes=4, cardinality_bytes=2,
                       baseline_params=None) -> CompressionReport:
    """Storage accounting for the sparse representation vs a dense table.

    storage = 4*K*d (float32 anchors) + sum_i k_i*(index+weight bytes)
    + N*cardinality_bytes. Megabytes are bytes / 2**20. The byte widths
    are parameters because published accountings differ in what they
    count; the defaults document our on-disk record layout.
    """
    if min(n_vocab, d, anchor_count) <= 0:
        raise ConfigurationError("all sizes must be positive")
    cards = np.asarray(cardinalities, dtype=np.float64)
    total_k = float(cards.sum()) if cards.ndim else float(cards) * n_vocab
    if baseline_params is None:
        baseline_params = n_vocab * d
    anchor_params = anchor_count * d
    storage = (4.0 * anchor_params
               + total_k * (index_bytes + weight_bytes)
               + n_vocab * cardinality_bytes)
    baseline_bytes = 4.0 * baseline_params
    return CompressionReport(
        anchor_params=anchor_params,
        storage_bytes=storage,
        storage_mb=storage / 2.0**20,
        baseline_bytes=baseline_bytes,
        baseline_mb=baseline_bytes / 2.0**20,
        ratio=baseline_bytes / storage,
        reduction_pct=100.0 * (1.0 - storage / baseline_bytes),
    )


# ---------------------------------------------------------------------------
# binary artifact
# ---------------------------------------------------------------------------

def save_codebook(path, cb: SparseCodebook, anchors: AnchorMatrix, tau: float) -> None:
    """Write the '.adecb' artifact: header, per-word records, anchor rows."""
    if anchors.anchor_count != cb.anchor_count:
        raise ConfigurationError("codebook and anchor matrix disagree on K")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<QQQd", cb.n_vocab, cb.anchor_count, anchors.width, tau))
    for i in range(cb.n_vocab):
        idx, w = cb.word(i)
        buf.write(struct.pack("<H", idx.size))
        rec = np.empty(idx.size, dtype=[("i", "<u4"), ("w", "<f4")])
        rec["i"] = idx
        rec["w"] = w.astype(np.float32)
        buf.write(rec.tobytes())
    buf.write(anchors.values.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_codebook(path):
    """Read a '.adecb' artifact; returns (codebook, anchors, tau)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:6] != _MAGIC:
        raise CorruptionError("bad codebook magic")
    try:
        n, k, d, tau = struct.unpack_from("<QQQd", data, 6)
        off = 6 + struct.calcsize("<QQQd")
        indices, weights = [], []
        offsets = np.zeros(n + 1, dtype=np.int64)
        for i in range(n):
            (card,) = struct.unpack_from("<H", data, off)
            off += 2
            if card < 1 or card > k:
                raise CorruptionError(f"cardinality {card} out of [1, {k}]")
            rec = np.frombuffer(data, dtype=[("i", "<u4"), ("w", "<f4")],
                                count=card, offset=off)
            off += rec.nbytes
            indices.append(rec["i"].astype(np.int64))
            weights.append(rec["w"].astype(np.float64))
            offsets[i + 1] = offsets[i] + card
        values = np.frombuffer(data, dtype="<f4", count=k * d, offset=off)
        off += values.nbytes
    except (struct.error, ValueError) as exc:
        raise CorruptionError(f"truncated codebook: {exc}") from exc
    if off != len(data):
        raise CorruptionError("trailing bytes after codebook payload")
    idx = np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64)
    if idx.size and idx.max() >= k:
        raise CorruptionError("anchor index exceeds K")
    cb = SparseCodebook(
        n_vocab=n, anchor_count=k,
        indices=idx,
        weights=np.concatenate(weights) if weights else np.zeros(0),
        offsets=offsets,
    )
    anchors = AnchorMatrix(values.astype(np.float64).reshape(k, d))
    return cb, anchors, tau
