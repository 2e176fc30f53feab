"""Stage-1 anchor learning by reconstructing a teacher embedding matrix.

A dense non-negative word-to-anchor transform and the anchor matrix are
optimised jointly under a cosine reconstruction loss with an L1 penalty
on the transform; thresholding the learned transform afterwards yields
the sparse codebook records.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .codebook import AnchorMatrix
from .errors import ConfigurationError, CorruptionError, TrainingError
from .manifest import hash64, sha256_hex
from .optim import Adam
from .rng import SplitMix64

_MAGIC = b"ADETE1"


@dataclass
class TeacherEmbedding:
    """A frozen teacher matrix plus its content hash.

    Zero-norm rows cannot enter a cosine loss; they are flagged in
    `valid_rows` and skipped during distillation.
    """

    values: np.ndarray
    content_hash: str = ""
    valid_rows: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ConfigurationError(f"teacher shape {self.values.shape}")
        if not self.content_hash:
            self.content_hash = sha256_hex(self.values.astype("<f4").tobytes())
        if self.valid_rows is None:
            self.valid_rows = np.linalg.norm(self.values, axis=1) > 0.0

    @property
    def n_vocab(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class DistillConfig:
    anchor_count: int = 16
    steps: int = 1500
    lr: float = 1e-3
    l1: float = 1e-3
    batch_size: int | None = None  # None = full batch
    seed: int = 0
    init_temp: float = 0.1
    kmeans_iters: int = 10

    def validate(self):
        if self.anchor_count < 1:
            raise ConfigurationError("anchor_count must be >= 1")
        if self.l1 < 0:
            raise ConfigurationError("l1 penalty must be >= 0")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")


def distill_loss(student: np.ndarray, teacher: np.ndarray) -> float:
    """1 - mean row cosine; 0 for perfect alignment, 2 for antipodal."""
    return 1.0 - nc.cosine_alignment(student, teacher)


def _kmeans_centroids(rows: np.ndarray, k: int, iters: int, rng: SplitMix64):
    """A few Lloyd iterations on unit-normalised rows, seeded start."""
    unit = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    n = unit.shape[0]
    if k >= n:
        reps = unit[rng.shuffle(n)]
        extra = rng.normal((k - n, unit.shape[1]), scale=1.0 / np.sqrt(unit.shape[1]))
        return np.concatenate([reps, extra]) if k > n else reps
    centroids = unit[rng.shuffle(n)[:k]].copy()
    for _ in range(iters):
        sims = unit @ centroids.T
        assign = sims.argmax(axis=1)
        for j in range(k):
            members = unit[assign == j]
            if members.size:
                c = members.mean(axis=0)
                norm = np.linalg.norm(c)
                if norm > 0:
                    centroids[j] = c / norm
    return centroids


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def init_transform(teacher: TeacherEmbedding, cfg: DistillConfig, rng: SplitMix64):
    """Anchors from centroids of teacher rows; transform from soft
    teacher-to-centroid similarities, so training starts semantically
    spread instead of from noise."""
    rows = teacher.values[teacher.valid_rows]
    centroids = _kmeans_centroids(rows, cfg.anchor_count, cfg.kmeans_iters, rng)
    unit = teacher.values / np.maximum(
        np.linalg.norm(teacher.values, axis=1, keepdims=True), 1e-12)
    sims = unit @ centroids.T
    transform = _softmax_rows(sims / cfg.init_temp)
    return centroids.copy(), transform


def learn_anchors(teacher: TeacherEmbedding, cfg: DistillConfig,
                  transform_init: np.ndarray | None = None,
                  anchors_init: np.ndarray | None = None):
    """Jointly fit anchors and a non-negative dense transform.

    Returns (AnchorMatrix, transform, history) where history holds one
    total-loss float per step. Deterministic given cfg.seed.
    """
    cfg.validate()
    rng = SplitMix64(cfg.seed)
    if transform_init is None or anchors_init is None:
        anchors_init, transform_init = init_transform(teacher, cfg, rng.spawn(0))
    a = np.array(anchors_init, dtype=np.float64)
    t = np.maximum(np.array(transform_init, dtype=np.float64), 0.0)
    valid = np.flatnonzero(teacher.valid_rows)
    if valid.size == 0:
        raise ConfigurationError("teacher has no usable rows")

    opt = Adam({"a": a, "t": t}, lr=cfg.lr)
    batch_rng = rng.spawn(1)
    history = []
    batch = cfg.batch_size if cfg.batch_size and cfg.batch_size < valid.size else None

    for step in range(cfg.steps):
        if batch is None:
            idx = valid
        else:
            pick = batch_rng.integers(0, valid.size, (batch,))
            idx = valid[pick]
        tape = nc.Tape()
        a_var, t_var = nc.Var(a), nc.Var(t)
        rows = nc.gather_rows(t_var, idx, tape=tape)
        student = nc.matmul(rows, a_var, tape=tape)
        cos = nc.cosine_alignment(student, teacher.values[idx], tape=tape)
        loss = nc.add(nc.scale(cos, -1.0, tape=tape), 1.0, tape=tape)
        if cfg.l1 > 0:
            loss = nc.add(loss, nc.scale(nc.mean_abs(t_var, tape=tape),
                                         cfg.l1, tape=tape), tape=tape)
        loss_val = float(loss.value)
        _guard_finite(loss_val, step)
        grads = tape.backward(loss)
        opt.step({"a": grads.get(a_var, np.zeros_like(a)),
                  "t": grads.get(t_var, np.zeros_like(t))})
        _project_transform(t)
        history.append(loss_val)

    return AnchorMatrix(a), t, history


def _project_transform(t: np.ndarray) -> None:
    """Clamp to the non-negative orthant and renormalise rows by their max.

    The cosine loss is scale-free, so without the renormalisation the L1
    penalty shrinks whole rows uniformly below any fixed threshold
    instead of pruning weak anchors; pinning each row's dominant weight
    at 1 makes the penalty act on the relative pattern.
    """
    np.maximum(t, 0.0, out=t)
    peak = t.max(axis=1, keepdims=True)
    np.divide(t, peak, out=t, where=peak > 0)


def _guard_finite(loss: float, step: int) -> None:
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss at step {step}", step=step)


def mean_cosine(anchors: AnchorMatrix, transform: np.ndarray,
                teacher: TeacherEmbedding) -> float:
    """Reconstruction quality over the teacher's usable rows."""
    student = transform @ anchors.values
    keep = teacher.valid_rows & (np.linalg.norm(student, axis=1) > 0.0)
    return nc.cosine_alignment(student[keep], teacher.values[keep])


def solve_codes(rows: np.ndarray, anchors: AnchorMatrix,
                cfg: DistillConfig) -> np.ndarray:
    """Non-negative anchor codes for new rows with the anchors frozen.

    Same objective and optimiser as `learn_anchors`, but only the codes
    move; used to project rows that were not part of the original fit.
    """
    cfg.validate()
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != anchors.width:
        raise ConfigurationError(f"rows shape {rows.shape} vs width {anchors.width}")
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ConfigurationError("cannot project zero-norm rows")
    unit_anchors = anchors.values / np.maximum(
        np.linalg.norm(anchors.values, axis=1, keepdims=True), 1e-12)
    codes = np.maximum(_softmax_rows((rows / norms) @ unit_anchors.T / cfg.init_temp), 0.0)
    opt = Adam({"codes": codes}, lr=cfg.lr)
    for step in range(cfg.steps):
        tape = nc.Tape()
        c_var = nc.Var(codes)
        student = nc.matmul(c_var, anchors.values, tape=tape)
        cos = nc.cosine_alignment(student, rows, tape=tape)
        loss = nc.add(nc.scale(cos, -1.0, tape=tape), 1.0, tape=tape)
        if cfg.l1 > 0:
            loss = nc.add(loss, nc.scale(nc.mean_abs(c_var, tape=tape),
                                         cfg.l1, tape=tape), tape=tape)
        _guard_finite(float(loss.value), step)
        grads = tape.backward(loss)
        opt.step({"codes": grads.get(c_var, np.zeros_like(codes))})
        _project_transform(codes)
    return codes


def synthetic_teacher(n_vocab: int, width: int, n_latent: int,
                      seed: int = 0, noise: float = 0.05) -> TeacherEmbedding:
    """Cluster-structured stand-in for a pretrained embedding matrix.

    Each row is a sparse positive mixture of 1-3 latent directions plus
    a little isotropic noise, so it is well approximated by a small
    anchor set by construction.
    """
    if min(n_vocab, width, n_latent) < 1:
        raise ConfigurationError("sizes must be positive")
    rng = SplitMix64(seed)
    basis = rng.normal((n_latent, width))
    basis /= np.linalg.norm(basis, axis=1, keepdims=True)
    counts = rng.integers(1, min(3, n_latent) + 1, (n_vocab,))
    rows = np.zeros((n_vocab, width))
    for i in range(n_vocab):
        picks = rng.integers(0, n_latent, (int(counts[i]),))
        coef = 0.5 + rng.uniform((int(counts[i]),))
        rows[i] = coef @ basis[picks]
    rows += rng.normal(rows.shape, scale=noise)
    return TeacherEmbedding(rows)


def save_teacher(path, teacher: TeacherEmbedding) -> None:
    """Write the '.adete' artifact with a trailing 64-bit content hash."""
    payload = (_MAGIC
               + struct.pack("<QQ", teacher.n_vocab, teacher.width)
               + teacher.values.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(payload + hash64(payload))


def load_teacher(path) -> TeacherEmbedding:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:6] != _MAGIC:
        raise CorruptionError("bad teacher magic")
    if len(data) < 6 + 16 + 8:
        raise CorruptionError("truncated teacher file")
    body, tail = data[:-8], data[-8:]
    if hash64(body) != tail:
        raise CorruptionError("teacher content hash mismatch")
    n, d = struct.unpack_from("<QQ", body, 6)
    values = np.frombuffer(body, dtype="<f4", count=n * d, offset=22)
    if values.size != n * d or len(body) != 22 + 4 * n * d:
        raise CorruptionError("teacher payload size mismatch")
    return TeacherEmbedding(values.astype(np.float64).reshape(n, d))
