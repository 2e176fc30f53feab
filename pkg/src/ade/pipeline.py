"""End-to-end model assembly, forward passes, training, checkpoints.

The forward pass follows the lookup -> weighted composition ->
normalisation -> attention -> pooling -> classifier chain. The
attention path runs at anchor resolution: every active anchor of every
unmasked word occupies one slot of a padded (B, T_max, d) sequence with
its word's positional vector, so attention reweights individual anchors
in context. The ablation path composes anchors into word embeddings by
their static weights and skips grouped PE and attention entirely.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict, field

import numpy as np

from . import numcore as nc
from . import sat as sat_mod
from .codebook import (AnchorMatrix, GroupedSequence, SparseCodebook, compose,
                       expand_slots, lookup)
from .errors import ConfigurationError, CorruptionError, DataError, TrainingError
from .gpe import PositionalTable, sinusoidal_pe
from .manifest import hash64
from .optim import Adam, warmup_constant
from .rng import SplitMix64

_MAGIC = b"ADEMD1"
_VERSION = 1


@dataclass
class AdeConfig:
    d: int = 32
    heads: int = 4
    n_classes: int = 2
    l_max: int = 128
    tau: float = 0.1
    dropout: float = 0.1
    use_sat: bool = True
    trainable_embeddings: bool = True
    ln_eps: float = 1e-12
    seed: int = 0

    def validate(self):
        if self.d % 2 != 0:
            raise ConfigurationError("width must be even for sinusoidal PE")
        if self.d % self.heads != 0:
            raise ConfigurationError("width must divide evenly into heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    warmup_steps: int = 100
    total_steps: int = 2000
    seed: int = 0
    use_sat: bool = True
    trainable_embeddings: bool = True
    weight_decay: float = 0.0
    log_every: int = 50

    def validate(self):
        if self.warmup_steps > self.total_steps:
            raise ConfigurationError("warmup_steps exceeds total_steps")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ConfigurationError("batch size and steps must be positive")


@dataclass
class AdeModel:
    config: AdeConfig
    codebook: SparseCodebook
    anchors: AnchorMatrix
    sat: sat_mod.SatParams
    pooler: sat_mod.PoolerParams
    head: sat_mod.HeadParams
    pe: PositionalTable
    flattened: object = field(default=None, repr=False)  # optional cache

    def param_arrays(self, include_embeddings: bool) -> dict:
        out = {
            "wq": self.sat.wq, "bq": self.sat.bq,
            "wk": self.sat.wk, "bk": self.sat.bk,
            "wv": self.sat.wv, "bv": self.sat.bv,
            "wo": self.sat.wo, "bo": self.sat.bo,
            "ln_gain": self.sat.ln_gain, "ln_bias": self.sat.ln_bias,
            "pool_w": self.pooler.score_w, "pool_b": self.pooler.score_b,
            "head_w": self.head.w, "head_b": self.head.b,
        }
        if include_embeddings:
            out["anchors"] = self.anchors.values
            out["beta"] = self.codebook.weights
        return out

    def count_params(self) -> dict:
        return sat_mod.count_params(
            d=self.config.d, n_classes=self.config.n_classes,
            anchor_count=self.anchors.anchor_count,
            total_weights=int(self.codebook.weights.size),
            trainable_embeddings=self.config.trainable_embeddings,
        )


def build_model(cb: SparseCodebook, anchors: AnchorMatrix, config: AdeConfig) -> AdeModel:
    config.validate()
    if anchors.width != config.d:
        raise ConfigurationError(
            f"anchor width {anchors.width} != configured width {config.d}")
    rng = SplitMix64(config.seed).spawn(7)
    return AdeModel(
        config=config,
        codebook=cb,
        anchors=anchors,
        sat=sat_mod.init_sat(config.d, config.heads, rng.spawn(0)),
        pooler=sat_mod.init_pooler(config.d, rng.spawn(1)),
        head=sat_mod.init_head(config.d, config.n_classes, rng.spawn(2)),
        pe=sinusoidal_pe(config.l_max, config.d),
    )


def padding_mask(sub_lengths) -> tuple[np.ndarray, int]:
    """Mask[b, t] is true iff slot t is within row b's anchor total."""
    s = np.asarray(sub_lengths, dtype=np.int64)
    lengths = s.sum(axis=1)
    t_max = int(lengths.max()) if s.size else 0
    return np.arange(t_max)[None, :] < lengths[:, None], t_max


def _plain_norm(x, d, eps, tape=None):
    return nc.layer_norm(x, np.ones(d), np.zeros(d), eps=eps, tape=tape)


def _check_inputs(token_ids, attn_mask):
    mask = np.asarray(attn_mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise DataError("every sequence needs at least one unmasked token")
    return mask


def _dropout_mask(shape, rate, rng: SplitMix64):
    keep = rng.uniform(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def forward(model: AdeModel, token_ids, attn_mask, mode: str = "eval",
            rng: SplitMix64 | None = None, use_sat: bool | None = None) -> np.ndarray:
    """Logits for a batch; `mode='train'` enables dropout (rng required)."""
    cfg = model.config
    word_mask = _check_inputs(token_ids, attn_mask)
    gs = lookup(model.codebook, model.anchors, token_ids, word_mask)
    if cfg.use_sat if use_sat is None else use_sat:
        x = expand_slots(gs)
        x = _plain_norm(x, cfg.d, cfg.ln_eps)
        x = sat_mod.sat_forward(x, gs.sub_lengths, gs.mask, model.sat,
                                model.pe, ln_eps=cfg.ln_eps)
        pooled = sat_mod.pool(x, gs.mask, model.pooler)
    else:
        x = compose(gs)
        x = _plain_norm(x, cfg.d, cfg.ln_eps)
        pooled = sat_mod.pool(x, word_mask, model.pooler)
    if mode == "train" and cfg.dropout > 0.0:
        if rng is None:
            raise ConfigurationError("train-mode forward needs an rng for dropout")
        pooled = pooled * _dropout_mask(pooled.shape, cfg.dropout, rng)
    return sat_mod.classify(pooled, model.head)


def forward_no_sat(model: AdeModel, token_ids, attn_mask, mode: str = "eval",
                   rng: SplitMix64 | None = None) -> np.ndarray:
    """Ablation forward: static weighted-sum composition straight to the
    pooler, independent of grouped PE and the attention parameters."""
    return forward(model, token_ids, attn_mask, mode=mode, rng=rng,
                   use_sat=False)


def loss_and_grads(model: AdeModel, token_ids, attn_mask, labels,
                   rng: SplitMix64 | None = None, train_mode: bool = True):
    """Build the taped training graph and pull gradients for all
    trainable parameters. Returns (loss, grads-by-name)."""
    cfg = model.config
    word_mask = _check_inputs(token_ids, attn_mask)
    gs = lookup(model.codebook, model.anchors, token_ids, word_mask)
    if np.any(gs.weight_slots < 0):
        raise DataError("training batch contains a fully masked sequence")

    tape = nc.Tape()
    leaves: dict[str, nc.Var] = {}

    def leaf(name, arr):
        v = nc.Var(arr)
        leaves[name] = v
        return v

    p = model.sat
    sat_vars = sat_mod.SatParams(
        wq=leaf("wq", p.wq), bq=leaf("bq", p.bq),
        wk=leaf("wk", p.wk), bk=leaf("bk", p.bk),
        wv=leaf("wv", p.wv), bv=leaf("bv", p.bv),
        wo=leaf("wo", p.wo), bo=leaf("bo", p.bo),
        ln_gain=leaf("ln_gain", p.ln_gain), ln_bias=leaf("ln_bias", p.ln_bias),
        heads=p.heads,
    )
    pool_vars = sat_mod.PoolerParams(score_w=leaf("pool_w", model.pooler.score_w),
                                     score_b=leaf("pool_b", model.pooler.score_b))
    head_vars = sat_mod.HeadParams(w=leaf("head_w", model.head.w),
                                   b=leaf("head_b", model.head.b))

    if cfg.trainable_embeddings:
        a_var = leaf("anchors", model.anchors.values)
        beta_var = leaf("beta", model.codebook.weights)
        anchor_rows = nc.gather_rows(a_var, gs.anchor_ids, tape=tape)
        beta_col = nc.reshape(beta_var, (model.codebook.weights.size, 1), tape=tape)
        weights = nc.reshape(nc.gather_rows(beta_col, gs.weight_slots, tape=tape),
                             (gs.anchor_ids.size,), tape=tape)
    else:
        anchor_rows, weights = None, None

    if cfg.use_sat:
        x = expand_slots(gs, tape=tape, anchors=anchor_rows, weights=weights)
        x = _plain_norm(x, cfg.d, cfg.ln_eps, tape=tape)
        x = sat_mod.sat_forward(x, gs.sub_lengths, gs.mask, sat_vars,
                                model.pe, tape=tape, ln_eps=cfg.ln_eps)
        pooled = sat_mod.pool(x, gs.mask, pool_vars, tape=tape)
    else:
        x = compose(gs, tape=tape, anchors=anchor_rows, weights=weights)
        x = _plain_norm(x, cfg.d, cfg.ln_eps, tape=tape)
        pooled = sat_mod.pool(x, word_mask, pool_vars, tape=tape)

    if train_mode and cfg.dropout > 0.0:
        if rng is None:
            raise ConfigurationError("training loss needs an rng for dropout")
        drop = _dropout_mask(nc.value_of(pooled).shape, cfg.dropout, rng)
        pooled = nc.mul(pooled, drop, tape=tape)

    logits = sat_mod.classify(pooled, head_vars, tape=tape)
    loss = nc.cross_entropy(logits, labels, tape=tape)
    grad_map = tape.backward(loss)
    grads = {name: grad_map.get(var, np.zeros_like(var.value))
             for name, var in leaves.items()}
    return float(loss.value), grads


def train_classifier(model: AdeModel, token_ids, attn_mask, labels,
                     cfg: TrainConfig):
    """Adam with linear warmup then a constant rate; single writer.

    The SAT/pooler/head parameters always update; anchors and codebook
    weights update only when cfg.trainable_embeddings is set. Returns
    (model, history) with one (step, loss, lr) record per step.
    """
    cfg.validate()
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= model.config.n_classes:
        raise DataError("label outside configured class range")
    model.config.use_sat = cfg.use_sat
    model.config.trainable_embeddings = cfg.trainable_embeddings

    params = model.param_arrays(include_embeddings=cfg.trainable_embeddings)
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = SplitMix64(cfg.seed)
    shuffle_rng, dropout_rng = rng.spawn(11), rng.spawn(13)

    n = labels.size
    ids = np.asarray(token_ids)
    mask = np.asarray(attn_mask, dtype=bool)
    order = shuffle_rng.shuffle(n)
    cursor = 0
    history = []

    for step in range(cfg.total_steps):
        if cursor + cfg.batch_size > n:
            order = shuffle_rng.shuffle(n)
            cursor = 0
        pick = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size

        loss, grads = loss_and_grads(model, ids[pick], mask[pick], labels[pick],
                                     rng=dropout_rng, train_mode=True)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}", step=step)
        lr = warmup_constant(step, cfg.lr, cfg.warmup_steps)
        opt.step(grads, lr=lr)
        history.append((step, loss, lr))

    return model, history


def predict_logits(model: AdeModel, token_ids, attn_mask, batch_size: int = 64):
    """Eval-mode logits in deterministic batches."""
    ids = np.asarray(token_ids)
    mask = np.asarray(attn_mask, dtype=bool)
    chunks = [forward(model, ids[i:i + batch_size], mask[i:i + batch_size])
              for i in range(0, ids.shape[0], batch_size)]
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_F32, _I64 = 0, 1


def _pack_section(name: str, arr: np.ndarray, code: int) -> bytes:
    raw = arr.astype("<f4" if code == _F32 else "<i8").tobytes()
    head = struct.pack("<H", len(name)) + name.encode()
    head += struct.pack("<BB", code, arr.ndim)
    head += b"".join(struct.pack("<Q", s) for s in arr.shape)
    return head + raw


def checkpoint_save(model: AdeModel, path) -> None:
    """Write the '.ade' artifact: config block, named float32/int64
    parameter sections, trailing content hash."""
    cfg_bytes = json.dumps(
        {**asdict(model.config),
         "n_vocab": model.codebook.n_vocab,
         "anchor_count": model.anchors.anchor_count},
        sort_keys=True).encode()
    sections = [
        ("anchors", model.anchors.values, _F32),
        ("beta", model.codebook.weights, _F32),
        ("cb_indices", model.codebook.indices, _I64),
        ("cb_offsets", model.codebook.offsets, _I64),
        ("wq", model.sat.wq, _F32), ("bq", model.sat.bq, _F32),
        ("wk", model.sat.wk, _F32), ("bk", model.sat.bk, _F32),
        ("wv", model.sat.wv, _F32), ("bv", model.sat.bv, _F32),
        ("wo", model.sat.wo, _F32), ("bo", model.sat.bo, _F32),
        ("ln_gain", model.sat.ln_gain, _F32),
        ("ln_bias", model.sat.ln_bias, _F32),
        ("pool_w", model.pooler.score_w, _F32),
        ("pool_b", np.asarray(model.pooler.score_b), _F32),
        ("head_w", model.head.w, _F32), ("head_b", model.head.b, _F32),
    ]
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<IQ", _VERSION, len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", len(sections)))
    for name, arr, code in sections:
        buf.write(_pack_section(name, np.asarray(arr), code))
    body = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(body + hash64(body))


def checkpoint_load(path) -> AdeModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:6] != _MAGIC:
        raise CorruptionError("bad checkpoint magic")
    if len(data) < 6 + 12 + 8 or hash64(data[:-8]) != data[-8:]:
        raise CorruptionError("checkpoint hash mismatch or truncation")
    body = data[:-8]
    try:
        version, cfg_len = struct.unpack_from("<IQ", body, 6)
        if version != _VERSION:
            raise CorruptionError(f"unsupported checkpoint version {version}")
        off = 18
        raw_cfg = json.loads(body[off:off + cfg_len].decode())
        off += cfg_len
        (n_sections,) = struct.unpack_from("<I", body, off)
        off += 4
        arrays = {}
        for _ in range(n_sections):
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + name_len].decode()
            off += name_len
            code, ndim = struct.unpack_from("<BB", body, off)
            off += 2
            shape = struct.unpack_from("<" + "Q" * ndim, body, off)
            off += 8 * ndim
            count = int(np.prod(shape)) if shape else 1
            dtype = "<f4" if code == _F32 else "<i8"
            arr = np.frombuffer(body, dtype=dtype, count=count, offset=off)
            off += arr.nbytes
            arrays[name] = arr.astype(np.float64 if code == _F32 else np.int64
                                      ).reshape(shape)
    except (struct.error, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"unreadable checkpoint: {exc}") from exc
    if off != len(body):
        raise CorruptionError("checkpoint payload size mismatch")

    n_vocab = raw_cfg.pop("n_vocab")
    anchor_count = raw_cfg.pop("anchor_count")
    config = AdeConfig(**raw_cfg)
    anchors = arrays["anchors"]
    if anchors.shape != (anchor_count, config.d):
        raise CorruptionError("anchor section disagrees with config header")
    offsets = arrays["cb_offsets"]
    if offsets.shape != (n_vocab + 1,) or arrays["beta"].shape != arrays["cb_indices"].shape:
        raise CorruptionError("codebook sections disagree with config header")
    cb = SparseCodebook(n_vocab=n_vocab, anchor_count=anchor_count,
                        indices=arrays["cb_indices"], weights=arrays["beta"],
                        offsets=offsets)
    sat_params = sat_mod.SatParams(
        wq=arrays["wq"], bq=arrays["bq"], wk=arrays["wk"], bk=arrays["bk"],
        wv=arrays["wv"], bv=arrays["bv"], wo=arrays["wo"], bo=arrays["bo"],
        ln_gain=arrays["ln_gain"], ln_bias=arrays["ln_bias"],
        heads=config.heads,
    )
    for name in ("wq", "wk", "wv", "wo"):
        if arrays[name].shape != (config.d, config.d):
            raise CorruptionError(f"section '{name}' disagrees with config width")
    return AdeModel(
        config=config, codebook=cb, anchors=AnchorMatrix(anchors),
        sat=sat_params,
        pooler=sat_mod.PoolerParams(score_w=arrays["pool_w"],
                                    score_b=arrays["pool_b"].reshape(())),
        head=sat_mod.HeadParams(w=arrays["head_w"], b=arrays["head_b"]),
        pe=sinusoidal_pe(config.l_max, config.d),
    )
