"""Dense-math kernels with hand-derived reverse-mode gradients.

Every kernel comes in a single implementation that runs in two modes:

* plain mode: inputs are numpy arrays, the result is a numpy array, and
  nothing is recorded. Used for inference.
* taped mode: a `Tape` is passed and differentiable inputs are wrapped in
  `Var`. The kernel records a pull-back closure per `Var` input so that
  `Tape.backward` can accumulate gradients for the fixed computation
  graphs built elsewhere in the package. This is not a general autodiff
  system: only the kernels below exist, and their adjoints are written
  and tested by hand against central differences.

All math is float64; 32-bit rounding happens only at artifact
boundaries.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimensionError, GradientCheckError, MaskError


class Var:
    """A differentiable value: a float64 array plus identity for the tape."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


class _Step:
    __slots__ = ("name", "out", "pulls", "run")

    def __init__(self, name, out, pulls, run):
        self.name = name
        self.out = out
        self.pulls = pulls  # list of (Var, pull-back closure)
        self.run = run      # recomputes the forward value from inputs


class Tape:
    """Ordered record of kernel applications for one forward pass."""

    def __init__(self):
        self.steps: list[_Step] = []

    def record(self, name, out: Var, pulls, run: Callable[[], np.ndarray]):
        self.steps.append(_Step(name, out, pulls, run))

    def backward(self, root: Var, seed=None) -> dict[Var, np.ndarray]:
        """Accumulate gradients of `root` w.r.t. every Var on the tape."""
        grads: dict[Var, np.ndarray] = {
            root: np.ones_like(root.value) if seed is None
            else np.asarray(seed, dtype=np.float64)
        }
        for step in reversed(self.steps):
            g = grads.get(step.out)
            if g is None:
                continue
            for var, pull in step.pulls:
                contrib = pull(g)
                prev = grads.get(var)
                grads[var] = contrib if prev is None else prev + contrib
        return grads

    def replay(self) -> list[np.ndarray]:
        """Re-execute every recorded forward step in order.

        Returns the recomputed outputs; in a single-threaded run they are
        bit-identical to the values stored at record time.
        """
        return [step.run() for step in self.steps]


def _wrap(tape, name, out_value, pulls, run):
    if tape is None:
        return out_value
    out = Var(out_value)
    tape.record(name, out, [(v, p) for v, p in pulls if isinstance(v, Var)], run)
    return out


def _unbroadcast(g, shape):
    """Sum gradient `g` down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def matmul(a, b, tape=None):
    """Matrix product, plain or stacked on matching leading dimensions."""
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul shapes {av.shape} x {bv.shape}")
    if av.ndim != bv.ndim or av.shape[:-2] != bv.shape[:-2]:
        raise DimensionError(f"matmul leading dims {av.shape} x {bv.shape}")
    out = av @ bv
    return _wrap(
        tape, "matmul", out,
        [(a, lambda g: g @ bv.swapaxes(-1, -2)),
         (b, lambda g: av.swapaxes(-1, -2) @ g)],
        lambda: value_of(a) @ value_of(b),
    )


def add(a, b, tape=None):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return _wrap(
        tape, "add", out,
        [(a, lambda g: _unbroadcast(g, av.shape)),
         (b, lambda g: _unbroadcast(g, bv.shape))],
        lambda: value_of(a) + value_of(b),
    )


def mul(a, b, tape=None):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    return _wrap(
        tape, "mul", out,
        [(a, lambda g: _unbroadcast(g * bv, av.shape)),
         (b, lambda g: _unbroadcast(g * av, bv.shape))],
        lambda: value_of(a) * value_of(b),
    )


def scale(a, c: float, tape=None):
    av = value_of(a)
    out = av * c
    return _wrap(tape, "scale", out, [(a, lambda g: g * c)],
                 lambda: value_of(a) * c)


def row_scale(x, w, tape=None):
    """Scale row m of `x` (M, d) by scalar w[m]."""
    xv, wv = value_of(x), value_of(w)
    if xv.ndim != 2 or wv.shape != (xv.shape[0],):
        raise DimensionError(f"row_scale shapes {xv.shape} x {wv.shape}")
    out = xv * wv[:, None]
    return _wrap(
        tape, "row_scale", out,
        [(x, lambda g: g * wv[:, None]),
         (w, lambda g: (g * xv).sum(axis=1))],
        lambda: value_of(x) * value_of(w)[:, None],
    )


def reshape(x, shape, tape=None):
    xv = value_of(x)
    out = xv.reshape(shape)
    return _wrap(tape, "reshape", out,
                 [(x, lambda g: g.reshape(xv.shape))],
                 lambda: value_of(x).reshape(shape))


def transpose(x, axes, tape=None):
    xv = value_of(x)
    inv = np.argsort(axes)
    out = xv.transpose(axes)
    return _wrap(tape, "transpose", out,
                 [(x, lambda g: g.transpose(inv))],
                 lambda: value_of(x).transpose(axes))


def _masked_softmax_value(scores, mask):
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not mask.any(axis=-1).all():
        raise MaskError("masked_softmax requires at least one valid entry per row")
    guarded = np.where(mask, scores, -np.inf)
    peak = guarded.max(axis=-1, keepdims=True)  # max over unmasked only
    weights = np.exp(guarded - peak)            # masked entries become exactly 0
    return weights / weights.sum(axis=-1, keepdims=True)


def masked_softmax(scores, mask, tape=None):
    """Softmax over the last axis restricted to `mask`-true entries.

    Masked entries are exactly zero in the output; the stabilising max is
    taken over unmasked entries only so -inf sentinels cannot poison it.
    """
    sv = value_of(scores)
    p = _masked_softmax_value(sv, mask)

    def pull(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return p * (g - inner)

    return _wrap(tape, "masked_softmax", p, [(scores, pull)],
                 lambda: _masked_softmax_value(value_of(scores), mask))


def layer_norm(x, gain, bias, eps=1e-12, tape=None):
    """Normalise over the last axis: gain * (x - mean)/sqrt(var + eps) + bias."""
    xv, gv, bv = value_of(x), value_of(gain), value_of(bias)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    s = np.sqrt(var + eps)
    xhat = xc / s
    out = gv * xhat + bv
    lead = tuple(range(xv.ndim - 1))

    def pull_x(g):
        dxhat = g * gv
        return (dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) / s

    return _wrap(
        tape, "layer_norm", out,
        [(x, pull_x),
         (gain, lambda g: (g * xhat).sum(axis=lead)),
         (bias, lambda g: g.sum(axis=lead))],
        lambda: value_of(gain) * xhat + value_of(bias),
    )


def _check_ids(ids, size):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= size):
        raise IndexError(f"id out of range [0, {size})")
    return ids


def scatter_add(values, ids, size, tape=None):
    """out[s] = sum of values[m] over m with ids[m] == s; empty slots are 0."""
    vv = value_of(values)
    ids = _check_ids(ids, size)

    def run():
        out = np.zeros((size,) + vv.shape[1:], dtype=np.float64)
        np.add.at(out, ids, value_of(values))
        return out

    return _wrap(tape, "scatter_add", run(), [(values, lambda g: g[ids])], run)


def gather_rows(table, ids, tape=None):
    """Row lookup table[ids]; the adjoint scatter-adds back into the table."""
    tv = value_of(table)
    ids = _check_ids(ids, tv.shape[0])

    def pull(g):
        out = np.zeros_like(tv)
        np.add.at(out, ids, g)
        return out

    return _wrap(tape, "gather_rows", tv[ids], [(table, pull)],
                 lambda: value_of(table)[ids])


def weighted_sum(weights, x, tape=None):
    """Combine rows: out[b] = sum_t weights[b, t] * x[b, t, :]."""
    wv, xv = value_of(weights), value_of(x)
    if xv.ndim != 3 or wv.shape != xv.shape[:2]:
        raise DimensionError(f"weighted_sum shapes {wv.shape} x {xv.shape}")
    out = np.einsum("bt,btd->bd", wv, xv)
    return _wrap(
        tape, "weighted_sum", out,
        [(weights, lambda g: np.einsum("bd,btd->bt", g, xv)),
         (x, lambda g: wv[:, :, None] * g[:, None, :])],
        lambda: np.einsum("bt,btd->bd", value_of(weights), value_of(x)),
    )


def _ce_value(logits, labels):
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"label out of range [0, {c})")
    peak = logits.max(axis=-1, keepdims=True)
    lse = peak[:, 0] + np.log(np.exp(logits - peak).sum(axis=-1))
    return float(np.mean(lse - logits[np.arange(n), labels]))


def cross_entropy(logits, labels, tape=None):
    """Mean negative log softmax probability of the true labels.

    Accepts a single (C,) row with an integer label or a (B, C) batch.
    """
    lv = np.atleast_2d(value_of(logits))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    out = _ce_value(lv, labels)
    n = lv.shape[0]

    def pull(g):
        peak = lv.max(axis=-1, keepdims=True)
        e = np.exp(lv - peak)
        p = e / e.sum(axis=-1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        grad = (g * p / n)
        return grad.reshape(np.shape(value_of(logits)))

    return _wrap(tape, "cross_entropy", out, [(logits, pull)],
                 lambda: _ce_value(np.atleast_2d(value_of(logits)), labels))


def cosine_alignment(student, teacher, tape=None):
    """Mean over rows of cos(student_row, teacher_row); teacher is constant."""
    sv, tv = value_of(student), value_of(teacher)
    if sv.shape != tv.shape or sv.ndim != 2:
        raise DimensionError(f"cosine_alignment shapes {sv.shape} x {tv.shape}")
    sn = np.linalg.norm(sv, axis=1)
    tn = np.linalg.norm(tv, axis=1)
    if np.any(sn == 0.0) or np.any(tn == 0.0):
        raise ValueError("cosine_alignment: zero-norm row")
    dots = (sv * tv).sum(axis=1)
    cos = dots / (sn * tn)
    out = float(cos.mean())
    m = sv.shape[0]

    def pull(g):
        # d/ds of s.t/(|s||t|) = t/(|s||t|) - (s.t) s / (|s|^3 |t|)
        return g / m * (tv / (sn * tn)[:, None]
                        - sv * (dots / (sn**3 * tn))[:, None])

    def run():
        s = value_of(student)
        d = (s * tv).sum(axis=1)
        return float((d / (np.linalg.norm(s, axis=1) * tn)).mean())

    return _wrap(tape, "cosine_alignment", out, [(student, pull)], run)


def mean_abs(x, tape=None):
    xv = value_of(x)
    out = float(np.abs(xv).mean())
    return _wrap(tape, "mean_abs", out,
                 [(x, lambda g: g * np.sign(xv) / xv.size)],
                 lambda: float(np.abs(value_of(x)).mean()))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(fn, params: dict, step: float = 1e-5) -> float:
    """Compare analytic gradients against central differences.

    `fn` maps a dict of named float64 arrays to (loss, grads) where grads
    holds one array per parameter. Returns the maximum over all
    coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    _, grads = fn(params)
    worst = 0.0
    for name, base in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.all(np.isfinite(g)):
            bad = int(np.flatnonzero(~np.isfinite(g.ravel()))[0])
            raise GradientCheckError(
                f"non-finite gradient for '{name}' at flat index {bad}")
        flat = base.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi, _ = fn(params)
            flat[i] = keep - step
            lo, _ = fn(params)
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * step)
            analytic = g.ravel()[i]
            err = abs(analytic - numeric) / max(1.0, abs(analytic))
            worst = max(worst, err)
    return worst
