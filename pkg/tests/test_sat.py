import numpy as np
import pytest

from ade import numcore as nc
from ade.errors import ConfigurationError, MaskError
from ade.gpe import sinusoidal_pe
from ade.rng import SplitMix64
from ade.sat import (HeadParams, PoolerParams, attention, batch_grouped_pe,
                     classify, count_params, init_head, init_pooler, init_sat,
                     pool, sat_forward)


def make_params(d, heads, seed=0):
    return init_sat(d, heads, SplitMix64(seed))


def test_init_rejects_indivisible_heads():
    with pytest.raises(ConfigurationError):
        init_sat(10, 3, SplitMix64(0))


def test_attention_single_valid_position_is_projected_value():
    d, h = 8, 2
    p = make_params(d, h)
    rng = SplitMix64(1)
    x = rng.normal((1, 3, d))
    mask = np.array([[True, False, False]])
    out = attention(x, mask, p)
    # softmax over a singleton gives weight 1: output = (x W_v + b_v) W_o + b_o
    v = x[0, 0] @ p.wv + p.bv
    want = v @ p.wo + p.bo
    assert np.max(np.abs(out[0, 0] - want)) < 1e-12


def test_attention_zero_queries_give_masked_mean():
    d, h = 8, 2
    p = make_params(d, h, seed=2)
    p.wq[...] = 0.0
    p.bq[...] = 0.0
    p.wk[...] = 0.0
    p.bk[...] = 0.0
    rng = SplitMix64(3)
    x = rng.normal((2, 4, d))
    mask = np.array([[True, True, True, False], [True, True, False, False]])
    out = attention(x, mask, p)
    for b in range(2):
        valid = mask[b]
        v = x[b, valid] @ p.wv + p.bv
        want = v.mean(axis=0) @ p.wo + p.bo
        for t in range(4):
            assert np.max(np.abs(out[b, t] - want)) < 1e-12


def test_attention_masked_positions_cannot_leak():
    d, h = 8, 2
    p = make_params(d, h, seed=4)
    rng = SplitMix64(5)
    x = rng.normal((2, 5, d))
    mask = np.array([[True, True, True, False, False],
                     [True, True, True, True, False]])
    base = attention(x, mask, p)
    noisy = x.copy()
    noisy[~mask] = rng.normal((np.count_nonzero(~mask), d), scale=100.0)
    out = attention(noisy, mask, p)
    assert np.max(np.abs(out[mask] - base[mask])) <= 1e-12


def test_attention_rejects_all_masked_row():
    p = make_params(4, 2)
    with pytest.raises(MaskError):
        attention(np.zeros((1, 2, 4)), np.zeros((1, 2), dtype=bool), p)


def _reference_encoder(x, mask, p, pe_rows, eps):
    """Independent dense single-layer post-norm encoder (loops, no reuse)."""
    b, t, d = x.shape
    h = p.heads
    dk = d // h
    out = np.zeros_like(x)
    xp = x + pe_rows
    for bi in range(b):
        q = xp[bi] @ p.wq + p.bq
        k = xp[bi] @ p.wk + p.bk
        v = xp[bi] @ p.wv + p.bv
        ctx = np.zeros((t, d))
        for head in range(h):
            sl = slice(head * dk, (head + 1) * dk)
            scores = q[:, sl] @ k[:, sl].T / np.sqrt(dk)
            scores[:, ~mask[bi]] = -np.inf
            e = np.exp(scores - scores.max(axis=1, keepdims=True))
            probs = e / e.sum(axis=1, keepdims=True)
            ctx[:, sl] = probs @ v[:, sl]
        attended = ctx @ p.wo + p.bo
        resid = xp[bi] + attended
        mu = resid.mean(axis=1, keepdims=True)
        var = ((resid - mu) ** 2).mean(axis=1, keepdims=True)
        out[bi] = p.ln_gain * (resid - mu) / np.sqrt(var + eps) + p.ln_bias
    return out


def test_sat_forward_matches_standard_encoder_with_unit_cardinalities():
    d, h, t = 8, 2, 4
    p = make_params(d, h, seed=6)
    p.ln_gain[...] = 1.0 + 0.1 * SplitMix64(7).normal((d,))
    p.ln_bias[...] = 0.1 * SplitMix64(8).normal((d,))
    pe = sinusoidal_pe(16, d)
    rng = SplitMix64(9)
    x = rng.normal((2, t, d))
    s = np.ones((2, t), dtype=np.int64)
    mask = np.ones((2, t), dtype=bool)
    out = sat_forward(x, s, mask, p, pe, ln_eps=1e-8)
    want = _reference_encoder(x, mask, p, pe.values[:t], eps=1e-8)
    assert np.max(np.abs(out - want)) < 1e-10


def test_sat_forward_shape_and_padding_invariance():
    d, h = 8, 2
    p = make_params(d, h, seed=10)
    pe = sinusoidal_pe(16, d)
    rng = SplitMix64(11)
    s = np.array([[2, 1, 0], [1, 1, 1]])
    mask = np.array([[True, True, True, False], [True, True, True, False]])
    x = rng.normal((2, 4, d))
    x[~mask] = 0.0
    out = sat_forward(x, s, mask, p, pe)
    assert out.shape == x.shape
    noisy = x.copy()
    noisy[~mask] = 1e3
    out2 = sat_forward(noisy, s, mask, p, pe)
    assert np.max(np.abs(out2[mask] - out[mask])) <= 1e-12


def test_sat_forward_grouped_pe_rows():
    pe = sinusoidal_pe(8, 4)
    rows = batch_grouped_pe(pe, np.array([[2, 1, 0]]), t_max=4)
    assert np.array_equal(rows[0, 0], pe.values[0])
    assert np.array_equal(rows[0, 1], pe.values[0])
    assert np.array_equal(rows[0, 2], pe.values[1])
    assert np.all(rows[0, 3] == 0.0)  # padding slot gets no signal


def test_pool_equal_scores_give_masked_mean():
    d = 6
    pp = PoolerParams(score_w=np.zeros(d), score_b=np.zeros(()))
    rng = SplitMix64(12)
    x = rng.normal((2, 4, d))
    mask = np.array([[True, True, False, False], [True, True, True, True]])
    out = pool(x, mask, pp)
    for b in range(2):
        want = x[b, mask[b]].mean(axis=0)
        assert np.max(np.abs(out[b] - want)) < 1e-12


def test_pool_single_valid_position_is_exact_row():
    d = 5
    pp = init_pooler(d, SplitMix64(13))
    x = SplitMix64(14).normal((1, 3, d))
    mask = np.array([[False, True, False]])
    out = pool(x, mask, pp)
    assert np.array_equal(out[0], x[0, 1])


def test_pool_masked_noise_invariance():
    d = 5
    pp = init_pooler(d, SplitMix64(15))
    rng = SplitMix64(16)
    x = rng.normal((1, 4, d))
    mask = np.array([[True, True, False, False]])
    base = pool(x, mask, pp)
    noisy = x.copy()
    noisy[0, 2:] = 1e6
    assert np.max(np.abs(pool(noisy, mask, pp) - base)) <= 1e-12


def test_classify_zero_head_gives_uniform():
    hp = HeadParams(w=np.zeros((4, 6)), b=np.zeros(4))
    logits = classify(np.ones((2, 6)), hp)
    assert np.array_equal(logits, np.zeros((2, 4)))


def test_group_permutation_symmetry():
    # uniform attention + uniform pooling: permuting anchors inside one
    # group permutes that group's rows only; the pooled vector is stable
    d, h = 8, 2
    p = make_params(d, h, seed=17)
    p.wq[...] = 0.0
    p.bq[...] = 0.0
    p.wk[...] = 0.0
    p.bk[...] = 0.0
    pe = sinusoidal_pe(16, d)
    pp = PoolerParams(score_w=np.zeros(d), score_b=np.zeros(()))
    rng = SplitMix64(18)
    s = np.array([[2, 3, 1]])
    t = int(s.sum())
    x = rng.normal((1, t, d))
    mask = np.ones((1, t), dtype=bool)
    pooled = pool(sat_forward(x, s, mask, p, pe), mask, pp)
    # swap the two anchors of group 0 and rotate the three of group 1
    perm = np.array([1, 0, 3, 4, 2, 5])
    pooled_perm = pool(sat_forward(x[:, perm], s, mask, p, pe), mask, pp)
    assert np.max(np.abs(pooled - pooled_perm)) <= 1e-10


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def test_count_params_reference_scale():
    table = count_params(d=768, n_classes=4)
    assert table["sat"] == 2_362_368
    assert table["layer_norm"] == 1_536
    assert table["pooler"] == 769
    assert table["classifier"] == 3_076
    assert table["total_trainable"] == 2_367_749


def test_count_params_formula_arithmetic():
    table = count_params(d=8, n_classes=2)
    assert table["sat"] == 4 * (64 + 8) == 288
    assert table["pooler"] == 9
    assert table["classifier"] == 18


def test_count_params_wide_head():
    assert count_params(d=768, n_classes=14)["classifier"] == 10_766


def test_count_params_embedding_trainability():
    frozen = count_params(d=8, n_classes=2, anchor_count=4, total_weights=10,
                          trainable_embeddings=False)
    assert frozen["embedding"] == 4 * 8 + 10
    assert frozen["total_frozen"] == 42
    trainable = count_params(d=8, n_classes=2, anchor_count=4, total_weights=10,
                             trainable_embeddings=True)
    assert trainable["total_trainable"] == frozen["total_trainable"] + 42


def test_parameter_arrays_match_accounting():
    d, h, c = 8, 2, 3
    p = init_sat(d, h, SplitMix64(19))
    n_sat = sum(a.size for a in (p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo))
    assert n_sat == count_params(d, c)["sat"]
    assert p.ln_gain.size + p.ln_bias.size == count_params(d, c)["layer_norm"]
    pooler = init_pooler(d, SplitMix64(20))
    assert pooler.score_w.size + 1 == count_params(d, c)["pooler"]
    head = init_head(d, c, SplitMix64(21))
    assert head.w.size + head.b.size == count_params(d, c)["classifier"]


# ---------------------------------------------------------------------------
# gradients through the block
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_grad_attention_pool_classify_chain(seed):
    d, h, t = 8, 2, 4
    rng = SplitMix64(100 + seed)
    x_val = rng.normal((2, t, d))
    mask = np.array([[True, True, True, False], [True, True, True, True]])
    s = np.array([[1, 1, 1, 0], [1, 1, 1, 1]])
    pe = sinusoidal_pe(16, d)
    labels = np.array([0, 1])
    init = init_sat(d, h, SplitMix64(seed))

    def fn(params):
        tape = nc.Tape()
        leaves = {k: nc.Var(v) for k, v in params.items()}
        p = init_sat(d, h, SplitMix64(seed))
        for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                  "ln_gain", "ln_bias"):
            setattr(p, k, leaves[k])
        pp = PoolerParams(score_w=leaves["pool_w"], score_b=leaves["pool_b"])
        hp = HeadParams(w=leaves["head_w"], b=leaves["head_b"])
        out = sat_forward(nc.Var(x_val), s, mask, p, pe, tape=tape, ln_eps=1e-8)
        pooled = pool(out, mask, pp, tape=tape)
        logits = classify(pooled, hp, tape=tape)
        loss = nc.cross_entropy(logits, labels, tape=tape)
        grads = tape.backward(loss)
        return float(loss.value), {k: grads.get(v, np.zeros_like(v.value))
                                   for k, v in leaves.items()}

    params = {
        "wq": init.wq, "bq": init.bq, "wk": init.wk, "bk": init.bk,
        "wv": init.wv, "bv": init.bv, "wo": init.wo, "bo": init.bo,
        "ln_gain": init.ln_gain, "ln_bias": init.ln_bias,
        "pool_w": SplitMix64(200 + seed).normal((d,)),
        "pool_b": np.zeros(()),
        "head_w": SplitMix64(300 + seed).normal((3, d), scale=0.5),
        "head_b": np.zeros(3),
    }
    err = nc.finite_diff_check(fn, params, step=1e-5)
    assert err <= 1e-4, err
