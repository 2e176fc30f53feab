import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ade.codebook import (AnchorMatrix, build_vp, compose, compression_report,
                          expand_slots, flatten_codebook, load_codebook,
                          lookup, save_codebook, unflatten)
from ade.errors import ConfigurationError, CorruptionError
from ade.rng import SplitMix64


def test_build_vp_threshold_definition():
    cb = build_vp(np.array([[0.5, 0.0, 0.3, 0.05]]), tau=0.1)
    idx, w = cb.word(0)
    assert idx.tolist() == [0, 2]
    assert np.allclose(w, [0.5, 0.3])
    assert cb.cardinalities.tolist() == [2]


def test_build_vp_identity_transform():
    cb = build_vp(np.eye(5), tau=0.5)
    for i in range(5):
        idx, w = cb.word(i)
        assert idx.tolist() == [i]
        assert w.tolist() == [1.0]


def test_build_vp_empty_set_falls_back_to_argmax():
    cb = build_vp(np.array([[0.05, 0.02]]), tau=0.1)
    idx, w = cb.word(0)
    assert idx.tolist() == [0]
    assert np.allclose(w, [0.05])


def test_build_vp_rejects_empty_matrix():
    with pytest.raises(ConfigurationError):
        build_vp(np.zeros((0, 4)), tau=0.1)
    with pytest.raises(ConfigurationError):
        build_vp(np.zeros((3, 0)), tau=0.1)


def test_build_vp_indices_sorted_and_unique():
    transform = SplitMix64(0).uniform((40, 9))
    cb = build_vp(transform, tau=0.5)
    for i in range(40):
        idx, _ = cb.word(i)
        assert np.all(np.diff(idx) > 0)
        assert 1 <= idx.size <= 9


@settings(derandomize=True, max_examples=30)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.5), st.floats(0.0, 0.4))
def test_build_vp_monotone_shrinkage(seed, tau, bump):
    transform = SplitMix64(seed).uniform((12, 6))
    low = build_vp(transform, tau=tau).cardinalities
    high = build_vp(transform, tau=tau + bump).cardinalities
    assert np.all(high <= low)
    assert np.all(high >= 1)


def test_flatten_full_rows_have_no_padding():
    anchors = AnchorMatrix(SplitMix64(1).normal((3, 2)))
    cb = build_vp(np.full((4, 3), 0.7), tau=0.1)  # every anchor active
    fe = flatten_codebook(cb, anchors)
    want = anchors.values.reshape(-1)
    for i in range(4):
        assert np.array_equal(fe.table[i], want)


def test_flatten_padding_definition():
    # one word, k=1 of K=3, d=2, anchor [1, 2] -> [1, 2, 0, 0, 0, 0]
    anchors = AnchorMatrix(np.array([[1.0, 2.0], [9.0, 9.0], [8.0, 8.0]]))
    cb = build_vp(np.array([[0.9, 0.0, 0.0]]), tau=0.5)
    fe = flatten_codebook(cb, anchors)
    assert np.array_equal(fe.table[0], np.array([1.0, 2.0, 0, 0, 0, 0]))
    assert fe.cardinalities.tolist() == [1]


def test_unflatten_round_trip():
    rng = SplitMix64(2)
    anchors = AnchorMatrix(rng.normal((6, 3)))
    cb = build_vp(rng.uniform((10, 6)), tau=0.55)
    fe = flatten_codebook(cb, anchors)
    rows, cards = unflatten(fe)
    assert np.array_equal(cards, cb.cardinalities)
    for i in range(10):
        idx, _ = cb.word(i)
        assert np.array_equal(rows[i], anchors.values[idx])


def test_flatten_rejects_out_of_range_index():
    anchors = AnchorMatrix(np.ones((2, 2)))
    cb = build_vp(np.array([[0.2, 0.3, 0.4]]), tau=0.1)  # K=3 codebook
    with pytest.raises(CorruptionError):
        flatten_codebook(cb, anchors)


def test_lookup_hand_trace():
    # B=1, L=2, cardinalities [2, 1]: three anchor rows in batch order
    anchors = AnchorMatrix(SplitMix64(3).normal((4, 2)))
    transform = np.array([[0.6, 0.5, 0.0, 0.0],
                          [0.0, 0.0, 0.9, 0.0]])
    cb = build_vp(transform, tau=0.1)
    gs = lookup(cb, anchors, np.array([[0, 1]]), np.ones((1, 2), dtype=bool))
    assert gs.anchor_ids.tolist() == [0, 1, 2]
    assert gs.pos_map.tolist() == [0, 0, 1]
    assert gs.global_id.tolist() == [0, 0, 1]
    assert gs.slot_map.tolist() == [0, 1, 2]
    assert gs.sub_lengths.tolist() == [[2, 1]]
    assert gs.mask.tolist() == [[True, True, True]]


def test_lookup_single_word():
    anchors = AnchorMatrix(np.array([[3.0, 4.0], [1.0, 1.0]]))
    cb = build_vp(np.array([[0.0, 0.8]]), tau=0.5)
    gs = lookup(cb, anchors, np.array([[0]]), np.ones((1, 1), dtype=bool))
    assert np.array_equal(gs.anchors, np.array([[1.0, 1.0]]))
    assert np.allclose(gs.weights, [0.8])


def test_lookup_fully_masked_row_gets_sentinel():
    anchors = AnchorMatrix(np.ones((2, 2)))
    cb = build_vp(np.full((3, 2), 0.5), tau=0.1)
    gs = lookup(cb, anchors, np.array([[1, 2], [0, 1]]),
                np.array([[False, False], [True, True]]))
    first_row = gs.batch_map == 0
    assert first_row.sum() == 1
    assert gs.weights[first_row].tolist() == [0.0]
    assert gs.weight_slots[first_row].tolist() == [-1]
    assert gs.mask[0].sum() == 1  # exactly one valid sentinel slot


def test_lookup_masked_words_contribute_nothing():
    anchors = AnchorMatrix(SplitMix64(4).normal((3, 2)))
    cb = build_vp(SplitMix64(5).uniform((5, 3)), tau=0.3)
    gs = lookup(cb, anchors, np.array([[0, 1, 2]]),
                np.array([[True, False, True]]))
    assert gs.sub_lengths[0, 1] == 0
    assert np.all(gs.pos_map != 1)


def test_compose_weighted_sum_definition():
    anchors = AnchorMatrix(np.array([[1.0, 0.0], [0.0, 1.0]]))
    cb = build_vp(np.array([[0.5, 2.0]]), tau=0.1)
    gs = lookup(cb, anchors, np.array([[0]]), np.ones((1, 1), dtype=bool))
    out = compose(gs)
    assert np.allclose(out[0, 0], [0.5, 2.0], atol=1e-15)


def test_compose_single_anchor_identity():
    anchors = AnchorMatrix(np.array([[2.5, -1.0]]))
    cb = build_vp(np.array([[1.0]]), tau=0.5)
    gs = lookup(cb, anchors, np.array([[0]]), np.ones((1, 1), dtype=bool))
    assert np.allclose(compose(gs)[0, 0], [2.5, -1.0], atol=1e-15)


def test_compose_matches_dense_product_oracle():
    rng = SplitMix64(6)
    n, k, d = 20, 8, 4
    transform = rng.uniform((n, k))
    anchors = AnchorMatrix(rng.normal((k, d)))
    tau = 0.4
    cb = build_vp(transform, tau)
    ids = rng.integers(0, n, (3, 5))
    mask = np.ones((3, 5), dtype=bool)
    gs = lookup(cb, anchors, ids, mask)
    out = compose(gs)
    # dense oracle: zero out sub-threshold entries (keeping the argmax
    # fallback for all-below rows), then multiply
    dense = np.where(transform >= tau, transform, 0.0)
    for i in np.flatnonzero((transform < tau).all(axis=1)):
        j = transform[i].argmax()
        dense[i, j] = transform[i, j]
    want = dense @ anchors.values
    for b in range(3):
        for l in range(5):
            assert np.max(np.abs(out[b, l] - want[ids[b, l]])) < 1e-12


def test_sparse_and_flattened_paths_agree():
    rng = SplitMix64(7)
    for trial in range(10):
        n = int(rng.integers(4, 50, ()))
        k = int(rng.integers(2, 16, ()))
        d = int(rng.integers(2, 16, ()))
        transform = rng.uniform((n, k))
        anchors = AnchorMatrix(rng.normal((k, d)))
        cb = build_vp(transform, 0.5)
        fe = flatten_codebook(cb, anchors)
        ids = rng.integers(0, n, (2, 4))
        gs = lookup(cb, anchors, ids, np.ones((2, 4), dtype=bool))
        sparse_out = compose(gs)
        for b in range(2):
            for l in range(4):
                word = int(ids[b, l])
                ki = int(fe.cardinalities[word])
                rows = fe.table[word, : ki * d].reshape(ki, d)
                _, w = cb.word(word)
                flat_out = w @ rows
                assert np.max(np.abs(sparse_out[b, l] - flat_out)) < 1e-12


def test_expand_slots_layout():
    anchors = AnchorMatrix(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
    transform = np.array([[0.5, 0.4, 0.0], [0.0, 0.0, 2.0]])
    cb = build_vp(transform, tau=0.1)
    gs = lookup(cb, anchors, np.array([[0, 1], [1, 1]]),
                np.array([[True, True], [True, False]]))
    out = expand_slots(gs)
    assert out.shape == (2, 3, 2)
    assert np.allclose(out[0, 0], [0.5, 0.0])   # word 0, anchor 0 * 0.5
    assert np.allclose(out[0, 1], [0.0, 0.4])   # word 0, anchor 1 * 0.4
    assert np.allclose(out[0, 2], [2.0, 2.0])   # word 1, anchor 2 * 2.0
    assert np.allclose(out[1, 0], [2.0, 2.0])
    assert np.all(out[1, 1:] == 0.0)            # padding slots exactly zero


# ---------------------------------------------------------------------------
# compression accounting
# ---------------------------------------------------------------------------

def test_compression_anchor_params_exact():
    for k, want in [(100, 76_800), (200, 153_600), (300, 230_400), (500, 384_000)]:
        rep = compression_report(128_100, 768, k, cardinalities=8.4,
                                 baseline_params=98_380_800)
        assert rep.anchor_params == want


def test_compression_baseline_exact():
    rep = compression_report(128_100, 768, 100, cardinalities=8.4,
                             baseline_params=98_380_800)
    assert rep.baseline_bytes == 98_380_800 * 4
    assert round(rep.baseline_mb, 1) == 375.3


def test_compression_storage_arithmetic_oracle():
    # independent integer arithmetic for the documented layout
    n, d, k, avg_k = 128_100, 768, 100, 8.4
    rep = compression_report(n, d, k, cardinalities=avg_k, index_bytes=4,
                             weight_bytes=4, cardinality_bytes=0,
                             baseline_params=98_380_800)
    storage = 4 * k * d + avg_k * n * (4 + 4)
    assert rep.storage_bytes == storage
    assert abs(rep.storage_mb - 8.49) / 8.49 < 0.02   # table row within 2%
    assert abs(rep.ratio - 44.0) < 0.5


def test_compression_ratio_decreasing_in_avg_k():
    ratios = [compression_report(128_100, 768, 100, cardinalities=k,
                                 baseline_params=98_380_800).ratio
              for k in (4.0, 6.0, 8.4, 12.0)]
    assert all(a > b for a, b in zip(ratios, ratios[1:]))


def test_compression_flat_in_k_for_published_profiles():
    # per-K average cardinalities implied by the published storage table
    # under the 4B+4B layout (see decisions ledger)
    profile = {100: 8.4, 200: 8.39, 300: 8.39, 500: 8.0}
    ratios = {k: compression_report(128_100, 768, k, cardinalities=avg,
                                    cardinality_bytes=0,
                                    baseline_params=98_380_800).ratio
              for k, avg in profile.items()}
    assert ratios[500] >= 0.9 * ratios[100]
    assert all(r >= 40.0 for r in ratios.values())


def test_compression_rejects_bad_sizes():
    with pytest.raises(ConfigurationError):
        compression_report(0, 768, 100, cardinalities=8.4)


def test_compression_accepts_cardinality_array():
    cards = np.array([1, 2, 3, 4])
    rep = compression_report(4, 8, 4, cardinalities=cards)
    assert rep.storage_bytes == 4 * 32 + 10 * 8 + 4 * 2


# ---------------------------------------------------------------------------
# binary artifact
# ---------------------------------------------------------------------------

def test_codebook_round_trip(tmp_path):
    rng = SplitMix64(8)
    transform = rng.uniform((12, 5)).astype(np.float32).astype(np.float64)
    anchors = AnchorMatrix(rng.normal((5, 3)).astype(np.float32))
    cb = build_vp(transform, 0.4)
    path = tmp_path / "toy.adecb"
    save_codebook(path, cb, anchors, 0.4)
    cb2, anchors2, tau2 = load_codebook(path)
    assert tau2 == 0.4
    assert cb2.n_vocab == cb.n_vocab and cb2.anchor_count == cb.anchor_count
    assert np.array_equal(cb2.indices, cb.indices)
    assert np.array_equal(cb2.offsets, cb.offsets)
    # weights and anchors survive the float32 boundary exactly here
    assert np.array_equal(cb2.weights, cb.weights.astype(np.float32))
    assert np.array_equal(anchors2.values, anchors.values)


def test_codebook_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.adecb"
    path.write_bytes(b"NOTACB" + b"\0" * 64)
    with pytest.raises(CorruptionError):
        load_codebook(path)


def test_codebook_rejects_truncation(tmp_path):
    rng = SplitMix64(9)
    anchors = AnchorMatrix(rng.normal((3, 2)))
    cb = build_vp(rng.uniform((6, 3)), 0.5)
    path = tmp_path / "toy.adecb"
    save_codebook(path, cb, anchors, 0.5)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(CorruptionError):
        load_codebook(path)
