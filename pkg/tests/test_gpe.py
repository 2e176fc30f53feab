import math

import numpy as np
import pytest

from ade.errors import ConfigurationError, DimensionError
from ade.gpe import grouped_pe, pos_indices, sinusoidal_pe
from ade.rng import SplitMix64


def test_position_zero_row():
    table = sinusoidal_pe(4, 6).values
    assert np.array_equal(table[0], np.array([0.0, 1.0, 0.0, 1.0, 0.0, 1.0]))


def test_closed_form_rows():
    table = sinusoidal_pe(4, 4).values
    # divisors 10000^(2i/d): 1 and 100
    want1 = [math.sin(1.0), math.cos(1.0), math.sin(0.01), math.cos(0.01)]
    want2 = [math.sin(2.0), math.cos(2.0), math.sin(0.02), math.cos(0.02)]
    assert np.allclose(table[1], want1, atol=1e-15)
    assert np.allclose(table[2], want2, atol=1e-15)


def test_odd_width_rejected():
    with pytest.raises(ConfigurationError):
        sinusoidal_pe(8, 5)


def test_pos_indices_worked_example():
    assert pos_indices([3, 1, 4]).tolist() == [0, 0, 0, 1, 2, 2, 2, 2]


def test_pos_indices_identity_and_single_group():
    assert pos_indices([1, 1]).tolist() == [0, 1]
    assert pos_indices([2]).tolist() == [0, 0]


def test_pos_indices_rejects_zero_cardinality():
    with pytest.raises(ValueError):
        pos_indices([2, 0, 1])


def test_grouped_pe_worked_example():
    table = sinusoidal_pe(8, 6)
    rows = grouped_pe(table, [3, 1, 4])
    want = table.values[[0, 0, 0, 1, 2, 2, 2, 2]]
    assert np.array_equal(rows, want)


def test_grouped_pe_all_ones_is_standard_encoding():
    table = sinusoidal_pe(8, 6)
    rows = grouped_pe(table, [1, 1, 1, 1])
    assert np.array_equal(rows, table.values[:4])


def test_grouped_pe_row_count():
    table = sinusoidal_pe(16, 4)
    s = [2, 5, 1, 3]
    assert grouped_pe(table, s).shape == (sum(s), 4)


def test_grouped_pe_length_guard():
    table = sinusoidal_pe(3, 4)
    with pytest.raises(DimensionError):
        grouped_pe(table, [1, 1, 1, 1])


def test_rows_identical_within_group_distinct_across():
    table = sinusoidal_pe(32, 8)
    rng = SplitMix64(0)
    for _ in range(20):
        length = int(rng.integers(1, 8, ()))
        s = rng.integers(1, 9, (length,))
        rows = grouped_pe(table, s)
        idx = pos_indices(s)
        # brute-force word_position expansion
        expect = []
        for word, k in enumerate(s):
            expect.extend([word] * int(k))
        assert idx.tolist() == expect
        for t, word in enumerate(expect):
            assert np.array_equal(rows[t], table.values[word])
        # adjacent groups differ (positions < one sinusoid period)
        starts = np.cumsum([0] + list(s[:-1]))
        for a, b in zip(starts[:-1], starts[1:]):
            assert not np.array_equal(rows[a], rows[b])


def test_concatenation_property():
    table = sinusoidal_pe(32, 6)
    s1, s2 = [2, 1], [3, 2]
    joint = grouped_pe(table, s1 + s2)
    left = grouped_pe(table, s1)
    shifted = table.values[pos_indices(s2) + len(s1)]
    assert np.array_equal(joint, np.concatenate([left, shifted]))
