"""Grouped positional encoding.

Every anchor slot belonging to the same word receives that word's
positional vector, so positions distinguish words but not the anchors
within a word.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError


@dataclass
class PositionalTable:
    """Fixed sinusoidal encodings for word positions 0..L_max-1."""

    l_max: int
    d: int
    values: np.ndarray  # (l_max, d) float64


def sinusoidal_pe(l_max: int, d: int) -> PositionalTable:
    """table[p, 2i] = sin(p / 10000^(2i/d)), table[p, 2i+1] = cos(...)."""
    if d % 2 != 0:
        raise ConfigurationError(f"positional width must be even, got {d}")
    if l_max < 1:
        raise ConfigurationError(f"need at least one position, got {l_max}")
    pos = np.arange(l_max, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    angles = pos * freq[None, :]
    table = np.empty((l_max, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return PositionalTable(l_max=l_max, d=d, values=table)


def pos_indices(sub_lengths) -> np.ndarray:
    """Expand per-word anchor counts into one word index per anchor slot.

    pos_indices([3, 1, 4]) == [0, 0, 0, 1, 2, 2, 2, 2]
    """
    s = np.asarray(sub_lengths, dtype=np.int64)
    if s.ndim != 1:
        raise DimensionError("sub_lengths must be one-dimensional")
    if s.size and s.min() < 1:
        raise ValueError("anchor cardinalities must be >= 1 (clamp upstream)")
    return np.repeat(np.arange(s.size, dtype=np.int64), s)


def grouped_pe(table: PositionalTable, sub_lengths) -> np.ndarray:
    """Positional rows for a flattened anchor sequence, one per slot."""
    s = np.asarray(sub_lengths, dtype=np.int64)
    if s.size > table.l_max:
        raise DimensionError(
            f"sequence of {s.size} words exceeds table length {table.l_max}")
    return table.values[pos_indices(s)]
