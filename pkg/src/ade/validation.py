"""Input validation helpers for the estimator layer.

These raise ValueError (sklearn convention) rather than the internal
exception types, so the estimators behave like any other estimator in a
pipeline or grid search.
"""

from __future__ import annotations

import numpy as np


def check_documents(X):
    """Validate a collection of non-empty text documents."""
    if isinstance(X, (str, bytes)):
        raise ValueError("expected a collection of documents, got a single string")
    docs = list(X)
    if not docs:
        raise ValueError("no documents provided")
    for i, doc in enumerate(docs):
        if not isinstance(doc, str):
            raise ValueError(f"document {i} is not a string")
        if not doc.strip():
            raise ValueError(f"document {i} is empty")
    return docs


def check_matrix(X, name="X"):
    """Validate a finite 2-D float matrix."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2 or min(arr.shape) < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_labels(y, n_samples):
    """Validate labels and return (classes, encoded 0-based labels)."""
    arr = np.asarray(y)
    if arr.ndim != 1 or arr.size != n_samples:
        raise ValueError(f"y must be 1-D with {n_samples} entries, got {arr.shape}")
    classes, encoded = np.unique(arr, return_inverse=True)
    if classes.size < 2:
        raise ValueError("need at least two classes")
    return classes, encoded.astype(np.int64)
