"""Input checks shared by the estimator API and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array
from sklearn.utils.validation import column_or_1d

from .exceptions import DataError, ShapeError

SEQUENCE_AXES = "N, M, T, V, D"


def check_sequences(X, dtype=np.float32, copy: bool = False) -> np.ndarray:
    """Validate a batch of skeleton sequences shaped ``[N, M, T, V, D]``.

    A single ``[M, T, V, D]`` sequence is not promoted; callers pass batches.
    """
    arr = np.asarray(X)
    if np.ndim(arr) != 5:
        raise ShapeError(f"expected a 5-D array [{SEQUENCE_AXES}], got shape {np.shape(arr)}")
    try:
        out = check_array(arr, allow_nd=True, dtype=dtype, copy=copy, ensure_all_finite=True,
                          ensure_min_samples=1)
    except ValueError as err:
        raise DataError(str(err)) from None
    if 0 in out.shape:
        raise ShapeError(f"empty axis in sequence batch of shape {out.shape}")
    return out


def check_targets(y, n_samples: int) -> np.ndarray:
    try:
        y = column_or_1d(y, warn=True)
    except ValueError as err:
        raise ShapeError(str(err)) from None
    if len(y) != n_samples:
        raise ShapeError(f"{n_samples} sequences but {len(y)} labels")
    return y


def check_layout(X: np.ndarray, joints: int, frames: int, persons: int, coord_dim: int) -> None:
    """Raise when a validated batch does not match a fitted model's input layout."""
    expected = (persons, frames, joints, coord_dim)
    if tuple(X.shape[1:]) != expected:
        raise ShapeError(f"model expects [N, {', '.join(map(str, expected))}], got {X.shape}")
