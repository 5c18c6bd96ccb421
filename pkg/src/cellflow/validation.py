"""Small input-validation helpers used by the estimators and pipeline code.

These mirror the conventions of the scikit-learn validation utilities but
raise cellflow's own error types so the CLI can map them to exit codes.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def check_array(a, name="X", ndim=2, dtype=float, allow_empty=False):
    """Coerce ``a`` to a contiguous ndarray and validate its shape.

    Parameters
    ----------
    a : array-like
        Input to validate.
    name : str
        Name used in error messages.
    ndim : int
        Required number of dimensions.
    dtype : numpy dtype
        Target dtype for the returned array.
    allow_empty : bool
        Whether a zero-length first axis is acceptable.

    Returns
    -------
    numpy.ndarray
    """
    arr = np.ascontiguousarray(a, dtype=dtype)
    if arr.ndim != ndim:
        raise DataError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise DataError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_X_y(X, y):
    """Validate a feature matrix and target vector together."""
    X = check_array(X, "X", ndim=2)
    y = check_array(y, "y", ndim=1)
    if X.shape[0] != y.shape[0]:
        raise DataError(
            f"X and y have mismatched lengths: {X.shape[0]} vs {y.shape[0]}"
        )
    return X, y


def check_sample_weight(sample_weight, n):
    """Validate per-sample weights: non-negative, length ``n``, positive sum."""
    w = check_array(sample_weight, "sample_weight", ndim=1)
    if w.shape[0] != n:
        raise DataError(f"sample_weight has length {w.shape[0]}, expected {n}")
    if np.any(w < 0):
        raise DataError("sample_weight contains negative values")
    if w.sum() <= 0:
        raise DataError("sample_weight sums to zero")
    return w


def check_fitted(est, attr):
    """Raise if ``est`` lacks the fitted attribute ``attr``."""
    if not hasattr(est, attr):
        raise DataError(
            f"{type(est).__name__} instance is not fitted; call fit() first"
        )


def check_predict_input(X, n_features):
    """Validate prediction input against the fitted feature count."""
    X = check_array(X, "X", ndim=2)
    if X.shape[1] != n_features:
        raise DataError(
            f"X has {X.shape[1]} features, model was fitted with {n_features}"
        )
    return X
