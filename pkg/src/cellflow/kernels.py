"""Radial basis function kernel utilities.

.. warning::
    The bandwidth convention here is ``k(x, z) = exp(-||x - z||^2 / gamma)``:
    ``gamma`` *divides* the squared distance. Most Python ML libraries use the
    opposite convention, ``exp(-gamma * ||x - z||^2)``, so a gamma value tuned
    elsewhere must be inverted before being used here. Larger ``gamma`` means a
    wider, smoother kernel in this package.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .validation import check_array


def squared_distances(X, Z=None):
    """Pairwise squared Euclidean distances between rows of ``X`` and ``Z``.

    Uses the expansion ``||x||^2 + ||z||^2 - 2 x.z`` with a clip at zero to
    absorb negative round-off.
    """
    X = check_array(X, "X")
    Z = X if Z is None else check_array(Z, "Z")
    if X.shape[1] != Z.shape[1]:
        raise DataError(
            f"X and Z have mismatched feature counts: {X.shape[1]} vs {Z.shape[1]}"
        )
    xx = np.einsum("ij,ij->i", X, X)
    zz = np.einsum("ij,ij->i", Z, Z)
    d2 = xx[:, None] + zz[None, :] - 2.0 * (X @ Z.T)
    np.clip(d2, 0.0, None, out=d2)
    return d2


def rbf_kernel(X, Z=None, gamma=1.0):
    """RBF kernel matrix ``K[i, j] = exp(-||X_i - Z_j||^2 / gamma)``.

    Note the divide-by-gamma convention described in the module docstring.
    """
    if gamma <= 0:
        raise DataError(f"gamma must be positive, got {gamma}")
    return np.exp(squared_distances(X, Z) / -float(gamma))


def median_squared_distance(X, Z=None, max_points=2000):
    """Median of the pairwise squared distances, a common bandwidth heuristic.

    With the divide-by-gamma convention the result can be used directly as a
    gamma value. Inputs larger than ``max_points`` rows are thinned with an
    evenly spaced deterministic stride so the result is reproducible. Zero
    distances (duplicate rows) are excluded; if every pair is duplicated the
    result falls back to 1.0.
    """
    X = check_array(X, "X")
    Z = None if Z is None else check_array(Z, "Z")
    rows = X if Z is None else np.vstack([X, Z])
    if rows.shape[0] > max_points:
        idx = np.linspace(0, rows.shape[0] - 1, max_points).astype(int)
        rows = rows[idx]
    d2 = squared_distances(rows)
    tri = d2[np.triu_indices(rows.shape[0], k=1)]
    tri = tri[tri > 0]
    if tri.size == 0:
        return 1.0
    return float(np.median(tri))
