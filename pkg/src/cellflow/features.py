"""Feature engineering: timing-advance bin selection, cyclic time encoding,
road metadata encoding, and assembly of the model-ready feature matrix.
"""

from __future__ import annotations

import csv
import json
from bisect import bisect_left
from dataclasses import dataclass, replace
from datetime import datetime, timezone

import numpy as np

from .datamodel import format_timestamp, parse_timestamp
from .errors import DataError

TA_MAX_DISTANCE_M = 100_000.0
TA_FINE_STEP_M = 78.125
TA_FIRST_EDGE_M = 80.0

# Anchor for the cyclic encodings: a Monday at midnight UTC. Minutes since
# the most recent 4-week boundary relative to this epoch drive the
# month-scale phase; day and week phases only need the weekday alignment.
CYCLE_EPOCH = datetime(1970, 1, 5, tzinfo=timezone.utc)
DAY_MINUTES = 24 * 60
WEEK_MINUTES = 7 * DAY_MINUTES
CYCLE_MINUTES = 4 * WEEK_MINUTES

TIME_COLUMNS = ("tod_sin", "tod_cos", "dow_sin", "dow_cos", "wom_sin", "wom_cos")
ROAD_COLUMNS = ("lanes", "maxspeed_kmh", "cat_highway", "cat_large_city_road",
                "cat_small_city_road")


def default_ta_edges():
    """Distance edges (metres) of the timing-advance histogram bins.

    The first bin covers everything below 80 m. Fine-grained bins of
    78.125 m follow out to roughly 2.5 km, after which three
    geometrically widening bins reach the 100 km horizon. The result is
    36 edges delimiting 35 bins.
    """
    fine = TA_FIRST_EDGE_M + TA_FINE_STEP_M * np.arange(0, 32)
    top = fine[-1]
    ratio = (TA_MAX_DISTANCE_M / top) ** (1.0 / 3.0)
    coarse = top * ratio ** np.arange(1, 4)
    coarse[-1] = TA_MAX_DISTANCE_M
    return np.concatenate([[0.0], fine, coarse])


def _locate(edges, d):
    # Half-open on the left: a distance exactly on an edge belongs to the
    # lower-indexed bin. Distance zero still maps to bin 0.
    return max(0, bisect_left(list(edges), d) - 1)


def select_ta_bins(edges, distance_m, distance_max_m=None):
    """Indices of the TA bins overlapped by a road segment.

    ``distance_m`` is the near-edge distance; ``distance_max_m``, when
    given, the far edge. Both must lie inside ``[edges[0], edges[-1])``.
    A distance landing exactly on a bin edge resolves to the lower-indexed
    bin. Returns a contiguous, ascending tuple of bin indices.
    """
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.shape[0] < 2:
        raise DataError("edges must be a 1-d array of at least two values")
    if np.any(np.diff(edges) <= 0):
        raise DataError("edges must be strictly increasing")
    far = distance_m if distance_max_m is None else distance_max_m
    if distance_m < edges[0] or far >= edges[-1]:
        raise DataError(
            f"distance range [{distance_m}, {far}] outside the covered "
            f"interval [{edges[0]}, {edges[-1]})"
        )
    if far < distance_m:
        raise DataError("distance_max_m must be >= distance_m")
    lo = _locate(edges, distance_m)
    hi = _locate(edges, far)
    return tuple(range(lo, hi + 1))


def encode_time(ts):
    """Six cyclic features: sin/cos phases at day, week, and 4-week scales.

    Phases are derived from minutes elapsed since a fixed Monday-midnight
    epoch, so weekday and week-of-period boundaries are stable across
    datasets.
    """
    minutes = (ts.astimezone(timezone.utc) - CYCLE_EPOCH).total_seconds() / 60.0
    out = np.empty(6)
    for k, period in enumerate((DAY_MINUTES, WEEK_MINUTES, CYCLE_MINUTES)):
        phase = 2.0 * np.pi * ((minutes % period) / period)
        out[2 * k] = np.sin(phase)
        out[2 * k + 1] = np.cos(phase)
    return out


def encode_road(meta):
    """Numeric road descriptor: lane count, speed limit, one-hot category."""
    out = np.zeros(len(ROAD_COLUMNS))
    out[0] = meta.lanes
    out[1] = meta.maxspeed_kmh
    out[2 + ("highway", "large_city_road", "small_city_road").index(meta.category)] = 1.0
    return out


@dataclass(frozen=True)
class FeatureSpec:
    """Which feature groups to include and whether to standardize.

    ``use_pl`` adds every path-loss bin of every band; ``use_ta`` adds only
    the timing-advance bins each road overlaps (padded to the widest
    selection in the dataset); ``use_time`` the six cyclic time features;
    ``use_road`` static road metadata. ``standardize`` applies per-column
    z-scoring with stats from a designated fit subset; zero-variance
    columns pass through unchanged.
    """

    use_pl: bool = True
    use_ta: bool = True
    use_time: bool = True
    use_road: bool = True
    standardize: bool = False

    def __post_init__(self):
        if not (self.use_pl or self.use_ta or self.use_time or self.use_road):
            raise DataError("feature spec selects no feature groups")


def feature_column_count(spec, schema, n_selected):
    """Predicted number of feature columns.

    ``use_pl`` contributes bands * pl_bins, ``use_ta`` bands * n_selected
    (the widest per-road bin selection), ``use_time`` six, ``use_road``
    five.
    """
    total = 0
    if spec.use_pl:
        total += len(schema.bands) * schema.pl_bins
    if spec.use_ta:
        total += len(schema.bands) * n_selected
    if spec.use_time:
        total += len(TIME_COLUMNS)
    if spec.use_road:
        total += len(ROAD_COLUMNS)
    return total


@dataclass(frozen=True)
class FeatureMatrix:
    """Model-ready features with row identity and optional scaling stats.

    Attributes
    ----------
    X : ndarray of shape (n_rows, n_columns)
    y : ndarray of shape (n_rows,)
        Vehicle counts.
    columns : tuple of str
    keys : tuple of (road_id, timestamp)
        Row identities, same order as ``X``.
    mean, std : ndarray or None
        Standardization stats when the matrix was standardized. A zero
        entry in ``std`` marks a column left untouched.
    """

    X: np.ndarray
    y: np.ndarray
    columns: tuple
    keys: tuple
    mean: np.ndarray = None
    std: np.ndarray = None

    @property
    def road_ids(self):
        return tuple(sorted({k[0] for k in self.keys}))

    def rows_of(self, road_id):
        """Indices of the rows belonging to one road."""
        return np.array([i for i, k in enumerate(self.keys) if k[0] == road_id])

    def timestamps(self):
        return [k[1] for k in self.keys]


def standardize_columns(X, fit_idx=None):
    """Column-wise z-scoring; returns (Z, mean, std).

    Stats come from the rows in ``fit_idx`` (all rows when omitted) and are
    applied everywhere. Columns with zero variance over the fit rows keep
    their raw values and are flagged by ``std == 0``.
    """
    fit = X if fit_idx is None else X[np.asarray(fit_idx)]
    if fit.shape[0] == 0:
        raise DataError("standardization fit subset is empty")
    mean = fit.mean(axis=0)
    std = fit.std(axis=0)
    keep = std > 0
    Z = X.copy()
    Z[:, keep] = (X[:, keep] - mean[keep]) / std[keep]
    mean = np.where(keep, mean, 0.0)
    std = np.where(keep, std, 0.0)
    return Z, mean, std


def apply_standardization(X, mean, std):
    """Apply previously fitted stats to new rows."""
    keep = std > 0
    Z = X.copy()
    Z[:, keep] = (X[:, keep] - mean[keep]) / std[keep]
    return Z


def build_features(ds, spec=None, ta_edges=None, fit_idx=None):
    """Assemble the feature matrix for an aligned dataset.

    Row order follows the dataset (road_id, then timestamp). TA columns are
    positional: column ``ta_{band}_s{k}`` holds the k-th selected bin of
    each road, zero-padded for roads overlapping fewer bins than the
    dataset-wide maximum. ``fit_idx`` restricts standardization statistics
    to a subset of rows (for example the training portion of a temporal
    split).
    """
    spec = spec or FeatureSpec()
    edges = default_ta_edges() if ta_edges is None else np.asarray(ta_edges, float)
    schema = ds.schema

    selections = {}
    for meta in ds.roads:
        try:
            selections[meta.road_id] = select_ta_bins(
                edges, meta.distance_m, meta.distance_max_m
            )
        except DataError as exc:
            raise DataError(f"road {meta.road_id}: {exc}") from None
    n_sel = max(len(s) for s in selections.values()) if spec.use_ta else 0

    columns = []
    if spec.use_pl:
        for band in schema.bands:
            columns += [f"pl_{band}_b{j}" for j in range(schema.pl_bins)]
    if spec.use_ta:
        for band in schema.bands:
            columns += [f"ta_{band}_s{k}" for k in range(n_sel)]
    if spec.use_time:
        columns += list(TIME_COLUMNS)
    if spec.use_road:
        columns += list(ROAD_COLUMNS)

    n = len(ds.rows)
    X = np.zeros((n, len(columns)))
    y = np.empty(n)
    keys = []
    road_vecs = {m.road_id: encode_road(m) for m in ds.roads}
    for i, row in enumerate(ds.rows):
        parts = []
        if spec.use_pl:
            parts += [np.asarray(row.pl[b], float) for b in schema.bands]
        if spec.use_ta:
            sel = selections[row.road_id]
            for band in schema.bands:
                padded = np.zeros(n_sel)
                padded[: len(sel)] = np.asarray(row.ta[band], float)[list(sel)]
                parts.append(padded)
        if spec.use_time:
            parts.append(encode_time(row.timestamp))
        if spec.use_road:
            parts.append(road_vecs[row.road_id])
        X[i] = np.concatenate(parts)
        y[i] = row.target
        keys.append((row.road_id, row.timestamp))

    assert X.shape[1] == feature_column_count(spec, schema, n_sel)

    mean = std = None
    if spec.standardize:
        X, mean, std = standardize_columns(X, fit_idx)
    return FeatureMatrix(
        X=X, y=y, columns=tuple(columns), keys=tuple(keys), mean=mean, std=std
    )


def write_feature_matrix(fm, path, stats_path=None):
    """Write the matrix as CSV (keys, features, target) plus optional stats.

    The stats sidecar is a JSON object mapping column name to its mean and
    std; columns that were passed through unscaled report ``std`` 0.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["road_id", "timestamp"] + list(fm.columns) + ["target"])
        for (road_id, ts), xrow, target in zip(fm.keys, fm.X, fm.y):
            writer.writerow(
                [road_id, format_timestamp(ts)]
                + [repr(float(v)) for v in xrow]
                + [repr(float(target))]
            )
    if stats_path is not None:
        stats = {}
        if fm.mean is not None:
            stats = {
                c: {"mean": float(m), "std": float(s)}
                for c, m, s in zip(fm.columns, fm.mean, fm.std)
            }
        with open(stats_path, "w") as fh:
            json.dump(stats, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_feature_matrix(path, stats_path=None):
    """Read a feature matrix written by :func:`write_feature_matrix`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["road_id", "timestamp"] or header[-1] != "target":
            raise DataError(f"{path} is not a feature matrix file")
        columns = tuple(header[2:-1])
        keys, rows, targets = [], [], []
        for line, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"line {line}: wrong column count")
            keys.append((row[0], parse_timestamp(row[1])))
            rows.append([float(v) for v in row[2:-1]])
            targets.append(float(row[-1]))
    if not rows:
        raise DataError(f"{path} contains no data rows")
    mean = std = None
    if stats_path is not None:
        with open(stats_path) as fh:
            stats = json.load(fh)
        if stats:
            try:
                mean = np.array([stats[c]["mean"] for c in columns])
                std = np.array([stats[c]["std"] for c in columns])
            except KeyError as exc:
                raise DataError(f"stats file missing column {exc}") from None
    return FeatureMatrix(
        X=np.array(rows),
        y=np.array(targets),
        columns=columns,
        keys=tuple(keys),
        mean=mean,
        std=std,
    )


def with_feature_set(spec, name):
    """Return a copy of ``spec`` with the counter groups chosen by name.

    ``name`` is ``pl``, ``ta``, or ``both``.
    """
    flags = {"pl": (True, False), "ta": (False, True), "both": (True, True)}
    if name not in flags:
        raise DataError(f"unknown feature set {name!r}; expected pl, ta, or both")
    use_pl, use_ta = flags[name]
    return replace(spec, use_pl=use_pl, use_ta=use_ta)
