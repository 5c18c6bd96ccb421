"""Scoring, split protocols, and experiment reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .datamodel import format_timestamp
from .errors import DataError
from .validation import check_array


def r2_score(y_true, y_pred):
    """Coefficient of determination, ``1 - SS_res / SS_tot``.

    Raises :class:`DataError` for a degenerate (zero-variance) target,
    where the score is undefined.
    """
    y_true = check_array(y_true, "y_true", ndim=1)
    y_pred = check_array(y_pred, "y_pred", ndim=1)
    if y_true.shape[0] != y_pred.shape[0]:
        raise DataError("y_true and y_pred have mismatched lengths")
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    if ss_tot == 0:
        raise DataError("degenerate target: zero variance, R^2 is undefined")
    ss_res = float(np.sum((y_true - y_pred) ** 2))
    return 1.0 - ss_res / ss_tot


def temporal_split(timestamps, train_frac=0.8):
    """Split row indices by time: the first ``train_frac`` of distinct
    timestamps train, the rest test.

    ``timestamps`` is one timestamp per row (roads sharing a timestamp
    land on the same side). Returns ``(train_idx, test_idx)``.
    """
    if not 0 < train_frac < 1:
        raise DataError(f"train_frac must be in (0, 1), got {train_frac}")
    ts = list(timestamps)
    if not ts:
        raise DataError("no timestamps to split")
    distinct = sorted(set(ts))
    k = int(len(distinct) * train_frac)
    if k == 0 or k == len(distinct):
        raise DataError("temporal split leaves an empty side; adjust train_frac")
    rank = {t: i for i, t in enumerate(distinct)}
    labels = np.array([rank[t] < k for t in ts])
    return np.where(labels)[0], np.where(~labels)[0]


def spatial_split(keys, source_roads, target_roads):
    """Split row indices by road identity.

    ``keys`` pairs each row with (road_id, timestamp). Source and target
    road sets must be disjoint, non-empty, and present in the data.
    Returns ``(source_idx, target_idx)``.
    """
    source = tuple(source_roads)
    target = tuple(target_roads)
    if not source or not target:
        raise DataError("source and target road sets must be non-empty")
    overlap = set(source) & set(target)
    if overlap:
        raise DataError(f"road {sorted(overlap)[0]!r} is in both source and target")
    present = {k[0] for k in keys}
    for rid in (*source, *target):
        if rid not in present:
            raise DataError(f"road {rid!r} has no rows in the dataset")
    src = np.array([i for i, k in enumerate(keys) if k[0] in source])
    tgt = np.array([i for i, k in enumerate(keys) if k[0] in target])
    return src, tgt


def per_road_scores(keys, y_true, y_pred):
    """R^2 per road over the given rows.

    Roads whose targets are degenerate in this subset score ``None``.
    Returns a dict ordered by road id.
    """
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    rows = {}
    for i, (road_id, _) in enumerate(keys):
        rows.setdefault(road_id, []).append(i)
    scores = {}
    for road_id in sorted(rows):
        idx = np.array(rows[road_id])
        try:
            scores[road_id] = r2_score(y_true[idx], y_pred[idx])
        except DataError:
            scores[road_id] = None
    return scores


def _mean_defined(scores):
    values = [v for v in scores.values() if v is not None]
    return float(np.mean(values)) if values else None


@dataclass
class EvalReport:
    """A scored experiment, serializable to JSON and a text table.

    ``per_road`` maps road id to R^2 on the evaluation rows (None where
    undefined); ``baseline_per_road``, when present, is the untransferred
    comparison column. ``mean_r2`` is the unweighted mean over roads with
    defined scores, and ``r2_overall`` the single score over all
    evaluation rows pooled.
    """

    experiment: str
    model_kind: str
    model_params: dict
    split: dict
    seed: int
    per_road: dict
    r2_overall: float = None
    baseline_per_road: dict = None
    baseline_r2_overall: float = None
    features: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    @property
    def mean_r2(self):
        return _mean_defined(self.per_road)

    @property
    def baseline_mean_r2(self):
        if self.baseline_per_road is None:
            return None
        return _mean_defined(self.baseline_per_road)

    def to_dict(self):
        return {
            "format": "cellflow-report",
            "version": 1,
            "experiment": self.experiment,
            "model_kind": self.model_kind,
            "model_params": self.model_params,
            "split": self.split,
            "seed": self.seed,
            "per_road": self.per_road,
            "mean_r2": self.mean_r2,
            "r2_overall": self.r2_overall,
            "baseline_per_road": self.baseline_per_road,
            "baseline_mean_r2": self.baseline_mean_r2,
            "baseline_r2_overall": self.baseline_r2_overall,
            "features": self.features,
            "counts": self.counts,
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("format") != "cellflow-report":
            raise DataError("not a cellflow report file")
        report = cls(
            experiment=data["experiment"],
            model_kind=data["model_kind"],
            model_params=data["model_params"],
            split=data["split"],
            seed=data["seed"],
            per_road=data["per_road"],
            r2_overall=data.get("r2_overall"),
            baseline_per_road=data.get("baseline_per_road"),
            baseline_r2_overall=data.get("baseline_r2_overall"),
            features=data.get("features", {}),
            counts=data.get("counts", {}),
            extras=data.get("extras", {}),
        )
        stored = data.get("mean_r2")
        fresh = report.mean_r2
        if stored is not None and fresh is not None and abs(stored - fresh) > 1e-9:
            raise DataError(
                f"report mean_r2 {stored} does not match its per-road scores"
            )
        return report

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read report {path}: {exc}") from None
        return cls.from_dict(data)

    def to_table(self):
        """Aligned text table; two score columns when a baseline exists."""

        def fmt(v):
            return "n/a" if v is None else f"{v:.3f}"

        having_baseline = self.baseline_per_road is not None
        head = ["road", "no transfer", "transfer"] if having_baseline else ["road", "r2"]
        rows = []
        for road_id in sorted(self.per_road):
            if having_baseline:
                rows.append(
                    [road_id, fmt(self.baseline_per_road.get(road_id)),
                     fmt(self.per_road[road_id])]
                )
            else:
                rows.append([road_id, fmt(self.per_road[road_id])])
        if having_baseline:
            rows.append(["mean", fmt(self.baseline_mean_r2), fmt(self.mean_r2)])
        else:
            rows.append(["mean", fmt(self.mean_r2)])
        if self.r2_overall is not None:
            if having_baseline:
                rows.append(
                    ["overall", fmt(self.baseline_r2_overall), fmt(self.r2_overall)]
                )
            else:
                rows.append(["overall", fmt(self.r2_overall)])
        widths = [
            max(len(head[c]), *(len(r[c]) for r in rows)) for c in range(len(head))
        ]
        lines = [
            f"experiment: {self.experiment}  model: {self.model_kind}  "
            f"seed: {self.seed}"
        ]
        lines.append("  ".join(h.ljust(w) for h, w in zip(head, widths)))
        lines.append("  ".join("-" * w for w in widths))
        for r in rows:
            lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
        return "\n".join(lines) + "\n"


def write_predictions(path, keys, y_true, y_pred):
    """Per-row actual and predicted values as CSV, for external plotting."""
    with open(path, "w") as fh:
        fh.write("road_id,timestamp,actual,predicted\n")
        for (road_id, ts), yt, yp in zip(keys, y_true, y_pred):
            fh.write(f"{road_id},{format_timestamp(ts)},{repr(float(yt))},{repr(float(yp))}\n")


def write_svg_chart(path, keys, y_true, y_pred, width=900, row_height=130):
    """Small-multiples SVG of actual versus predicted flow per road.

    Pure text output with fixed-precision coordinates, so identical
    inputs produce identical bytes.
    """
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    by_road = {}
    for i, (road_id, ts) in enumerate(keys):
        by_road.setdefault(road_id, []).append((ts, i))
    roads = sorted(by_road)
    pad = 34
    height = pad + len(roads) * row_height
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" font-family="monospace" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{pad}" y="18">actual (solid) vs predicted (dashed), '
        f"vehicles per 15 min</text>",
    ]
    for r, road_id in enumerate(roads):
        rows = sorted(by_road[road_id])
        idx = np.array([i for _, i in rows])
        top = pad + r * row_height
        lo = float(min(y_true[idx].min(), y_pred[idx].min()))
        hi = float(max(y_true[idx].max(), y_pred[idx].max()))
        span = (hi - lo) or 1.0

        def line_points(series):
            pts = []
            for k, i in enumerate(idx):
                x = pad + (width - 2 * pad) * (k / max(len(idx) - 1, 1))
                y = top + 20 + (row_height - 40) * (1.0 - (series[i] - lo) / span)
                pts.append(f"{x:.2f},{y:.2f}")
            return " ".join(pts)

        parts.append(f'<text x="{pad}" y="{top + 14}">{road_id}</text>')
        parts.append(
            f'<polyline fill="none" stroke="black" stroke-width="1" '
            f'points="{line_points(y_true)}"/>'
        )
        parts.append(
            f'<polyline fill="none" stroke="#c22" stroke-width="1" '
            f'stroke-dasharray="4 3" points="{line_points(y_pred)}"/>'
        )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
