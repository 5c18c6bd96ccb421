"""Record types, CSV parsing, and counter/sensor alignment.

The package works with three flat CSV inputs:

``counters.csv``
    One row per (timestamp, cell, band, kind) carrying a histogram. ``kind``
    is ``PL`` (path-loss bins) or ``TA`` (timing-advance bins). Because the
    two kinds have different bin counts, rows are padded with empty trailing
    cells up to the widest histogram; the parser strips the padding and then
    enforces the exact per-kind count.

``sensors.csv``
    One row per (timestamp, road, lane) with a vehicle count from a road
    sensor.

``roads.csv``
    Static metadata joining each road to the LTE site that covers it.

Timestamps are ISO-8601, interpreted as UTC (naive values are assumed UTC),
and must fall on 15-minute boundaries.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np

from .errors import DataError

INTERVAL = timedelta(minutes=15)
KINDS = ("PL", "TA")
BANDS_DEFAULT = ("800", "1800a", "1800b", "2600")
ROAD_CATEGORIES = ("highway", "large_city_road", "small_city_road")

COUNTER_FIELDS = ("timestamp", "site_id", "cell_id", "band", "kind")
SENSOR_FIELDS = ("timestamp", "road_id", "lane_id", "vehicle_count")
ROAD_FIELDS = (
    "road_id",
    "site_id",
    "distance_m",
    "distance_max_m",
    "lanes",
    "maxspeed_kmh",
    "category",
)


def parse_timestamp(text):
    """Parse an ISO-8601 timestamp, returning a UTC-aware datetime.

    Naive inputs are taken to be UTC. ``Z`` suffixes are accepted.
    """
    try:
        ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise DataError(f"bad timestamp {text!r}: {exc}") from None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts):
    """Render a UTC datetime in the compact form used by the CSV writers."""
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def check_aligned(ts):
    """Require ``ts`` to sit on a 15-minute boundary."""
    if ts.minute % 15 or ts.second or ts.microsecond:
        raise DataError(
            f"timestamp {format_timestamp(ts)} is not aligned to a 15-minute interval"
        )
    return ts


@dataclass(frozen=True)
class CounterSchema:
    """Shape of the counter data: bin counts per kind and the band set.

    Attributes
    ----------
    pl_bins : int
        Number of path-loss histogram bins.
    ta_bins : int
        Number of timing-advance histogram bins.
    bands : tuple of str
        Frequency band labels expected for every site.
    """

    pl_bins: int = 21
    ta_bins: int = 35
    bands: tuple = BANDS_DEFAULT

    def __post_init__(self):
        if self.pl_bins < 1 or self.ta_bins < 1:
            raise DataError("bin counts must be positive")
        if not self.bands or len(set(self.bands)) != len(self.bands):
            raise DataError("bands must be a non-empty set of distinct labels")

    def bins_for(self, kind):
        if kind == "PL":
            return self.pl_bins
        if kind == "TA":
            return self.ta_bins
        raise DataError(f"unknown counter kind {kind!r}")

    @property
    def max_bins(self):
        return max(self.pl_bins, self.ta_bins)


@dataclass(frozen=True)
class CounterRecord:
    """A single histogram row from counters.csv."""

    timestamp: datetime
    site_id: str
    cell_id: str
    band: str
    kind: str
    bins: tuple

    def __post_init__(self):
        check_aligned(self.timestamp)
        if self.kind not in KINDS:
            raise DataError(f"unknown counter kind {self.kind!r}")
        if any(b < 0 for b in self.bins):
            raise DataError("counter bins must be non-negative")


@dataclass(frozen=True)
class SensorRecord:
    """A single road-sensor reading from sensors.csv."""

    timestamp: datetime
    road_id: str
    lane_id: str
    vehicle_count: int

    def __post_init__(self):
        check_aligned(self.timestamp)
        if self.vehicle_count < 0:
            raise DataError("vehicle_count must be non-negative")


@dataclass(frozen=True)
class RoadMeta:
    """Static description of a monitored road segment.

    ``distance_m`` is the distance from the serving LTE site to the near edge
    of the segment; ``distance_max_m``, when present, is the distance to the
    far edge (roads running radially away from the site span a range of
    timing-advance bins). ``category`` is one of ``highway``,
    ``large_city_road``, ``small_city_road``.
    """

    road_id: str
    site_id: str
    distance_m: float
    distance_max_m: float = None
    lanes: int = 1
    maxspeed_kmh: float = 50.0
    category: str = "small_city_road"

    def __post_init__(self):
        if self.distance_m < 0:
            raise DataError("distance_m must be non-negative")
        if self.distance_max_m is not None and self.distance_max_m < self.distance_m:
            raise DataError("distance_max_m must be >= distance_m")
        if self.lanes < 1:
            raise DataError("lanes must be a positive integer")
        if self.maxspeed_kmh <= 0:
            raise DataError("maxspeed_kmh must be positive")
        if self.category not in ROAD_CATEGORIES:
            raise DataError(
                f"unknown road category {self.category!r}; "
                f"expected one of {ROAD_CATEGORIES}"
            )


def _read_rows(path, expected_prefix, label):
    """Yield (line_number, fields) from a CSV after validating its header."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {label} file {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{label} file {path} is empty") from None
        got = tuple(header[: len(expected_prefix)])
        if got != expected_prefix:
            raise DataError(
                f"{label} file {path} has unexpected header {got}, "
                f"expected {expected_prefix}"
            )
        rest = header[len(expected_prefix):]
        for j, name in enumerate(rest):
            if name != f"bin_{j}":
                raise DataError(
                    f"{label} file {path} has unexpected header column {name!r}"
                )
        rows = [(i, row) for i, row in enumerate(reader, start=2) if row]
    return rows


def _int_field(value, name, line):
    try:
        return int(value)
    except ValueError:
        raise DataError(f"line {line}: {name} {value!r} is not an integer") from None


def parse_counters(path, schema=None):
    """Parse counters.csv into a list of :class:`CounterRecord`.

    Raises :class:`DataError` on malformed rows, wrong bin counts for a
    kind, unknown bands, or duplicate (cell, timestamp, kind) rows.
    """
    schema = schema or CounterSchema()
    records = []
    seen = set()
    for line, row in _read_rows(path, COUNTER_FIELDS, "counters"):
        if len(row) < len(COUNTER_FIELDS):
            raise DataError(f"line {line}: wrong column count")
        ts_text, site, cell, band, kind = (v.strip() for v in row[:5])
        if kind not in KINDS:
            raise DataError(f"line {line}: unknown counter kind {kind!r}")
        if band not in schema.bands:
            raise DataError(f"line {line}: unknown band {band!r}")
        cells = [v.strip() for v in row[5:]]
        while cells and cells[-1] == "":
            cells.pop()
        if len(cells) != schema.bins_for(kind):
            raise DataError(
                f"line {line}: wrong column count for kind {kind}: "
                f"got {len(cells)} bins, expected {schema.bins_for(kind)}"
            )
        bins = tuple(_int_field(c, "bin value", line) for c in cells)
        try:
            rec = CounterRecord(parse_timestamp(ts_text), site, cell, band, kind, bins)
        except DataError as exc:
            raise DataError(f"line {line}: {exc}") from None
        key = (rec.cell_id, rec.timestamp, rec.kind)
        if key in seen:
            raise DataError(
                f"line {line}: duplicate counter row for cell {rec.cell_id} "
                f"at {format_timestamp(rec.timestamp)} kind {rec.kind}"
            )
        seen.add(key)
        records.append(rec)
    return records


def parse_sensors(path):
    """Parse sensors.csv into a list of :class:`SensorRecord`."""
    records = []
    seen = set()
    for line, row in _read_rows(path, SENSOR_FIELDS, "sensors"):
        if len(row) != len(SENSOR_FIELDS):
            raise DataError(f"line {line}: wrong column count")
        ts_text, road, lane, count = (v.strip() for v in row)
        try:
            rec = SensorRecord(
                parse_timestamp(ts_text),
                road,
                lane,
                _int_field(count, "vehicle_count", line),
            )
        except DataError as exc:
            raise DataError(f"line {line}: {exc}") from None
        key = (rec.road_id, rec.lane_id, rec.timestamp)
        if key in seen:
            raise DataError(
                f"line {line}: duplicate sensor row for road {rec.road_id} "
                f"lane {rec.lane_id} at {format_timestamp(rec.timestamp)}"
            )
        seen.add(key)
        records.append(rec)
    return records


def parse_roads(path):
    """Parse roads.csv into a list of :class:`RoadMeta`."""
    metas = []
    seen = set()
    for line, row in _read_rows(path, ROAD_FIELDS, "roads"):
        if len(row) != len(ROAD_FIELDS):
            raise DataError(f"line {line}: wrong column count")
        road, site, dist, dist_max, lanes, speed, cat = (v.strip() for v in row)
        try:
            meta = RoadMeta(
                road_id=road,
                site_id=site,
                distance_m=float(dist),
                distance_max_m=float(dist_max) if dist_max else None,
                lanes=_int_field(lanes, "lanes", line),
                maxspeed_kmh=float(speed),
                category=cat,
            )
        except (DataError, ValueError) as exc:
            raise DataError(f"line {line}: {exc}") from None
        if meta.road_id in seen:
            raise DataError(f"line {line}: duplicate road_id {meta.road_id!r}")
        seen.add(meta.road_id)
        metas.append(meta)
    return metas


def write_counters(records, path, schema=None):
    """Write counter records, padding every row to the widest histogram."""
    schema = schema or CounterSchema()
    width = schema.max_bins
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(COUNTER_FIELDS) + [f"bin_{j}" for j in range(width)])
        for rec in records:
            bins = list(rec.bins) + [""] * (width - len(rec.bins))
            writer.writerow(
                [
                    format_timestamp(rec.timestamp),
                    rec.site_id,
                    rec.cell_id,
                    rec.band,
                    rec.kind,
                ]
                + bins
            )


def write_sensors(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SENSOR_FIELDS)
        for rec in records:
            writer.writerow(
                [
                    format_timestamp(rec.timestamp),
                    rec.road_id,
                    rec.lane_id,
                    rec.vehicle_count,
                ]
            )


def write_roads(metas, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROAD_FIELDS)
        for m in metas:
            writer.writerow(
                [
                    m.road_id,
                    m.site_id,
                    f"{m.distance_m:g}",
                    "" if m.distance_max_m is None else f"{m.distance_max_m:g}",
                    m.lanes,
                    f"{m.maxspeed_kmh:g}",
                    m.category,
                ]
            )


@dataclass(frozen=True)
class AlignedRow:
    """One complete (road, timestamp) cell of the aligned dataset.

    ``pl`` and ``ta`` map band labels to read-only integer histogram arrays;
    ``target`` is the vehicle count summed over the road's lanes.
    """

    road_id: str
    timestamp: datetime
    pl: dict
    ta: dict
    target: int


@dataclass(frozen=True)
class AlignedDataset:
    """Joined counter/sensor data, complete cells only.

    Rows are sorted by (road_id, timestamp). Every retained row has all
    bands for both counter kinds and a full set of lane readings; anything
    partial was dropped and counted in ``dropped``.
    """

    roads: tuple
    rows: tuple
    dropped: int
    schema: CounterSchema
    _road_index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(
            self, "_road_index", {m.road_id: m for m in self.roads}
        )

    @property
    def road_ids(self):
        return tuple(m.road_id for m in self.roads)

    def road(self, road_id):
        try:
            return self._road_index[road_id]
        except KeyError:
            raise DataError(f"unknown road_id {road_id!r}") from None

    def rows_for(self, road_id):
        return tuple(r for r in self.rows if r.road_id == road_id)

    @property
    def timestamps(self):
        """Sorted distinct timestamps across all rows."""
        return tuple(sorted({r.timestamp for r in self.rows}))


def _freeze(a):
    arr = np.asarray(a, dtype=np.int64)
    arr.setflags(write=False)
    return arr


def align(counters, sensors, roads, schema=None):
    """Join counters and sensors on the 15-minute grid.

    A (road, timestamp) cell survives only if the road's site has every
    band for both kinds at that timestamp and the road has a reading for
    each of its lanes. Lane counts are summed into the target. Partial
    cells are dropped and counted; if nothing survives the timestamp
    intersection is empty and a :class:`DataError` is raised.

    Returns an :class:`AlignedDataset` whose roads are those with at least
    one surviving row, in road_id order.
    """
    schema = schema or CounterSchema()
    road_by_id = {}
    for meta in roads:
        if meta.road_id in road_by_id:
            raise DataError(f"duplicate road_id {meta.road_id!r}")
        road_by_id[meta.road_id] = meta

    sensor_roads = {s.road_id for s in sensors}
    unknown = sorted(sensor_roads - set(road_by_id))
    if unknown:
        raise DataError(f"sensor rows reference unknown road_id {unknown[0]!r}")

    counter_sites = {c.site_id for c in counters}
    for meta in road_by_id.values():
        if meta.site_id not in counter_sites:
            raise DataError(
                f"road {meta.road_id!r} references site {meta.site_id!r}, "
                "which has no counter rows"
            )

    # (site, ts) -> kind -> band -> bins
    by_site = {}
    for rec in counters:
        if len(rec.bins) != schema.bins_for(rec.kind):
            raise DataError(
                f"counter row for cell {rec.cell_id} has {len(rec.bins)} bins, "
                f"expected {schema.bins_for(rec.kind)} for kind {rec.kind}"
            )
        cell = by_site.setdefault((rec.site_id, rec.timestamp), {"PL": {}, "TA": {}})
        if rec.band in cell[rec.kind]:
            raise DataError(
                f"duplicate counter data for site {rec.site_id} band {rec.band} "
                f"kind {rec.kind} at {format_timestamp(rec.timestamp)}"
            )
        cell[rec.kind][rec.band] = rec.bins

    # (road, ts) -> lane -> count
    by_road = {}
    for rec in sensors:
        lanes = by_road.setdefault((rec.road_id, rec.timestamp), {})
        lanes[rec.lane_id] = rec.vehicle_count

    candidates = set(by_road)
    for (site, ts) in by_site:
        for meta in road_by_id.values():
            if meta.site_id == site:
                candidates.add((meta.road_id, ts))

    rows = []
    for road_id, ts in sorted(candidates):
        meta = road_by_id[road_id]
        lanes = by_road.get((road_id, ts))
        if lanes is None:
            continue
        if len(lanes) > meta.lanes:
            raise DataError(
                f"road {road_id} has {len(lanes)} lane readings at "
                f"{format_timestamp(ts)} but only {meta.lanes} lanes"
            )
        if len(lanes) < meta.lanes:
            continue
        cell = by_site.get((meta.site_id, ts))
        if cell is None:
            continue
        if any(set(cell[kind]) != set(schema.bands) for kind in KINDS):
            continue
        rows.append(
            AlignedRow(
                road_id=road_id,
                timestamp=ts,
                pl={b: _freeze(cell["PL"][b]) for b in schema.bands},
                ta={b: _freeze(cell["TA"][b]) for b in schema.bands},
                target=sum(lanes.values()),
            )
        )

    if not rows:
        raise DataError("empty intersection of counter and sensor timestamps")

    kept_roads = tuple(
        sorted({r.road_id for r in rows})
    )
    metas = tuple(road_by_id[rid] for rid in kept_roads)
    return AlignedDataset(
        roads=metas,
        rows=tuple(rows),
        dropped=len(candidates) - len(rows),
        schema=schema,
    )


def dataset_to_records(ds):
    """Decompose an aligned dataset back into counter/sensor/road records.

    The lane decomposition is synthetic but deterministic: vehicle counts
    are split as evenly as possible across the road's lanes (earlier lanes
    get the remainder), so lane sums reproduce the targets exactly. Useful
    for round-trip checks and re-export.
    """
    counters = []
    sensors = []
    seen_sites = set()
    for row in ds.rows:
        meta = ds.road(row.road_id)
        key = (meta.site_id, row.timestamp)
        if key not in seen_sites:
            seen_sites.add(key)
            for band in ds.schema.bands:
                for kind, hist in (("PL", row.pl[band]), ("TA", row.ta[band])):
                    counters.append(
                        CounterRecord(
                            timestamp=row.timestamp,
                            site_id=meta.site_id,
                            cell_id=f"{meta.site_id}-{band}",
                            band=band,
                            kind=kind,
                            bins=tuple(int(v) for v in hist),
                        )
                    )
        base, rem = divmod(row.target, meta.lanes)
        for j in range(meta.lanes):
            sensors.append(
                SensorRecord(
                    timestamp=row.timestamp,
                    road_id=row.road_id,
                    lane_id=f"l{j + 1}",
                    vehicle_count=base + (1 if j < rem else 0),
                )
            )
    return counters, sensors, list(ds.roads)


def load_dataset(counters_path, sensors_path, roads_path, schema=None):
    """Parse the three CSVs and align them in one call."""
    schema = schema or CounterSchema()
    return align(
        parse_counters(counters_path, schema),
        parse_sensors(sensors_path),
        parse_roads(roads_path),
        schema,
    )
