"""Parsing, validation, and alignment of the raw record types."""

from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from cellflow.datamodel import (
    INTERVAL,
    AlignedDataset,
    CounterRecord,
    CounterSchema,
    DataError,
    RoadMeta,
    SensorRecord,
    align,
    check_aligned,
    dataset_to_records,
    format_timestamp,
    load_dataset,
    parse_counters,
    parse_sensors,
    parse_timestamp,
    write_counters,
    write_roads,
    write_sensors,
)

T0 = datetime(2026, 1, 5, tzinfo=timezone.utc)
SMALL = CounterSchema(pl_bins=3, ta_bins=4, bands=("800",))


def small_road(lanes=1):
    return RoadMeta("r1", "s1", 100.0, None, lanes, 50.0, "highway")


def counter_pair(ts, bins_pl=(1, 2, 3), bins_ta=(4, 3, 2, 1), cell="c1", site="s1"):
    return [
        CounterRecord(ts, site, cell, "800", "PL", np.asarray(bins_pl)),
        CounterRecord(ts, site, cell, "800", "TA", np.asarray(bins_ta)),
    ]


class TestTimestamps:
    def test_round_trip(self):
        ts = parse_timestamp("2026-01-05T08:15:00Z")
        assert ts == datetime(2026, 1, 5, 8, 15, tzinfo=timezone.utc)
        assert format_timestamp(ts) == "2026-01-05T08:15:00Z"

    def test_naive_treated_as_utc(self):
        assert parse_timestamp("2026-01-05T08:15:00") == parse_timestamp(
            "2026-01-05T08:15:00Z"
        )

    def test_check_aligned_rejects_off_grid(self):
        check_aligned(T0)
        with pytest.raises(DataError):
            check_aligned(T0 + timedelta(minutes=7))

    def test_interval_is_fifteen_minutes(self):
        assert INTERVAL == timedelta(minutes=15)


class TestRecordValidation:
    def test_road_meta_rejects_unknown_category(self):
        with pytest.raises(DataError, match="category"):
            RoadMeta("r1", "s1", 100.0, None, 1, 50.0, "bridge")

    def test_road_meta_rejects_nonpositive_lanes(self):
        with pytest.raises(DataError):
            RoadMeta("r1", "s1", 100.0, None, 0, 50.0, "highway")

    def test_sensor_rejects_negative_count(self):
        with pytest.raises(DataError, match="non-negative"):
            SensorRecord(T0, "r1", "l1", -1)

    def test_counter_rejects_unknown_kind(self):
        with pytest.raises(DataError):
            CounterRecord(T0, "s1", "c1", "800", "XX", np.array([1]))


class TestParsers:
    def test_header_only_counters_file(self, tmp_path):
        """A file with just the header parses to an empty list."""
        p = tmp_path / "c.csv"
        write_counters([], p, SMALL)
        assert parse_counters(p, SMALL) == []

    def test_counters_round_trip(self, tmp_path):
        recs = counter_pair(T0) + counter_pair(T0 + INTERVAL)
        p = tmp_path / "c.csv"
        write_counters(recs, p, SMALL)
        back = parse_counters(p, SMALL)
        assert len(back) == len(recs)
        for a, b in zip(recs, back):
            assert a.timestamp == b.timestamp
            assert a.kind == b.kind
            assert np.array_equal(a.bins, b.bins)

    def test_wrong_bin_count_rejected(self, tmp_path):
        hdr = "timestamp,site_id,cell_id,band,kind," + ",".join(
            f"bin_{i}" for i in range(4)
        )
        bad = hdr + "\n2026-01-05T00:00:00Z,s1,c1,800,PL,1,2,,\n"
        p = tmp_path / "c.csv"
        p.write_text(bad)
        with pytest.raises(DataError, match="wrong column count"):
            parse_counters(p, SMALL)

    def test_duplicate_counter_rows_rejected(self, tmp_path):
        recs = counter_pair(T0) + counter_pair(T0)
        p = tmp_path / "c.csv"
        write_counters(recs, p, SMALL)
        with pytest.raises(DataError, match="duplicate counter row"):
            parse_counters(p, SMALL)

    def test_negative_vehicle_count_rejected(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text(
            "timestamp,road_id,lane_id,vehicle_count\n"
            "2026-01-05T00:00:00Z,r1,l1,-1\n"
        )
        with pytest.raises(DataError, match="non-negative"):
            parse_sensors(p)

    def test_two_lanes_same_timestamp_are_two_records(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text(
            "timestamp,road_id,lane_id,vehicle_count\n"
            "2026-01-05T00:00:00Z,r1,l1,5\n"
            "2026-01-05T00:00:00Z,r1,l2,3\n"
        )
        recs = parse_sensors(p)
        assert len(recs) == 2
        assert {r.lane_id for r in recs} == {"l1", "l2"}

    def test_duplicate_sensor_rows_rejected(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text(
            "timestamp,road_id,lane_id,vehicle_count\n"
            "2026-01-05T00:00:00Z,r1,l1,5\n"
            "2026-01-05T00:00:00Z,r1,l1,6\n"
        )
        with pytest.raises(DataError, match="duplicate sensor row"):
            parse_sensors(p)

    def test_unexpected_header_rejected(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("time,road_id,lane_id,vehicle_count\n")
        with pytest.raises(DataError, match="unexpected header"):
            parse_sensors(p)


class TestAlign:
    def test_lane_counts_summed(self):
        cnt = counter_pair(T0)
        sen = [SensorRecord(T0, "r1", "l1", 5), SensorRecord(T0, "r1", "l2", 3)]
        ds = align(cnt, sen, [small_road(lanes=2)], SMALL)
        assert len(ds.rows) == 1
        assert ds.rows[0].target == 8
        assert np.array_equal(ds.rows[0].pl["800"], [1, 2, 3])
        assert np.array_equal(ds.rows[0].ta["800"], [4, 3, 2, 1])

    def test_missing_lane_drops_row(self):
        cnt = counter_pair(T0) + counter_pair(T0 + INTERVAL)
        sen = [
            SensorRecord(T0, "r1", "l1", 5),
            SensorRecord(T0, "r1", "l2", 3),
            SensorRecord(T0 + INTERVAL, "r1", "l1", 9),
        ]
        ds = align(cnt, sen, [small_road(lanes=2)], SMALL)
        assert [r.target for r in ds.rows] == [8]
        assert ds.dropped == 1

    def test_partial_cell_drops_row(self):
        """A timestamp whose cell lacks one counter kind does not survive."""
        cnt = counter_pair(T0)
        cnt.append(
            CounterRecord(T0 + INTERVAL, "s1", "c1", "800", "PL", np.array([1, 2, 3]))
        )
        sen = [SensorRecord(T0, "r1", "l1", 5), SensorRecord(T0 + INTERVAL, "r1", "l1", 7)]
        ds = align(cnt, sen, [small_road()], SMALL)
        assert [r.target for r in ds.rows] == [5]
        assert ds.dropped == 1

    def test_disjoint_ranges_rejected(self):
        cnt = counter_pair(T0)
        sen = [SensorRecord(T0 + INTERVAL, "r1", "l1", 5)]
        with pytest.raises(DataError, match="empty intersection"):
            align(cnt, sen, [small_road()], SMALL)

    def test_unknown_road_in_sensors_rejected(self):
        cnt = counter_pair(T0)
        sen = [SensorRecord(T0, "rX", "l1", 5)]
        with pytest.raises(DataError, match="unknown road_id"):
            align(cnt, sen, [small_road()], SMALL)

    def test_road_without_counters_rejected(self):
        cnt = counter_pair(T0, site="sZ")
        sen = [SensorRecord(T0, "r1", "l1", 5)]
        with pytest.raises(DataError, match="no counter rows"):
            align(cnt, sen, [small_road()], SMALL)

    def test_too_many_lane_readings_rejected(self):
        cnt = counter_pair(T0)
        sen = [SensorRecord(T0, "r1", f"l{i}", 1) for i in range(3)]
        with pytest.raises(DataError, match="lane readings"):
            align(cnt, sen, [small_road(lanes=1)], SMALL)

    def test_eight_weeks_row_count(self):
        """One road observed over eight full weeks yields 5376 rows."""
        n = 8 * 7 * 96
        stamps = [T0 + i * INTERVAL for i in range(n)]
        cnt = []
        sen = []
        for ts in stamps:
            cnt.extend(counter_pair(ts))
            sen.append(SensorRecord(ts, "r1", "l1", 1))
        ds = align(cnt, sen, [small_road()], SMALL)
        assert len(ds.rows) == 5376
        assert ds.dropped == 0

    def test_rows_sorted_by_road_then_time(self, tiny_ds):
        keys = [(r.road_id, r.timestamp) for r in tiny_ds.rows]
        assert keys == sorted(keys)

    def test_row_targets_match_lane_sums(self, tiny_raw, tiny_ds):
        """Brute-force lane sums from the raw records match aligned targets."""
        _, sensors, _, _ = tiny_raw
        sums = {}
        for s in sensors:
            sums[(s.road_id, s.timestamp)] = (
                sums.get((s.road_id, s.timestamp), 0) + s.vehicle_count
            )
        for row in tiny_ds.rows:
            assert row.target == sums[(row.road_id, row.timestamp)]

    def test_align_idempotent(self, tiny_ds):
        cnt, sen, roads = dataset_to_records(tiny_ds)
        again = align(cnt, sen, roads, tiny_ds.schema)
        assert len(again.rows) == len(tiny_ds.rows)
        assert again.dropped == 0
        for a, b in zip(tiny_ds.rows, again.rows):
            assert a.road_id == b.road_id
            assert a.timestamp == b.timestamp
            assert a.target == b.target
            for band in tiny_ds.schema.bands:
                assert np.array_equal(a.pl[band], b.pl[band])
                assert np.array_equal(a.ta[band], b.ta[band])

    def test_road_lookup(self, tiny_ds):
        assert tiny_ds.road("t2").site_id == "s2"
        with pytest.raises(DataError):
            tiny_ds.road("nope")


class TestFileRoundTrip:
    def test_load_dataset_matches_in_memory_align(self, tmp_path, tiny_ds, tiny_cfg):
        cnt, sen, roads = dataset_to_records(tiny_ds)
        write_counters(cnt, tmp_path / "c.csv", tiny_cfg.schema)
        write_sensors(sen, tmp_path / "s.csv")
        write_roads(roads, tmp_path / "r.csv")
        ds = load_dataset(
            tmp_path / "c.csv", tmp_path / "s.csv", tmp_path / "r.csv", tiny_cfg.schema
        )
        assert isinstance(ds, AlignedDataset)
        assert len(ds.rows) == len(tiny_ds.rows)
        assert [r.target for r in ds.rows] == [r.target for r in tiny_ds.rows]

    def test_roads_file_preserves_optional_distance(self, tmp_path):
        metas = [
            RoadMeta("a", "s1", 10.0, 20.0, 1, 30.0, "highway"),
            RoadMeta("b", "s2", 5.0, None, 2, 80.0, "small_city_road"),
        ]
        write_roads(metas, tmp_path / "r.csv")
        from cellflow.datamodel import parse_roads

        back = parse_roads(tmp_path / "r.csv")
        assert back == metas
