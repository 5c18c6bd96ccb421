"""Synthetic scenario generator: determinism, couplings, file round trips."""

import hashlib
import math
from datetime import timedelta

import numpy as np
import pytest
import tomli

from cellflow.datamodel import RoadMeta, parse_counters, parse_roads, parse_sensors
from cellflow.errors import ConfigError
from cellflow.features import default_ta_edges, select_ta_bins
from cellflow.synth import (
    SCENARIO_START,
    DomainShift,
    RoadScenario,
    ScenarioConfig,
    daily_profile,
    default_scenario,
    expected_pl_bin_index,
    flow_mean,
    generate,
    generate_flows,
    load_scenario,
    preset_scenario,
    scenario_from_mapping,
    scenario_to_toml,
    shifted_scenario,
    time_grid,
    write_scenario,
)


def flat_config(base_flow=400.0, weeks=1, seed=0, **kwargs):
    """A single-road config with a constant expected flow.

    Zero peak amplitudes flatten the daily profile to its trough and the
    weekday factors are all one, so the noise-free flow is the same for
    every interval.
    """
    meta = RoadMeta("f1", "s1", 200.0, 400.0, 1, 50.0, "highway")
    road = RoadScenario(
        meta,
        base_flow=base_flow,
        peak_amplitudes=(0.0, 0.0),
        weekday_factors=(1.0,) * 7,
    )
    defaults = dict(roads=(road,), weeks=weeks, seed=seed, noise_sd=0.0, bands=("800",))
    defaults.update(kwargs)
    return ScenarioConfig(**defaults)


class TestFlows:
    def test_profile_matches_documented_formula(self):
        """The daily profile is a trough plus two Gaussian bumps."""
        amps = (1.0, 0.9)
        for minutes in (0, 180, 480, 600, 1020, 1380):
            expected = 0.15
            for amp, centre in zip(amps, (480, 1020)):
                expected += amp * math.exp(-0.5 * ((minutes - centre) / 120.0) ** 2)
            assert daily_profile(minutes, amps) == pytest.approx(expected, rel=1e-12)

    def test_trough_value_at_three_am(self):
        cfg = flat_config(base_flow=400.0)
        ts = SCENARIO_START + timedelta(hours=3)
        assert flow_mean(cfg.roads[0], ts) == pytest.approx(400.0 * 0.15)

    def test_noise_free_flows_equal_rounded_mean(self):
        cfg = flat_config(base_flow=123.0)
        flows = generate_flows(cfg)
        grid = time_grid(cfg)
        road = cfg.roads[0]
        for ts, v in zip(grid, flows["f1"]):
            assert v == round(max(0.0, flow_mean(road, ts)))

    def test_zero_sunday_factor_zeroes_sunday_counts(self):
        meta = RoadMeta("z1", "s1", 100.0, None, 1, 50.0, "highway")
        road = RoadScenario(
            meta, base_flow=300.0, weekday_factors=(1, 1, 1, 1, 1, 0.65, 0.0)
        )
        cfg = ScenarioConfig(roads=(road,), weeks=1, seed=2, noise_sd=0.0, bands=("800",))
        flows = generate_flows(cfg)
        for ts, v in zip(time_grid(cfg), flows["z1"]):
            if ts.weekday() == 6:
                assert v == 0
            elif ts.weekday() < 5:
                assert v >= 0

    def test_determinism(self, tiny_cfg):
        a = generate_flows(tiny_cfg)
        b = generate_flows(tiny_cfg)
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_noise_changes_flows_but_seed_pins_them(self):
        noisy = flat_config(seed=7, noise_sd=25.0)
        flows1 = generate_flows(noisy)["f1"]
        flows2 = generate_flows(flat_config(seed=7, noise_sd=25.0))["f1"]
        flows3 = generate_flows(flat_config(seed=8, noise_sd=25.0))["f1"]
        assert np.array_equal(flows1, flows2)
        assert not np.array_equal(flows1, flows3)


class TestCounters:
    def test_zero_vehicles_zero_background_gives_zero_ta(self):
        cfg = flat_config(base_flow=0.0, background_ta_rate=0.0)
        counters, _, _, _ = generate(cfg)
        for rec in counters:
            if rec.kind == "TA":
                assert sum(rec.bins) == 0

    def test_road_bin_ta_mean_matches_poisson_rate(self):
        """Empirical road-bin TA mean sits within 3 standard errors."""
        cfg = flat_config(base_flow=400.0, weeks=2, seed=11)
        road = cfg.roads[0]
        counters, _, _, flows = generate(cfg)
        v = round(400.0 * 0.15)
        rate = road.call_rate * cfg.calls_per_vehicle * v
        edges = default_ta_edges()
        bins = select_ta_bins(edges, road.meta.distance_m, road.meta.distance_max_m)
        samples = []
        for rec in counters:
            if rec.kind == "TA":
                samples.extend(np.asarray(rec.bins)[list(bins)])
        samples = np.asarray(samples, dtype=float)
        se = math.sqrt(rate / len(samples))
        assert abs(samples.mean() - rate) <= 3.0 * se

    def test_ta_flow_coupling_beats_background(self, tiny_cfg, tiny_raw):
        """Road-overlap TA bins track the flow; far bins do not."""
        counters, _, _, flows = tiny_raw
        road = tiny_cfg.roads[0]
        edges = default_ta_edges()
        road_bins = list(
            select_ta_bins(edges, road.meta.distance_m, road.meta.distance_max_m)
        )
        far_bins = [30, 31, 32]
        by_ts = {}
        for rec in counters:
            if rec.site_id == road.meta.site_id and rec.kind == "TA" and rec.band == "800":
                by_ts[rec.timestamp] = np.asarray(rec.bins)
        grid = sorted(by_ts)
        target = np.asarray([flows[road.meta.road_id][i] for i in range(len(grid))], float)
        near = np.asarray([by_ts[t][road_bins].sum() for t in grid], float)
        far = np.asarray([by_ts[t][far_bins].sum() for t in grid], float)
        r_near = np.corrcoef(near, target)[0, 1]
        r_far = np.corrcoef(far, target)[0, 1]
        assert r_near > 0.9
        assert r_near > r_far + 0.5

    def test_pl_mean_bin_strictly_increases_with_vehicles(self):
        cfg = flat_config()
        road = cfg.roads[0]
        idx = [expected_pl_bin_index(cfg, road, v) for v in (0, 1, 5, 20, 100, 400)]
        assert all(b > a for a, b in zip(idx, idx[1:]))

    def test_counter_row_counts(self, tiny_cfg, tiny_raw):
        counters, sensors, roads, _ = tiny_raw
        n_intervals = tiny_cfg.weeks * 7 * 96
        n_bands = len(tiny_cfg.bands)
        assert len(counters) == len(roads) * n_intervals * n_bands * 2
        assert len(sensors) == sum(r.meta.lanes for r in tiny_cfg.roads) * n_intervals


class TestScenarioFiles:
    def test_sensor_rows_per_lane_eight_weeks(self, tmp_path):
        cfg = flat_config(weeks=8, base_flow=50.0)
        meta = cfg.roads[0].meta
        cfg = ScenarioConfig(
            roads=(
                RoadScenario(
                    RoadMeta(
                        meta.road_id, meta.site_id, meta.distance_m, meta.distance_max_m,
                        2, meta.maxspeed_kmh, meta.category,
                    ),
                    base_flow=50.0,
                    peak_amplitudes=(0.0, 0.0),
                    weekday_factors=(1.0,) * 7,
                ),
            ),
            weeks=8,
            seed=1,
            bands=("800",),
        )
        write_scenario(cfg, tmp_path)
        sensors = parse_sensors(tmp_path / "sensors.csv")
        per_lane = {}
        for s in sensors:
            per_lane[s.lane_id] = per_lane.get(s.lane_id, 0) + 1
        assert per_lane == {"l1": 5376, "l2": 5376}

    def test_parse_back_reproduces_records(self, tiny_cfg, tiny_raw, scenario_dir):
        counters, sensors, roads, _ = tiny_raw
        c2 = parse_counters(scenario_dir / "counters.csv", tiny_cfg.schema)
        s2 = parse_sensors(scenario_dir / "sensors.csv")
        r2 = parse_roads(scenario_dir / "roads.csv")
        assert r2 == list(roads)
        assert len(c2) == len(counters)
        for a, b in zip(counters, c2):
            assert (a.timestamp, a.site_id, a.cell_id, a.band, a.kind) == (
                b.timestamp, b.site_id, b.cell_id, b.band, b.kind,
            )
            assert np.array_equal(np.asarray(a.bins), np.asarray(b.bins))
        assert s2 == list(sensors)

    def test_same_seed_byte_identical(self, tiny_cfg, scenario_dir, tmp_path):
        write_scenario(tiny_cfg, tmp_path)
        for name in ("counters.csv", "sensors.csv", "roads.csv", "scenario.toml"):
            a = (scenario_dir / name).read_bytes()
            b = (tmp_path / name).read_bytes()
            assert hashlib.sha256(a).hexdigest() == hashlib.sha256(b).hexdigest()

    def test_manifest_present(self, scenario_dir):
        assert (scenario_dir / "manifest.json").exists()

    def test_load_scenario_round_trip(self, tiny_cfg, scenario_dir):
        assert load_scenario(scenario_dir / "scenario.toml") == tiny_cfg


class TestScenarioToml:
    def test_mapping_round_trip(self):
        cfg = default_scenario(seed=3, weeks=2)
        assert scenario_from_mapping(tomli.loads(scenario_to_toml(cfg))) == cfg

    def test_shifted_round_trip(self):
        cfg = shifted_scenario(seed=4, weeks=1)
        back = scenario_from_mapping(tomli.loads(scenario_to_toml(cfg)))
        assert back == cfg
        assert back.domain_shift == DomainShift(1.6, 1.10)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown scenario key"):
            scenario_from_mapping({"weeks": 1, "bogus": 2, "roads": []})


class TestValidation:
    def test_empty_roads(self):
        with pytest.raises(ConfigError, match="no roads"):
            ScenarioConfig(roads=(), weeks=1, seed=0)

    def test_weeks_positive(self):
        with pytest.raises(ConfigError, match="weeks"):
            flat_config(weeks=0)

    def test_duplicate_sites(self):
        r = default_scenario().roads[0]
        with pytest.raises(ConfigError, match="site_id"):
            ScenarioConfig(roads=(r, r), weeks=1, seed=0)

    def test_negative_base_flow(self):
        meta = RoadMeta("x", "s", 10.0, None, 1, 50.0, "highway")
        with pytest.raises(ConfigError, match="base_flow"):
            RoadScenario(meta, base_flow=-5.0)

    def test_negative_domain_shift(self):
        with pytest.raises(ConfigError):
            DomainShift(background_rate=-1.0)

    def test_negative_rates(self):
        with pytest.raises(ConfigError):
            flat_config(background_ta_rate=-1.0)


class TestPresets:
    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="unknown preset"):
            preset_scenario("nope")

    def test_overrides(self):
        cfg = preset_scenario("shifted", seed=9, weeks=1)
        assert cfg.seed == 9
        assert cfg.weeks == 1

    def test_default_preset_layout(self):
        cfg = preset_scenario("default")
        assert len(cfg.roads) == 6
        assert all(r.domain == "source" for r in cfg.roads)

    def test_shifted_preset_has_target_roads(self):
        cfg = preset_scenario("shifted")
        domains = {r.meta.road_id: r.domain for r in cfg.roads}
        assert domains["b1"] == "target"
        assert domains["b2"] == "target"
        assert domains["a1"] == "source"
