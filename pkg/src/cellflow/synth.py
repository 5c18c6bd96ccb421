"""Seeded synthetic scenario generator.

Produces counters.csv / sensors.csv / roads.csv files with a known
ground-truth relationship between traffic flow and the radio counters, so
every pipeline stage can be verified against analytic expectations.

The generative model, per road and 15-minute interval:

* Flow: ``round(max(0, base_flow * daily_profile * weekday_factor + eps))``
  with Gaussian ``eps``. The daily profile is a night trough plus morning
  and evening Gaussian peaks whose amplitudes are per-road.
* Timing advance: the bins a road overlaps draw
  ``Poisson(call_rate * calls_per_vehicle * vehicles)`` each; every other
  bin draws ``Poisson(background_ta_rate)``.
* Path loss: a histogram of ``Poisson(mass)`` total samples distributed
  over a discretized Gaussian in dB whose mean rises by
  ``pl_shift_per_log_vehicle * log(1 + vehicles)``.

Roads marked ``domain = "target"`` get the configured domain-shift
multipliers applied to their background rate and path-loss mean, modelling
a second deployment with different radio conditions.

Randomness uses one counter-based generator per (road, interval, channel),
so any subset of the data can be regenerated independently and the output
is byte-identical for a given seed regardless of generation order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
from scipy.special import ndtr

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from .datamodel import (
    BANDS_DEFAULT,
    INTERVAL,
    CounterRecord,
    CounterSchema,
    RoadMeta,
    SensorRecord,
    format_timestamp,
    parse_timestamp,
    write_counters,
    write_roads,
    write_sensors,
)
from .errors import ConfigError
from .features import default_ta_edges, select_ta_bins

SCENARIO_START = datetime(2026, 1, 5, tzinfo=timezone.utc)  # a Monday
WEEK_INTERVALS = 7 * 96

PROFILE_TROUGH = 0.15
PEAK_MINUTES = (8 * 60, 17 * 60)
PEAK_WIDTH_MINUTES = 120.0

_STREAM_FLOW, _STREAM_TA, _STREAM_PL = 0, 1, 2

# Fixed per-band offsets (dB) added to the path-loss mean; higher bands
# attenuate more.
BAND_PL_OFFSET_DB = 3.0


@dataclass(frozen=True)
class RoadScenario:
    """Ground truth for one synthetic road.

    ``base_flow`` scales the daily profile (vehicles per interval at peak).
    ``peak_amplitudes`` are the morning and evening peak heights.
    ``call_rate`` multiplies the global calls-per-vehicle coupling, so
    roads can differ in how much radio activity a vehicle produces.
    ``domain`` is ``source`` or ``target``; target roads receive the
    scenario's domain-shift multipliers.
    """

    meta: RoadMeta
    base_flow: float
    peak_amplitudes: tuple = (1.0, 0.9)
    weekday_factors: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 0.65, 0.5)
    call_rate: float = 1.0
    domain: str = "source"

    def __post_init__(self):
        if self.base_flow < 0:
            raise ConfigError("base_flow must be non-negative")
        if len(self.peak_amplitudes) != 2:
            raise ConfigError("peak_amplitudes must have two entries")
        if len(self.weekday_factors) != 7:
            raise ConfigError("weekday_factors must have seven entries")
        if self.call_rate < 0:
            raise ConfigError("call_rate must be non-negative")
        if self.domain not in ("source", "target"):
            raise ConfigError(f"unknown domain {self.domain!r}")


@dataclass(frozen=True)
class DomainShift:
    """Multipliers applied to roads in the target domain."""

    background_rate: float = 1.0
    pl_mean: float = 1.0

    def __post_init__(self):
        if self.background_rate < 0 or self.pl_mean < 0:
            raise ConfigError("domain shift multipliers must be non-negative")


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete description of a synthetic scenario."""

    roads: tuple
    weeks: int = 8
    seed: int = 0
    start: datetime = SCENARIO_START
    calls_per_vehicle: float = 0.5
    background_ta_rate: float = 3.0
    pl_shift_per_log_vehicle: float = 4.0
    noise_sd: float = 8.0
    pl_mean_base_db: float = 95.0
    pl_sd_db: float = 10.0
    pl_mass_base: float = 40.0
    pl_mass_per_vehicle: float = 0.5
    bands: tuple = BANDS_DEFAULT
    domain_shift: DomainShift = field(default_factory=DomainShift)

    def __post_init__(self):
        if not self.roads:
            raise ConfigError("scenario has no roads")
        if self.weeks < 1:
            raise ConfigError("weeks must be positive")
        sites = [r.meta.site_id for r in self.roads]
        if len(set(sites)) != len(sites):
            raise ConfigError("each road needs its own site_id")
        ids = [r.meta.road_id for r in self.roads]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate road_id in scenario")
        for name in (
            "calls_per_vehicle",
            "background_ta_rate",
            "noise_sd",
            "pl_sd_db",
            "pl_mass_base",
            "pl_mass_per_vehicle",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    @property
    def schema(self):
        return CounterSchema(bands=tuple(self.bands))

    @property
    def n_intervals(self):
        return self.weeks * WEEK_INTERVALS


def time_grid(cfg):
    """The scenario's timestamps: ``weeks`` of 15-minute intervals."""
    return [cfg.start + i * INTERVAL for i in range(cfg.n_intervals)]


def daily_profile(minutes_of_day, peak_amplitudes=(1.0, 0.9)):
    """Relative flow level through the day: trough plus two Gaussian peaks."""
    level = PROFILE_TROUGH
    for amp, centre in zip(peak_amplitudes, PEAK_MINUTES):
        level += amp * np.exp(-0.5 * ((minutes_of_day - centre) / PEAK_WIDTH_MINUTES) ** 2)
    return level


def flow_mean(road, ts):
    """Expected vehicle count for ``road`` in the interval starting at ``ts``."""
    minutes = ts.hour * 60 + ts.minute
    return (
        road.base_flow
        * daily_profile(minutes, road.peak_amplitudes)
        * road.weekday_factors[ts.weekday()]
    )


def pl_mean_db(cfg, road, vehicles):
    """Path-loss mean in dB for one road at a given vehicle count."""
    shift = cfg.domain_shift.pl_mean if road.domain == "target" else 1.0
    return cfg.pl_mean_base_db * shift + cfg.pl_shift_per_log_vehicle * np.log1p(
        vehicles
    )


def pl_bin_probabilities(mean_db, sd_db, n_bins):
    """Discretized Gaussian over the path-loss histogram.

    Bin boundaries run from 50 dB upward in 5 dB steps with open-ended
    bins at both extremes.
    """
    inner = 50.0 + 5.0 * np.arange(n_bins - 1)
    cdf = np.concatenate([[0.0], ndtr((inner - mean_db) / sd_db), [1.0]])
    return np.diff(cdf)


def expected_pl_bin_index(cfg, road, vehicles, n_bins=21):
    """Mean histogram bin index implied by the generative model."""
    p = pl_bin_probabilities(pl_mean_db(cfg, road, vehicles), cfg.pl_sd_db, n_bins)
    return float(np.arange(n_bins) @ p)


class _Substreams:
    """Counter-based Philox generators, one per (interval, channel, road)."""

    def __init__(self, seed):
        self._key = np.random.SeedSequence(seed).generate_state(2, np.uint64)

    def rng(self, t_idx, stream, road_idx):
        counter = np.array([0, t_idx, stream, road_idx], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=self._key, counter=counter))


def generate_flows(cfg):
    """Ground-truth vehicle counts, road_id -> int array over the grid."""
    streams = _Substreams(cfg.seed)
    grid = time_grid(cfg)
    flows = {}
    for r_idx, road in enumerate(cfg.roads):
        counts = np.empty(len(grid), dtype=np.int64)
        for t_idx, ts in enumerate(grid):
            mu = flow_mean(road, ts)
            eps = streams.rng(t_idx, _STREAM_FLOW, r_idx).normal(0.0, cfg.noise_sd)
            counts[t_idx] = int(round(max(0.0, mu + eps)))
        flows[road.meta.road_id] = counts
    return flows


def _road_bins(cfg, road, edges):
    return select_ta_bins(edges, road.meta.distance_m, road.meta.distance_max_m)


def generate(cfg):
    """Generate the full scenario.

    Returns ``(counters, sensors, roads, flows)`` where the first three are
    record lists ready for the datamodel writers and ``flows`` is the
    ground truth from :func:`generate_flows`.
    """
    schema = cfg.schema
    edges = default_ta_edges()
    streams = _Substreams(cfg.seed)
    grid = time_grid(cfg)
    flows = generate_flows(cfg)

    counters = []
    sensors = []
    for r_idx, road in enumerate(cfg.roads):
        meta = road.meta
        road_bins = list(_road_bins(cfg, road, edges))
        bg_rate = cfg.background_ta_rate * (
            cfg.domain_shift.background_rate if road.domain == "target" else 1.0
        )
        counts = flows[meta.road_id]
        for t_idx, ts in enumerate(grid):
            v = int(counts[t_idx])
            ta_rng = streams.rng(t_idx, _STREAM_TA, r_idx)
            pl_rng = streams.rng(t_idx, _STREAM_PL, r_idx)
            road_rate = road.call_rate * cfg.calls_per_vehicle * v
            mean_db = pl_mean_db(cfg, road, v)
            mass_rate = cfg.pl_mass_base + cfg.pl_mass_per_vehicle * v
            for b_idx, band in enumerate(schema.bands):
                ta = ta_rng.poisson(bg_rate, schema.ta_bins)
                ta[road_bins] = ta_rng.poisson(road_rate, len(road_bins))
                probs = pl_bin_probabilities(
                    mean_db + BAND_PL_OFFSET_DB * b_idx, cfg.pl_sd_db, schema.pl_bins
                )
                pl = pl_rng.multinomial(pl_rng.poisson(mass_rate), probs)
                for kind, hist in (("PL", pl), ("TA", ta)):
                    counters.append(
                        CounterRecord(
                            timestamp=ts,
                            site_id=meta.site_id,
                            cell_id=f"{meta.site_id}-{band}",
                            band=band,
                            kind=kind,
                            bins=tuple(hist.tolist()),
                        )
                    )
            base, rem = divmod(v, meta.lanes)
            for j in range(meta.lanes):
                sensors.append(
                    SensorRecord(
                        timestamp=ts,
                        road_id=meta.road_id,
                        lane_id=f"l{j + 1}",
                        vehicle_count=base + (1 if j < rem else 0),
                    )
                )
    return counters, sensors, [r.meta for r in cfg.roads], flows


def write_scenario(cfg, out_dir):
    """Generate and write a scenario directory.

    Writes counters.csv, sensors.csv, roads.csv, the resolved scenario.toml,
    and a manifest.json with row counts and a config digest. Output bytes
    depend only on the configuration.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counters, sensors, roads, _ = generate(cfg)
    write_counters(counters, out / "counters.csv", cfg.schema)
    write_sensors(sensors, out / "sensors.csv")
    write_roads(roads, out / "roads.csv")
    toml_text = scenario_to_toml(cfg)
    (out / "scenario.toml").write_text(toml_text)
    manifest = {
        "command": "synth",
        "config_sha256": hashlib.sha256(toml_text.encode()).hexdigest(),
        "intervals": cfg.n_intervals,
        "roads": len(cfg.roads),
        "rows": {"counters": len(counters), "sensors": len(sensors)},
        "seed": cfg.seed,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, datetime):
        return json.dumps(format_timestamp(v))
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {type(v).__name__} to TOML")


def scenario_to_toml(cfg):
    """Render a scenario as TOML text that :func:`scenario_from_toml` reads back."""
    lines = []
    for name in (
        "weeks",
        "seed",
        "start",
        "calls_per_vehicle",
        "background_ta_rate",
        "pl_shift_per_log_vehicle",
        "noise_sd",
        "pl_mean_base_db",
        "pl_sd_db",
        "pl_mass_base",
        "pl_mass_per_vehicle",
        "bands",
    ):
        lines.append(f"{name} = {_toml_value(getattr(cfg, name))}")
    lines.append("")
    lines.append("[domain_shift]")
    lines.append(f"background_rate = {_toml_value(cfg.domain_shift.background_rate)}")
    lines.append(f"pl_mean = {_toml_value(cfg.domain_shift.pl_mean)}")
    for road in cfg.roads:
        lines.append("")
        lines.append("[[roads]]")
        m = road.meta
        lines.append(f"road_id = {_toml_value(m.road_id)}")
        lines.append(f"site_id = {_toml_value(m.site_id)}")
        lines.append(f"distance_m = {_toml_value(m.distance_m)}")
        if m.distance_max_m is not None:
            lines.append(f"distance_max_m = {_toml_value(m.distance_max_m)}")
        lines.append(f"lanes = {_toml_value(m.lanes)}")
        lines.append(f"maxspeed_kmh = {_toml_value(m.maxspeed_kmh)}")
        lines.append(f"category = {_toml_value(m.category)}")
        lines.append(f"base_flow = {_toml_value(road.base_flow)}")
        lines.append(f"peak_amplitudes = {_toml_value(road.peak_amplitudes)}")
        lines.append(f"weekday_factors = {_toml_value(road.weekday_factors)}")
        lines.append(f"call_rate = {_toml_value(road.call_rate)}")
        lines.append(f"domain = {_toml_value(road.domain)}")
    return "\n".join(lines) + "\n"


_ROAD_KEYS = {
    "road_id",
    "site_id",
    "distance_m",
    "distance_max_m",
    "lanes",
    "maxspeed_kmh",
    "category",
    "base_flow",
    "peak_amplitudes",
    "weekday_factors",
    "call_rate",
    "domain",
}
_TOP_KEYS = {
    "weeks",
    "seed",
    "start",
    "calls_per_vehicle",
    "background_ta_rate",
    "pl_shift_per_log_vehicle",
    "noise_sd",
    "pl_mean_base_db",
    "pl_sd_db",
    "pl_mass_base",
    "pl_mass_per_vehicle",
    "bands",
    "domain_shift",
    "roads",
}


def scenario_from_mapping(data):
    """Build a :class:`ScenarioConfig` from a parsed TOML mapping."""
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown scenario key {sorted(unknown)[0]!r}")
    road_items = data.get("roads")
    if not road_items:
        raise ConfigError("scenario defines no roads")
    roads = []
    for item in road_items:
        bad = set(item) - _ROAD_KEYS
        if bad:
            raise ConfigError(f"unknown road key {sorted(bad)[0]!r}")
        try:
            meta = RoadMeta(
                road_id=str(item["road_id"]),
                site_id=str(item["site_id"]),
                distance_m=float(item["distance_m"]),
                distance_max_m=(
                    float(item["distance_max_m"]) if "distance_max_m" in item else None
                ),
                lanes=int(item.get("lanes", 1)),
                maxspeed_kmh=float(item.get("maxspeed_kmh", 50.0)),
                category=str(item.get("category", "small_city_road")),
            )
        except KeyError as exc:
            raise ConfigError(f"road entry missing {exc}") from None
        roads.append(
            RoadScenario(
                meta=meta,
                base_flow=float(item.get("base_flow", 100.0)),
                peak_amplitudes=tuple(item.get("peak_amplitudes", (1.0, 0.9))),
                weekday_factors=tuple(
                    item.get("weekday_factors", (1.0, 1.0, 1.0, 1.0, 1.0, 0.65, 0.5))
                ),
                call_rate=float(item.get("call_rate", 1.0)),
                domain=str(item.get("domain", "source")),
            )
        )
    shift_data = data.get("domain_shift", {})
    bad = set(shift_data) - {"background_rate", "pl_mean"}
    if bad:
        raise ConfigError(f"unknown domain_shift key {sorted(bad)[0]!r}")
    kwargs = {}
    for name in (
        "weeks",
        "seed",
        "calls_per_vehicle",
        "background_ta_rate",
        "pl_shift_per_log_vehicle",
        "noise_sd",
        "pl_mean_base_db",
        "pl_sd_db",
        "pl_mass_base",
        "pl_mass_per_vehicle",
    ):
        if name in data:
            kwargs[name] = data[name]
    if "start" in data:
        start = data["start"]
        kwargs["start"] = (
            parse_timestamp(start) if isinstance(start, str) else start
        )
        if kwargs["start"].tzinfo is None:
            kwargs["start"] = kwargs["start"].replace(tzinfo=timezone.utc)
    if "bands" in data:
        kwargs["bands"] = tuple(str(b) for b in data["bands"])
    return ScenarioConfig(
        roads=tuple(roads),
        domain_shift=DomainShift(
            background_rate=float(shift_data.get("background_rate", 1.0)),
            pl_mean=float(shift_data.get("pl_mean", 1.0)),
        ),
        **kwargs,
    )


def load_scenario(path):
    """Read a scenario.toml file."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    return scenario_from_mapping(data)


def default_scenario(seed=0, weeks=8):
    """The standard mixed-category scenario: six roads, one per site."""
    mk = RoadMeta
    roads = (
        RoadScenario(
            mk("r1", "s1", 400.0, 1100.0, 3, 130.0, "highway"),
            base_flow=1500.0,
            peak_amplitudes=(1.0, 0.9),
        ),
        RoadScenario(
            mk("r2", "s2", 250.0, 700.0, 2, 110.0, "highway"),
            base_flow=1100.0,
            peak_amplitudes=(0.95, 1.0),
        ),
        RoadScenario(
            mk("r3", "s3", 150.0, None, 2, 60.0, "large_city_road"),
            base_flow=800.0,
            peak_amplitudes=(1.0, 0.85),
        ),
        RoadScenario(
            mk("r4", "s4", 90.0, None, 2, 50.0, "large_city_road"),
            base_flow=600.0,
            peak_amplitudes=(0.9, 1.0),
        ),
        RoadScenario(
            mk("r5", "s5", 60.0, None, 1, 50.0, "small_city_road"),
            base_flow=300.0,
            peak_amplitudes=(1.0, 0.8),
        ),
        RoadScenario(
            mk("r6", "s6", 45.0, None, 1, 30.0, "small_city_road"),
            base_flow=180.0,
            peak_amplitudes=(0.85, 1.0),
        ),
    )
    return ScenarioConfig(roads=roads, weeks=weeks, seed=seed)


def shifted_scenario(seed=0, weeks=2):
    """A two-domain scenario with covariate shift between site groups.

    Source roads are mostly high-volume commuter routes with a morning
    peak; the target roads (and one minority source road) are low-volume
    and evening-peaked, so the source feature distribution concentrates
    far from where the targets live. Target roads also get shifted radio
    background conditions.
    """
    mk = RoadMeta
    roads = (
        RoadScenario(
            mk("a1", "s1", 350.0, 800.0, 3, 130.0, "highway"),
            base_flow=1400.0,
            peak_amplitudes=(1.0, 0.45),
        ),
        RoadScenario(
            mk("a2", "s2", 500.0, 1000.0, 3, 110.0, "highway"),
            base_flow=1750.0,
            peak_amplitudes=(1.0, 0.5),
        ),
        RoadScenario(
            mk("a3", "s3", 120.0, 400.0, 2, 60.0, "large_city_road"),
            base_flow=1200.0,
            peak_amplitudes=(0.95, 0.45),
        ),
        RoadScenario(
            mk("a4", "s4", 70.0, None, 1, 50.0, "small_city_road"),
            base_flow=1150.0,
            peak_amplitudes=(0.35, 0.65),
        ),
        RoadScenario(
            mk("a5", "s5", 150.0, 450.0, 1, 50.0, "small_city_road"),
            base_flow=330.0,
            peak_amplitudes=(0.4, 1.0),
            call_rate=10.0,
        ),
        RoadScenario(
            mk("b1", "s6", 65.0, None, 1, 50.0, "small_city_road"),
            base_flow=300.0,
            peak_amplitudes=(0.4, 1.0),
            domain="target",
        ),
        RoadScenario(
            mk("b2", "s7", 80.0, None, 1, 40.0, "small_city_road"),
            base_flow=360.0,
            peak_amplitudes=(0.5, 0.95),
            domain="target",
        ),
    )
    return ScenarioConfig(
        roads=roads,
        weeks=weeks,
        seed=seed,
        calls_per_vehicle=0.05,
        background_ta_rate=2.0,
        noise_sd=4.0,
        pl_mass_per_vehicle=0.0,
        domain_shift=DomainShift(background_rate=1.6, pl_mean=1.10),
    )


PRESETS = {"default": default_scenario, "shifted": shifted_scenario}


def preset_scenario(name, seed=0, weeks=None):
    """Look up a preset by name, optionally overriding seed and length."""
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; available: {sorted(PRESETS)}"
        ) from None
    cfg = factory(seed=seed)
    if weeks is not None:
        cfg = replace(cfg, weeks=weeks)
    return cfg
