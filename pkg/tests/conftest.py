"""Shared fixtures for the test suite.

The tiny scenario is intentionally small (three roads, one week) so that
generation plus alignment stays well under a second.  Tests that need a
realistic dataset share the session-scoped copies built here instead of
regenerating their own.
"""

import pytest

from cellflow.datamodel import RoadMeta, align
from cellflow.synth import RoadScenario, ScenarioConfig, generate, write_scenario


def make_tiny_config(seed=5, weeks=1):
    roads = (
        RoadScenario(
            RoadMeta("t1", "s1", 200.0, 500.0, 2, 80.0, "large_city_road"),
            base_flow=500.0,
        ),
        RoadScenario(
            RoadMeta("t2", "s2", 90.0, None, 1, 50.0, "small_city_road"),
            base_flow=250.0,
            peak_amplitudes=(0.8, 1.0),
        ),
        RoadScenario(
            RoadMeta("t3", "s3", 60.0, None, 1, 50.0, "small_city_road"),
            base_flow=150.0,
            peak_amplitudes=(1.0, 0.7),
            domain="target",
        ),
    )
    return ScenarioConfig(roads=roads, weeks=weeks, seed=seed)


@pytest.fixture(scope="session")
def tiny_cfg():
    return make_tiny_config()


@pytest.fixture(scope="session")
def tiny_raw(tiny_cfg):
    """Raw generated records: (counters, sensors, roads, flows)."""
    return generate(tiny_cfg)


@pytest.fixture(scope="session")
def tiny_ds(tiny_cfg, tiny_raw):
    counters, sensors, roads, _ = tiny_raw
    return align(counters, sensors, roads, tiny_cfg.schema)


@pytest.fixture(scope="session")
def scenario_dir(tiny_cfg, tmp_path_factory):
    """The tiny scenario written to disk in CLI-compatible layout."""
    out = tmp_path_factory.mktemp("scenario")
    write_scenario(tiny_cfg, out)
    return out
