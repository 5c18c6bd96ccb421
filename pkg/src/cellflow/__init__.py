"""Road traffic flow estimation from aggregated LTE radio-frequency counters.

The package turns per-cell path-loss and timing-advance histograms into
vehicle-count estimates per 15-minute interval, with a feature pipeline,
a from-scratch regression suite (kernel ridge, epsilon-SVR, trees,
forests, an LSTM), two transfer-learning methods for crossing road
domains, an evaluation kit, and a seeded synthetic data generator that
serves as the verification oracle for all of it.
"""

from .datamodel import (
    AlignedDataset,
    AlignedRow,
    CounterRecord,
    CounterSchema,
    RoadMeta,
    SensorRecord,
    align,
    load_dataset,
    parse_counters,
    parse_roads,
    parse_sensors,
)
from .errors import CellflowError, ConfigError, DataError, NumericalError
from .evaluation import EvalReport, r2_score, spatial_split, temporal_split
from .features import (
    FeatureMatrix,
    FeatureSpec,
    build_features,
    default_ta_edges,
    select_ta_bins,
)
from .kernels import median_squared_distance, rbf_kernel
from .lstm import LstmRegressor, make_windows
from .regression import (
    EpsilonSVR,
    KernelRidge,
    RandomForest,
    RegressionTree,
    grid_search,
    make_model,
)
from .synth import (
    DomainShift,
    RoadScenario,
    ScenarioConfig,
    default_scenario,
    load_scenario,
    shifted_scenario,
    write_scenario,
)
from .transfer import (
    DaConfig,
    KmmConfig,
    da_finetune,
    fit_weighted,
    kmm_weights,
    mmd2,
)

__version__ = "0.1.0"

__all__ = [
    "AlignedDataset",
    "AlignedRow",
    "CellflowError",
    "ConfigError",
    "CounterRecord",
    "CounterSchema",
    "DaConfig",
    "DataError",
    "DomainShift",
    "EpsilonSVR",
    "EvalReport",
    "FeatureMatrix",
    "FeatureSpec",
    "KernelRidge",
    "KmmConfig",
    "LstmRegressor",
    "NumericalError",
    "RandomForest",
    "RegressionTree",
    "RoadMeta",
    "RoadScenario",
    "ScenarioConfig",
    "SensorRecord",
    "align",
    "build_features",
    "da_finetune",
    "default_scenario",
    "default_ta_edges",
    "fit_weighted",
    "grid_search",
    "kmm_weights",
    "load_dataset",
    "load_scenario",
    "make_model",
    "make_windows",
    "median_squared_distance",
    "mmd2",
    "parse_counters",
    "parse_roads",
    "parse_sensors",
    "r2_score",
    "rbf_kernel",
    "select_ta_bins",
    "shifted_scenario",
    "spatial_split",
    "temporal_split",
    "write_scenario",
]
