"""Spatial lag models when some unit locations are coarsened to regions."""

from .estimators import (
    METHODS,
    CoarsenedDataset,
    DmeConfig,
    EstimateResult,
    fit_cip,
    fit_dme,
    fit_method,
    fit_ml,
    fit_ncm,
    fit_rem,
    fit_srem,
    mc_marginal_loglik,
)
from .geometry import Partition, Window, build_hex_partition, default_window
from .impacts import ImpactTriple, impacts_exact, impacts_mc
from .point_process import (
    CoarseningFlags,
    apply_coarsening,
    default_intensity,
    estimate_intensity,
    estimate_propensity,
    sample_conditional_locations,
    simulate_fixed_n,
)
from .regressor import CoarsenedSpatialLagRegressor, SpatialLagRegressor
from .simulation import MetricsTable, ScenarioConfig, relative_metrics, run_scenario, scenario_catalog
from .slm import KappaSpec, SlmParams, WeightMatrix, build_weight_matrix, simulate_slm

__version__ = "0.1.0"
