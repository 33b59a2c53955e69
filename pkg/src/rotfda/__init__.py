"""Rotation sampling designs and mean-curve estimation for functional survey data."""

from .allocation import AllocationPolicy, adaptive_alloc, neyman_alloc, proportional_alloc
from .analytics import (
    CovKernel,
    cov_full,
    cov_kernel,
    cov_partial,
    fourth_order_C,
    mise,
    var_ise_corollary,
    var_ise_exact_small,
    var_ise_full_asym,
    var_ise_partial_asym,
)
from .designs import (
    AllocationTrace,
    DesignSpec,
    RotationPattern,
    SamplePath,
    ValidatedDesign,
    conventional_path,
    epoch_of,
    lambda_kernel,
    retention_prob,
    sample_path,
    two_unit_chain,
    validate_design,
)
from .errors import (
    CapacityError,
    ConfigError,
    DataError,
    DataFormatError,
    DegenerateOverlapError,
    EstimatorError,
    RotationError,
    UndefinedMomentError,
    ValidationError,
)
from .estimators import EstimatorSeries, change_estimate, composite_series, ht_series, integral_estimate, ise
from .harness import DesignGrid, EstimatorGrid, Scenario, SimulationReport, compare_designs, empirical_cov, run_scenario
from .population import (
    CurveSeries,
    FunctionalPopulation,
    StratumSpec,
    TimeGrid,
    avg_autocorrelation,
    integrate_series,
    load_population,
    population_mean,
    save_population,
    stratum_covariance,
    stratum_mean,
    synth_population,
)

__version__ = "0.1.0"
