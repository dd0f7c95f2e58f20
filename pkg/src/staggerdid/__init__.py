"""Staggered difference-in-differences with not-yet-treated controls.

The pipeline runs from transfer records to cohort-year 2x2 cells, event-time
aggregation with bootstrap bands, a dynamic TWFE comparator and a propensity
score matching baseline, all checkable against a synthetic generator with
known effects.
"""

__version__ = "0.1.0"

from .aggregate import (
    AggregationScheme,
    EventStudyCurve,
    aggregate,
    aggregate_balanced,
    aggregate_unbalanced,
    balanced_cohort_set,
    event_time_weights,
    to_relative_time,
)
from .did import (
    CellEstimate,
    CellGrid,
    CellIndex,
    CellSystem,
    TreatmentSpec,
    control_cohorts,
    control_set,
    estimate_all_cells,
    estimate_cell,
    treatment_status,
    valid_cohort_range,
)
from .errors import (
    ConfigError,
    DataError,
    DomainError,
    EstimationError,
    InputError,
    PanelValidationError,
    ParseError,
    SchemaError,
    StaggerError,
)
from .inference import BootstrapSpec, bootstrap_event_study, cell_p_value
from .matching import (
    MatchSpec,
    PropensityFit,
    fit_propensity,
    ihs,
    matched_event_estimates,
    nearest_one_match,
    run_matching,
)
from .ols import RegressionFit, fit_ols
from .panel import (
    CohortTable,
    FilterSpec,
    PanelDataset,
    SizeCategory,
    WageIndex,
    assign_cohorts,
    categorize_transfer,
    death_proximity_table,
    load_panel,
    load_wage_index,
    sample_means,
)
from .synth import DgpConfig, EffectFamily, simulate_panel, true_att
from .twfe import TwfeSpec, compare_pretrends, demean_two_way, estimate_dynamic_twfe

__all__ = [
    "AggregationScheme",
    "BootstrapSpec",
    "CellEstimate",
    "CellGrid",
    "CellIndex",
    "CellSystem",
    "CohortTable",
    "ConfigError",
    "DataError",
    "DgpConfig",
    "DomainError",
    "EffectFamily",
    "EstimationError",
    "EventStudyCurve",
    "FilterSpec",
    "InputError",
    "MatchSpec",
    "PanelDataset",
    "PanelValidationError",
    "ParseError",
    "PropensityFit",
    "RegressionFit",
    "SchemaError",
    "SizeCategory",
    "StaggerError",
    "TreatmentSpec",
    "TwfeSpec",
    "WageIndex",
    "aggregate",
    "aggregate_balanced",
    "aggregate_unbalanced",
    "assign_cohorts",
    "balanced_cohort_set",
    "bootstrap_event_study",
    "categorize_transfer",
    "cell_p_value",
    "compare_pretrends",
    "control_cohorts",
    "control_set",
    "death_proximity_table",
    "demean_two_way",
    "estimate_all_cells",
    "estimate_cell",
    "estimate_dynamic_twfe",
    "event_time_weights",
    "fit_ols",
    "fit_propensity",
    "ihs",
    "load_panel",
    "load_wage_index",
    "matched_event_estimates",
    "nearest_one_match",
    "run_matching",
    "sample_means",
    "simulate_panel",
    "to_relative_time",
    "treatment_status",
    "true_att",
    "valid_cohort_range",
]
