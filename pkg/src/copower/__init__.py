"""Power analysis for cluster randomized trials with continuous co-primary endpoints."""

from .errors import (
    AccuracyNotReached,
    CopowerError,
    DegenerateCorrection,
    DegenerateData,
    InfeasibleAllocation,
    InsufficientDf,
    NonConvergence,
    NotPositiveDefinite,
    SingularInformation,
    Unattainable,
    ValidationError,
)
from .types import (
    DesignSpec,
    EffectModel,
    IccSet,
    TestKind,
    TestSpec,
    VarianceComponents,
    bex_expand,
    components_to_icc,
    icc_set,
    icc_to_components,
    sequence_rho0,
)
from .power import (
    EffectDistribution,
    PowerResult,
    effect_distribution,
    glh_power,
    iu_power,
    omega_equal,
    omega_unequal,
    power_for_test,
    power_grid,
    solve_cluster_size,
    solve_clusters,
)
from .em import FitResult, cluster_stats, em_fit, standard_errors, wald_glh_decision, wald_iu_decision
from .simulate import (
    SimulationReport,
    TrialDataset,
    allocate_arms,
    empirical_power,
    sample_cluster_sizes,
    simulate_trial,
    type_i_error,
)
from .scenario import Scenario, load_scenario, parse_scenario

__version__ = "0.1.0"
