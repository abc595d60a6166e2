"""Causal inference on Granger-causal effective connectivity.

Layer 1 derives per-subject conditional Granger F-statistics from sample-
split VAR models; layer 2 estimates intervention effects on the derived
outcomes by inverse probability weighting with influence-function
variances, multiplier-bootstrap simultaneous intervals, and step-down
multiple testing with augmentation.
"""

__version__ = "0.1.0"

from .var import (  # noqa: F401
    TimeSeriesPanel,
    VarFit,
    VarProcess,
    VarSpec,
    fit_var_ols,
    simulate_var,
    spectral_radius,
)
from .connectivity import (  # noqa: F401
    ConnectivityOutcome,
    FStatistic,
    ModelChoice,
    SplitConfig,
    conditional_granger_f,
    deletion_stability_gap,
    derive_connectivity,
    ordered_pairs,
    select_model,
    split_panel,
)
from .propensity import (  # noqa: F401
    LOGISTIC,
    PROBIT,
    CovariateTable,
    LinkFunction,
    PropensityFit,
    evaluate_propensity,
    fit_propensity,
    link_values,
)
from .effects import (  # noqa: F401
    EffectEstimates,
    OutcomePanel,
    estimate_effects,
    influence_functions,
    ipw_estimate,
    variance_estimates,
)
from .inference import (  # noqa: F401
    BootstrapConfig,
    SimultaneousResult,
    multiplier_bootstrap_quantile,
    simultaneous_cis,
    stepdown_augment,
)
from .experiment import (  # noqa: F401
    ALL_METHODS,
    DgpConfig,
    MethodSpec,
    MetricsReport,
    PipelineConfig,
    aggregate_metrics,
    build_dgp,
    run_experiment,
    run_replication,
)
