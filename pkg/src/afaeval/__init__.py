"""Deployment-cost evaluation of active feature acquisition policies from
retrospective data with missingness."""

from .core import (
    STOP,
    TARGETS,
    AcquisitionState,
    CostSpec,
    EstimateReport,
    FullDataset,
    ObservedDataset,
    SchemaError,
    Superfeature,
    SuperfeatureSchema,
    Trajectory,
    TrajectoryStep,
    count_trajectories,
    initial_state,
)
from .datagen import (
    AlwaysObserved,
    ConstantRate,
    LogisticRate,
    MechanismError,
    MissingnessMechanism,
    apply_missingness,
    generate_synthetic,
    load_csv,
)
from .estimators import (
    RAW,
    SELF_NORMALIZED,
    PointEstimator,
    WeightSeries,
    bootstrap_ci,
    compute_weight_series,
    estimate_blocking,
    estimate_cc,
    estimate_dm_semi,
    estimate_drl_semi,
    estimate_ground_truth,
    estimate_imp_mean,
    estimate_ipw_miss,
    estimate_ipw_semi,
    estimate_ipw_semi_miss,
    positivity_diagnostics,
)
from .harness import ConfigError, ExperimentConfig, run_experiment
from .nuisance import (
    PROPENSITY_FLOOR,
    PropensityInevaluableError,
    PropensityModel,
    fit_propensity_mar,
    fit_propensity_mnar_pattern,
    fit_q_semi,
    ground_truth_propensity,
    zeroed_propensity,
)
from .oracle import run_oracle_suite
from .policy import (
    Classifier,
    FixedSetPolicy,
    MajorityClassifier,
    Policy,
    StopPolicy,
    SubsetRandomPolicy,
    block,
    fit_classifier,
    fit_greedy_policy,
)
from .simulate import (
    dump_trajectories,
    load_trajectories,
    rollout_ground_truth,
    rollout_semi_offline,
)

__version__ = "0.1.0"
