"""Optimal transport maps and Wasserstein-2 barycenters from conditional flows."""

__version__ = "0.1.0"

from .autodiff import AdamState, Tape, Tensor, adam_step, backward
from .errors import (
    ConfigError,
    ContractViolation,
    ConvergenceError,
    DegenerateDistributionError,
    NonFiniteError,
    SingularityError,
    TapeReuseError,
    TrainingDiverged,
)
from .flows import (
    ConditionalFlowModel,
    ConditionEncoding,
    CouplingLayer,
    Permutation,
    load_checkpoint,
    save_checkpoint,
)
from .oracle import (
    AffineMap,
    GaussianDist,
    bures_w2,
    gaussian_ot_map,
    haar_rotation,
    ls_barycenter_fixed_point,
    quantile_ot_1d,
    sqrtm_psd,
)
from .train import (
    SamplerSet,
    TrainResult,
    TrainSpec,
    W2Estimate,
    WeightSchedule,
    barycenter_push,
    estimate_w2,
    extract_ot_map,
    mean_nll,
    sample_barycenter,
    schedule_value,
    train_barycenter,
    train_ot,
)

__all__ = [
    "AdamState",
    "AffineMap",
    "ConditionalFlowModel",
    "ConditionEncoding",
    "ConfigError",
    "ContractViolation",
    "ConvergenceError",
    "CouplingLayer",
    "DegenerateDistributionError",
    "GaussianDist",
    "NonFiniteError",
    "Permutation",
    "SamplerSet",
    "SingularityError",
    "Tape",
    "TapeReuseError",
    "Tensor",
    "TrainResult",
    "TrainSpec",
    "TrainingDiverged",
    "W2Estimate",
    "WeightSchedule",
    "adam_step",
    "backward",
    "barycenter_push",
    "bures_w2",
    "estimate_w2",
    "extract_ot_map",
    "gaussian_ot_map",
    "haar_rotation",
    "load_checkpoint",
    "ls_barycenter_fixed_point",
    "mean_nll",
    "quantile_ot_1d",
    "sample_barycenter",
    "save_checkpoint",
    "schedule_value",
    "sqrtm_psd",
    "train_barycenter",
    "train_ot",
]
