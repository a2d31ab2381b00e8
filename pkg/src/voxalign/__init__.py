"""Feature-driven 3D deformable image registration."""

from . import synth
from .tensors import (
    DisplacementField,
    FeatureVolume,
    LabelVolume,
    MVFError,
    VelocityField,
    Volume,
    read_mvf,
    write_mvf,
)
from .fields import (
    JacobianMap,
    compose_fields,
    downsample_volume,
    integrate_velocity,
    jacobian_map,
    sample_trilinear,
    upsample_field,
    warp,
    warp_labels,
)
from .features import (
    AdaptationPlan,
    FeaturePyramid,
    apply_adaptation,
    build_pyramid,
    extract_fallback_features,
    plan_adaptation,
    reduce_channels,
    restore_features,
)
from .losses import (
    LossReport,
    LossWeights,
    hfc_loss,
    ncc_loss,
    smoothness_loss,
    soft_dice_loss,
    total_loss,
)
from .metrics import MetricsReport, dice_score, evaluate_labels, folding_fraction, hd95, sdlogj
from .solver import (
    NonFiniteLossError,
    RegistrationResult,
    SolverConfig,
    register,
    warp_with_result,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptationPlan",
    "DisplacementField",
    "FeaturePyramid",
    "FeatureVolume",
    "JacobianMap",
    "LabelVolume",
    "LossReport",
    "LossWeights",
    "MVFError",
    "MetricsReport",
    "NonFiniteLossError",
    "RegistrationResult",
    "SolverConfig",
    "VelocityField",
    "Volume",
    "apply_adaptation",
    "build_pyramid",
    "compose_fields",
    "dice_score",
    "downsample_volume",
    "evaluate_labels",
    "extract_fallback_features",
    "folding_fraction",
    "hd95",
    "hfc_loss",
    "integrate_velocity",
    "jacobian_map",
    "ncc_loss",
    "plan_adaptation",
    "read_mvf",
    "reduce_channels",
    "register",
    "restore_features",
    "sample_trilinear",
    "sdlogj",
    "smoothness_loss",
    "soft_dice_loss",
    "synth",
    "total_loss",
    "upsample_field",
    "warp",
    "warp_labels",
    "warp_with_result",
    "write_mvf",
]
