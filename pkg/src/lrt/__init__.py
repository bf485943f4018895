"""Streaming low-rank gradient accumulation for quantized online training."""

__version__ = "0.1.0"

from .cli import (
    ConfigError,
    ExperimentConfig,
    format_config,
    parse_config,
    read_config,
    write_config,
)
from .convex import (
    ConvexProblem,
    make_problem,
    quant_noise_term,
    regret,
    run_lrt_regression,
    run_noisy_sgd,
    write_trajectory,
)
from .data import (
    IdxFormatError,
    OnlineStream,
    Partitions,
    default_shift_schedule,
    elastic_transform,
    format_schedule,
    load_idx,
    load_idx_pair,
    make_partitions,
    parse_schedule,
    read_manifest,
    save_idx,
    synthetic_digits,
    write_manifest,
)
from .layers import (
    ConvLayer,
    DenseLayer,
    Flatten,
    MaxNormState,
    MaxPool2,
    StreamingNorm,
    WriteCounter,
    col2im,
    im2col,
    nearest_pow2,
)
from .linalg import condition_estimate, householder_basis, mgs_insert, svd_small
from .lowrank import (
    LowRankState,
    SpectrumSplit,
    UoroState,
    mixing_transform,
    split_spectrum,
    variance_estimate,
)
from .quant import QuantProfile, QuantSpec, default_profile, float_profile
from .trainer import (
    DriftModel,
    Network,
    Trainer,
    UpdatePolicy,
    build_network,
    memory_report,
    policy_for_scheme,
    softmax,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "format_config",
    "parse_config",
    "read_config",
    "write_config",
    "condition_estimate",
    "householder_basis",
    "mgs_insert",
    "svd_small",
    "LowRankState",
    "SpectrumSplit",
    "UoroState",
    "mixing_transform",
    "split_spectrum",
    "variance_estimate",
    "QuantProfile",
    "QuantSpec",
    "float_profile",
    "default_profile",
    "ConvexProblem",
    "make_problem",
    "quant_noise_term",
    "regret",
    "run_lrt_regression",
    "run_noisy_sgd",
    "write_trajectory",
    "IdxFormatError",
    "OnlineStream",
    "Partitions",
    "default_shift_schedule",
    "elastic_transform",
    "format_schedule",
    "load_idx",
    "load_idx_pair",
    "make_partitions",
    "parse_schedule",
    "read_manifest",
    "save_idx",
    "synthetic_digits",
    "write_manifest",
    "ConvLayer",
    "DenseLayer",
    "Flatten",
    "MaxNormState",
    "MaxPool2",
    "StreamingNorm",
    "WriteCounter",
    "col2im",
    "im2col",
    "nearest_pow2",
    "DriftModel",
    "Network",
    "Trainer",
    "UpdatePolicy",
    "build_network",
    "memory_report",
    "policy_for_scheme",
    "softmax",
    "__version__",
]
