"""Differentially private group-robust training: accounting, samplers, trainers and variance analysis."""

__version__ = "0.1.0"

from .accountant import (  # noqa: E402
    MechanismSpec,
    PrivacyLedger,
    RdpCurve,
    calibrate_base_noise,
    invert_noise_multiplier,
    rdp_to_dp,
    subsampled_gaussian_rdp,
)
from .data import DEFAULT_SYNTH, GroupDataset, SynthSpec, generate_synthetic, load_csv  # noqa: E402
from .trainers import TrainConfig, TrainReport, train  # noqa: E402

__all__ = [
    "DEFAULT_SYNTH",
    "GroupDataset",
    "MechanismSpec",
    "PrivacyLedger",
    "RdpCurve",
    "SynthSpec",
    "TrainConfig",
    "TrainReport",
    "__version__",
    "calibrate_base_noise",
    "generate_synthetic",
    "invert_noise_multiplier",
    "load_csv",
    "rdp_to_dp",
    "subsampled_gaussian_rdp",
    "train",
]
