"""Partial-to-partial rigid point cloud registration.

A dual-branch network regresses rotation and translation from features
that are kept deliberately separate per parameter group, refined over a
few iterations; a classical ICP baseline, metrics, and dataset tooling
round out the package.
"""

from .data import DataConfig, RegistrationPair, build_dataset
from .geometry import Quaternion, RigidTransform, compose, random_transform
from .icp import IcpConfig, IcpResult, icp, kabsch
from .losses import LossConfig
from .metrics import MetricsReport, evaluate_pairs, isotropic_errors
from .model import ModelConfig, RegistrationNet, RegistrationResult
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "DataConfig",
    "IcpConfig",
    "IcpResult",
    "LossConfig",
    "MetricsReport",
    "ModelConfig",
    "Quaternion",
    "RegistrationNet",
    "RegistrationPair",
    "RegistrationResult",
    "RigidTransform",
    "TrainConfig",
    "build_dataset",
    "compose",
    "evaluate_pairs",
    "icp",
    "isotropic_errors",
    "kabsch",
    "random_transform",
    "train",
    "__version__",
]
