"""Estimator-style wrappers: fit on registration pairs, predict transforms.

Hyperparameters are plain constructor arguments so ``get_params`` /
``set_params`` and grid-search tooling work; ``fit`` builds the configs and
trains, ``predict`` returns one rigid transform per pair, ``transform``
returns the aligned source clouds.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import RegistrationPair
from .geometry import RigidTransform
from .icp import IcpConfig, icp
from .losses import LossConfig
from .metrics import evaluate_pairs
from .model import ModelConfig, RegistrationNet
from .train import TrainConfig, set_determinism, train


def _clouds(item) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(item, RegistrationPair):
        return item.source, item.reference
    source, reference = item[0], item[1]
    return np.asarray(source), np.asarray(reference)


def _gt(item) -> RigidTransform:
    if isinstance(item, RegistrationPair):
        return item.gt
    if len(item) > 2 and isinstance(item[2], RigidTransform):
        return item[2]
    raise ValueError("scoring needs pairs that carry a ground-truth transform")


class _RegistrarMixin:
    """predict/transform/score shared by the estimators."""

    def predict(self, pairs) -> list[RigidTransform]:
        raise NotImplementedError

    def transform(self, pairs) -> list[np.ndarray]:
        preds = self.predict(pairs)
        return [pred.apply(_clouds(item)[0]) for pred, item in zip(preds, pairs)]

    def score(self, pairs, y=None) -> float:
        """Negative mean geodesic rotation error in degrees (higher = better)."""
        report = evaluate_pairs(self.predict(pairs), [_gt(p) for p in pairs])
        return -report.error_rot


class DualBranchRegistrar(_RegistrarMixin, BaseEstimator):
    """Learned registrar: trains the dual-branch network on ``fit``."""

    def __init__(
        self,
        block_channels=(64, 64, 128, 256),
        head_hidden=(512, 256),
        iterations=4,
        use_pfi=True,
        use_gfi=True,
        use_saliency=True,
        dual_branch=True,
        learning_rate=1e-4,
        batch_size=64,
        steps=1000,
        seed=0,
        lambda_t=4.0,
        delta=0.01,
        beta=1e-3,
        gamma=1e-3,
        dropout_ratio=0.3,
        enable_tsl=True,
        enable_pfdl=True,
    ):
        self.block_channels = block_channels
        self.head_hidden = head_hidden
        self.iterations = iterations
        self.use_pfi = use_pfi
        self.use_gfi = use_gfi
        self.use_saliency = use_saliency
        self.dual_branch = dual_branch
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.steps = steps
        self.seed = seed
        self.lambda_t = lambda_t
        self.delta = delta
        self.beta = beta
        self.gamma = gamma
        self.dropout_ratio = dropout_ratio
        self.enable_tsl = enable_tsl
        self.enable_pfdl = enable_pfdl

    def _configs(self) -> tuple[ModelConfig, LossConfig, TrainConfig]:
        model_cfg = ModelConfig(
            block_channels=tuple(self.block_channels),
            head_hidden=tuple(self.head_hidden),
            iterations=self.iterations,
            use_pfi=self.use_pfi,
            use_gfi=self.use_gfi,
            use_saliency=self.use_saliency,
            dual_branch=self.dual_branch,
        )
        loss_cfg = LossConfig(
            lambda_t=self.lambda_t,
            delta=self.delta,
            beta=self.beta,
            gamma=self.gamma,
            dropout_ratio=self.dropout_ratio,
            enable_tsl=self.enable_tsl and self.dual_branch,
            enable_pfdl=self.enable_pfdl,
        )
        train_cfg = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            steps=self.steps,
            seed=self.seed,
            checkpoint_every=0,
        )
        return model_cfg, loss_cfg, train_cfg

    def fit(self, pairs, y=None):
        if not pairs:
            raise ValueError("fit needs at least one registration pair")
        adapted = []
        for item in pairs:
            if isinstance(item, RegistrationPair):
                adapted.append(item)
            else:
                source, reference = _clouds(item)
                adapted.append(RegistrationPair(
                    source=source, reference=reference, gt=_gt(item),
                    sampling_mode="", crop_manner="", noise_sigma=0.0, seed=0,
                ))
        model_cfg, loss_cfg, train_cfg = self._configs()
        set_determinism(train_cfg.seed, single_thread=True)
        model = RegistrationNet(model_cfg)
        result = train(model, adapted, train_cfg, loss_cfg)
        self.model_ = model
        self.history_ = result.history
        self.n_pairs_ = len(pairs)
        return self

    def predict(self, pairs) -> list[RigidTransform]:
        if not hasattr(self, "model_"):
            raise NotFittedError("this DualBranchRegistrar has not been fitted yet")
        preds = []
        for item in pairs:
            source, reference = _clouds(item)
            preds.append(self.model_.register_arrays(source, reference).final)
        return preds


class ICPRegistrar(_RegistrarMixin, BaseEstimator):
    """Classical baseline with the same estimator surface; fit is a no-op."""

    def __init__(self, max_iterations=50, convergence_tol=1e-6, max_correspondence_distance=math.inf):
        self.max_iterations = max_iterations
        self.convergence_tol = convergence_tol
        self.max_correspondence_distance = max_correspondence_distance

    def fit(self, pairs=None, y=None):
        # Validates the knobs; ICP has nothing to learn.
        self.config_ = IcpConfig(
            max_iterations=self.max_iterations,
            convergence_tol=self.convergence_tol,
            max_correspondence_distance=self.max_correspondence_distance,
        )
        return self

    def predict(self, pairs) -> list[RigidTransform]:
        if not hasattr(self, "config_"):
            self.fit()
        preds = []
        for item in pairs:
            source, reference = _clouds(item)
            preds.append(icp(source, reference, config=self.config_).transform)
        return preds
