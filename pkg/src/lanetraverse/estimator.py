"""scikit-learn style estimators over featurized instances, plus input validation."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import GNNConfig, RolloutConfig, RunConfig, Thresholds, TrainConfig
from .data import Instance, collate
from .metrics import evaluate
from .model import PREDICT_KEY, PredictionSet, TraversalModel
from .scene import DT, FUTURE_STEPS
from .training import Trainer


def check_instances(X) -> list[Instance]:
    """A non-empty list of featurized instances."""
    if isinstance(X, Instance):
        X = [X]
    items = list(X)
    if not items:
        raise ValueError("expected at least one instance")
    bad = [type(x).__name__ for x in items if not isinstance(x, Instance)]
    if bad:
        raise TypeError(f"expected Instance objects, got {bad[0]}")
    return items


def check_mode_array(modes, n_instances: int | None = None) -> np.ndarray:
    """Validate an (n, K, 12, 2) array of finite predicted modes."""
    arr = np.asarray(modes, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[2:] != (FUTURE_STEPS, 2) or arr.shape[1] < 1:
        raise ValueError(f"modes must have shape (n, K, {FUTURE_STEPS}, 2), got {arr.shape}")
    if n_instances is not None and len(arr) != n_instances:
        raise ValueError(f"{len(arr)} prediction sets for {n_instances} instances")
    if not np.isfinite(arr).all():
        raise ValueError("modes contain non-finite values")
    return arr


def predict_sets(model: TraversalModel, instances: Sequence[Instance], batch_size: int = 32,
                 key: tuple[int, int] = PREDICT_KEY) -> list[PredictionSet]:
    """Prediction sets for every instance, batched; results do not depend on ``batch_size``."""
    out: list[PredictionSet] = []
    for i in range(0, len(instances), batch_size):
        out.extend(model.predict(collate(instances[i:i + batch_size]), key))
    return out


class TrajectoryPredictor(BaseEstimator):
    """Lane-graph traversal predictor with the two-phase training schedule.

    ``fit`` takes featurized instances (ground truth is carried inside each
    instance, so ``y`` is ignored); ``predict`` returns an (n, K, 12, 2)
    array of modes in each target frame, ordered by cluster size.
    """

    def __init__(self, decoder_mode: str = "traversals+lv", gnn_kind: str = "gat", gnn_depth: int = 2,
                 num_modes: int = 10, n_samples: int = 200, max_steps: int = 12, lr: float = 1e-3,
                 batch_size: int = 32, pretrain_epochs: int = 100, finetune_epochs: int = 100,
                 position_scale_m: float = 10.0, seed: int = 0):
        self.decoder_mode = decoder_mode
        self.gnn_kind = gnn_kind
        self.gnn_depth = gnn_depth
        self.num_modes = num_modes
        self.n_samples = n_samples
        self.max_steps = max_steps
        self.lr = lr
        self.batch_size = batch_size
        self.pretrain_epochs = pretrain_epochs
        self.finetune_epochs = finetune_epochs
        self.position_scale_m = position_scale_m
        self.seed = seed

    def to_config(self) -> RunConfig:
        return RunConfig(
            seed=self.seed, num_modes=self.num_modes, decoder_mode=self.decoder_mode,
            position_scale_m=self.position_scale_m,
            gnn=GNNConfig(self.gnn_kind, self.gnn_depth),
            rollout=RolloutConfig(self.max_steps, self.n_samples),
            thresholds=Thresholds(),
            train=TrainConfig(self.lr, self.batch_size, self.pretrain_epochs, self.finetune_epochs),
        )

    @classmethod
    def from_config(cls, config: RunConfig) -> "TrajectoryPredictor":
        return cls(decoder_mode=config.decoder_mode, gnn_kind=config.gnn.kind, gnn_depth=config.gnn.depth,
                   num_modes=config.num_modes, n_samples=config.rollout.samples,
                   max_steps=config.rollout.max_steps, lr=config.train.lr, batch_size=config.train.batch_size,
                   pretrain_epochs=config.train.epochs("pretrain"), finetune_epochs=config.train.epochs("finetune"),
                   position_scale_m=config.position_scale_m, seed=config.seed)

    def fit(self, X, y=None, run_dir=None):
        instances = check_instances(X)
        trainer = Trainer(self.to_config())
        self.history_ = trainer.fit(instances, run_dir)
        self.model_ = trainer.model
        return self

    def predict_sets(self, X) -> list[PredictionSet]:
        check_is_fitted(self, "model_")
        return predict_sets(self.model_, check_instances(X), self.batch_size)

    def predict(self, X) -> np.ndarray:
        return np.stack([p.trajectories for p in self.predict_sets(X)])

    def score(self, X, y=None) -> float:
        """Negative MinADE_10, so that larger is better."""
        instances = check_instances(X)
        report, _ = evaluate(list(self.predict(instances)), instances)
        return -report.min_ade_10


class ConstantVelocityPredictor(BaseEstimator):
    """Single-mode baseline: the current speed held along the current heading."""

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def predict(self, X) -> np.ndarray:
        instances = check_instances(X)
        t = DT * np.arange(1, FUTURE_STEPS + 1)
        out = np.zeros((len(instances), 1, FUTURE_STEPS, 2))
        for i, inst in enumerate(instances):
            out[i, 0, :, 0] = inst.target[-1, 2] * t  # target frame: heading along +x
        return out

    def score(self, X, y=None) -> float:
        instances = check_instances(X)
        report, _ = evaluate(list(self.predict(instances)), instances)
        return -report.min_ade_10
