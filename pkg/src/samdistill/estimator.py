"""scikit-learn style wrapper around :func:`samdistill.train.train`.

``X`` holds degraded images and ``y`` clean targets, both ``[N, C, H, W]``
in ``[0, 1]``. ``predict`` runs the student alone.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import OptimizerConfig, TrainConfig
from .core.types import ShapeError
from .segmenter import SegmenterConfig
from .train import DTYPES, Checkpoint, PairedData, evaluate, load_student, restore, train


def check_images(X, name: str = "X", dtype=np.float64) -> np.ndarray:
    """Validate an image batch: finite, 4-D, 1 or 3 channels, sides divisible by 8."""
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_all_finite=True, input_name=name)
    if X.ndim != 4:
        raise ShapeError(f"{name} must be [N, C, H, W], got {X.ndim} dims")
    if X.shape[1] not in (1, 3):
        raise ShapeError(f"{name} must have 1 or 3 channels, got {X.shape[1]}")
    if X.shape[2] % 8 or X.shape[3] % 8:
        raise ShapeError(f"{name} spatial size {X.shape[2:]} must be divisible by 8")
    return X


def check_pairs(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = check_images(X, "X")
    y = check_images(y, "y")
    if X.shape != y.shape:
        raise ShapeError(f"X and y shapes differ: {X.shape} vs {y.shape}")
    return X, y


class DistilledRestorer(TransformerMixin, BaseEstimator):
    """Student restorer trained with mask-prior distillation from a refiner.

    ``lambda1 = lambda2 = 0`` trains the student alone (the teacher is skipped).
    """

    def __init__(
        self,
        lambda1: float = 0.005,
        lambda2: float = 200.0,
        steps: int = 2000,
        batch_size: int = 8,
        lr: float = 1e-4,
        segmenter: str = "luminance",
        relation_vectorize: str = "pool",
        sgr_distance: str = "squared",
        dtype: str = "float32",
        seed: int = 0,
    ):
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.segmenter = segmenter
        self.relation_vectorize = relation_vectorize
        self.sgr_distance = sgr_distance
        self.dtype = dtype
        self.seed = seed

    def _config(self, channels: int) -> TrainConfig:
        base = TrainConfig()
        distill = self.lambda1 > 0 or self.lambda2 > 0
        return replace(
            base,
            baseline=replace(base.baseline, in_channels=channels),
            refiner=replace(base.refiner, in_channels=channels),
            segmenter=SegmenterConfig(kind=self.segmenter),
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            relation_vectorize=self.relation_vectorize,
            sgr_distance=self.sgr_distance,
            optimizer=OptimizerConfig(lr=self.lr),
            batch_size=self.batch_size,
            steps=self.steps,
            seed=self.seed,
            dtype=self.dtype,
            train_teacher=distill,
            log_every=0,
        )

    def fit(self, X, y):
        X, y = check_pairs(X, y)
        cfg = self._config(X.shape[1])
        self.checkpoint_: Checkpoint = train(cfg, PairedData.from_arrays(X, y, dtype=DTYPES[cfg.dtype]))
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.n_channels_ = X.shape[1]
        self.student_ = load_student(self.checkpoint_)
        return self

    def _check_X(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        X = check_images(X)
        if X.shape[1] != self.n_channels_:
            raise ShapeError(f"fitted on {self.n_channels_} channels, got {X.shape[1]}")
        return X

    def predict(self, X) -> np.ndarray:
        """Student-only restoration, clamped to ``[0, 1]``."""
        X = self._check_X(X)
        lq = torch.as_tensor(X, dtype=DTYPES[self.dtype])
        return restore(self.student_, lq).to(torch.float64).numpy()

    def transform(self, X) -> np.ndarray:
        return self.predict(X)

    def score(self, X, y, which: str = "student") -> float:
        """Mean PSNR (dB) of the restored ``X`` against ``y``."""
        X = self._check_X(X)
        _, y = check_pairs(X, y)
        return evaluate(self.checkpoint_, PairedData.from_arrays(X, y), which)["psnr"]
