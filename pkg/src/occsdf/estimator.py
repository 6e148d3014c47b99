"""scikit-learn style wrapper: fit on a supervision dataset, predict signed distances."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import Dataset, load_dataset
from .fields import FieldConfig
from .mesh import DEFAULT_THRESHOLD, evaluate, extract_mesh
from .renderer import SamplingConfig
from .training import MODES, TrainConfig, train


class OccSDFReconstructor(RegressorMixin, BaseEstimator):
    """Surface reconstructor with the usual ``fit`` / ``predict`` contract.

    ``fit`` takes a :class:`~occsdf.data.Dataset` (or a dataset directory);
    ``predict`` maps ``(n, 3)`` points to signed distances. ``score`` returns
    the negative mean absolute SDF error so that higher is better.
    """

    def __init__(self, mode="full", iterations=2000, batch_rays=512, learning_rate=5e-4, seed=0,
                 sample_count=64, importance_count=32, hidden=128, feature_dim=256, log_every=100):
        self.mode = mode
        self.iterations = iterations
        self.batch_rays = batch_rays
        self.learning_rate = learning_rate
        self.seed = seed
        self.sample_count = sample_count
        self.importance_count = importance_count
        self.hidden = hidden
        self.feature_dim = feature_dim
        self.log_every = log_every

    def _train_config(self) -> TrainConfig:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_rays=self.batch_rays,
            iterations=self.iterations,
            mode=self.mode,
            seed=self.seed,
            log_every=self.log_every,
            sampling=SamplingConfig(count=self.sample_count, importance_count=self.importance_count),
            field=FieldConfig(geo_hidden=self.hidden, app_hidden=self.hidden, feature_dim=self.feature_dim,
                              decoder_hidden=self.hidden),
        )

    def fit(self, X, y=None):
        dataset = X if isinstance(X, Dataset) else load_dataset(X)
        result = train(self._train_config(), dataset)
        self.field_ = result.field
        self.bounds_ = np.asarray(dataset.bounds, dtype=np.float64)
        self.training_log_ = result.log
        self.n_features_in_ = 3
        return self

    def _points(self, X) -> torch.Tensor:
        check_is_fitted(self, "field_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 3:
            raise ValueError(f"expected (n, 3) points, got {X.shape[1]} columns")
        return torch.as_tensor(X, dtype=self.field_.dtype)

    def predict(self, X) -> np.ndarray:
        p = self._points(X)
        with torch.no_grad():
            return self.field_.sdf(p).double().numpy()

    def predict_occupancy(self, X) -> np.ndarray:
        p = self._points(X)
        with torch.no_grad():
            return self.field_.geometry(p)[1].double().numpy()

    def score(self, X, y, sample_weight=None):
        y = check_array(np.asarray(y, dtype=np.float64).reshape(-1, 1), dtype=np.float64).ravel()
        err = np.abs(self.predict(X) - y)
        return -float(np.average(err, weights=sample_weight))

    def extract_mesh(self, resolution=128, bounds=None):
        check_is_fitted(self, "field_")
        return extract_mesh(self.field_, self.bounds_ if bounds is None else bounds, resolution)

    def evaluate(self, gt, resolution=128, threshold=DEFAULT_THRESHOLD, n=100_000, seed=0):
        return evaluate(self.extract_mesh(resolution), gt, threshold, n, seed)
