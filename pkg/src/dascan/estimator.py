"""scikit-learn estimator facade over the adaptive-scan classifier.

Thin adapter: images in, class labels out, with the usual
``fit``/``predict``/``score`` surface so the model drops into sklearn
pipelines and model-selection utilities. The native training loop in
:mod:`dascan.train` remains the primary interface; this wrapper exists
for interoperability, not new behavior.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from .errors import ShapeError


class ScanImageClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier with a dynamically re-scanned SSM backbone.

    Parameters mirror the native config/hyper objects; all are plain
    constructor attributes per sklearn convention. ``X`` is a float
    array of shape (n_samples, 3, H, W) with values in [0, 1] and H, W
    divisible by 32.
    """

    def __init__(self, preset: str = "micro", epochs: int = 5,
                 lr: float = 1e-3, batch_size: int = 32,
                 weight_decay: float = 0.05, label_smoothing: float = 0.1,
                 use_das: bool = True, use_convpos: bool = True,
                 use_convffn: bool = True, budget_seconds: float | None = None,
                 seed: int = 0):
        self.preset = preset
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.label_smoothing = label_smoothing
        self.use_das = use_das
        self.use_convpos = use_convpos
        self.use_convffn = use_convffn
        self.budget_seconds = budget_seconds
        self.seed = seed

    def _validate_images(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 4 or X.shape[1] != 3:
            raise ShapeError(
                f"X must be (n_samples, 3, H, W), got {X.shape}")
        return X

    def fit(self, X, y):
        from .model import preset as make_config
        from .train import TrainHyper, TrainState, train

        X = self._validate_images(X)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ShapeError(f"y shape {y.shape} != ({len(X)},)")
        self.classes_ = unique_labels(y)
        encoded = np.searchsorted(self.classes_, y)
        config = make_config(self.preset, num_classes=len(self.classes_),
                             use_das=self.use_das,
                             use_convpos=self.use_convpos,
                             use_convffn=self.use_convffn)
        hyper = TrainHyper(lr=self.lr, batch_size=self.batch_size,
                           weight_decay=self.weight_decay,
                           label_smoothing=self.label_smoothing,
                           epochs=self.epochs)
        state = TrainState.fresh(config, hyper, seed=self.seed)
        self.history_ = train(state, X, encoded,
                              budget_seconds=self.budget_seconds)
        self.state_ = state
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "state_")
        from . import tensor as T

        X = self._validate_images(X)
        chunks = []
        with T.no_grad():
            for lo in range(0, len(X), self.batch_size):
                logits = self.state_.model.forward(X[lo:lo + self.batch_size],
                                                   training=False)
                chunks.append(logits.data)
        return np.concatenate(chunks, axis=0)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)  # fitted-check runs before classes_
        return self.classes_[np.argmax(scores, axis=-1)]
