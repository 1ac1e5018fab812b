"""Estimator-style facade over the functional training engine.

``SegmenterEstimator`` follows the familiar fit/predict/score contract with
``get_params``/``set_params`` from scikit-learn's ``BaseEstimator``, so the
networks drop into pipelines, grid search, and clone-based workflows. Inputs
are dense arrays shaped (n_samples, channels, *spatial).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import archs
from .errors import DimensionError, ValidationError
from .graph import init_store, run_graph
from .losses import LossConfig
from .metrics import dice
from .optim import ExpDecaySchedule
from .pipeline import train_loop

_BUILDERS = {"omnia": archs.build_omnia_net,
             "ds": archs.build_ds_net,
             "dx": archs.build_dx_net}


def check_volume_array(X, rank: int | None = None, name: str = "X"):
    """Validate a (n_samples, channels, *spatial) batch and return float64."""
    X = np.asarray(X)
    if X.ndim < 4:
        raise DimensionError(
            f"{name} must be (n_samples, channels, *spatial); got ndim={X.ndim}")
    if rank is not None and X.ndim - 2 != rank:
        raise DimensionError(
            f"{name} must have {rank} spatial axes; got {X.ndim - 2}")
    if not np.isfinite(X).all():
        raise ValidationError(f"{name} contains non-finite values")
    return X.astype(np.float64)


class SegmenterEstimator(BaseEstimator):
    """Trainable segmentation network with a scikit-learn surface.

    Parameters mirror the config-file keys; ``net`` selects the
    architecture family ("omnia" = 2D, "ds" = folded-depth hybrid,
    "dx" = fully 3D).
    """

    def __init__(self, net="omnia", in_channels=1, n_classes=1,
                 stem_filters=8, encoder_widths=(4, 8),
                 output_activation="sigmoid", depth_fold=8,
                 lr=1e-2, epochs=1, steps_per_epoch=50,
                 betas=(0.95, 0.99), lookahead_k=6, lookahead_alpha=0.5,
                 random_state=0):
        self.net = net
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.stem_filters = stem_filters
        self.encoder_widths = encoder_widths
        self.output_activation = output_activation
        self.depth_fold = depth_fold
        self.lr = lr
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.betas = betas
        self.lookahead_k = lookahead_k
        self.lookahead_alpha = lookahead_alpha
        self.random_state = random_state

    @property
    def _rank(self) -> int:
        return 2 if self.net == "omnia" else 3

    def _build(self, spatial):
        cfg = archs.ArchConfig(
            in_channels=self.in_channels, n_classes=self.n_classes,
            input_extents=tuple(spatial), stem_filters=self.stem_filters,
            encoder_widths=tuple(self.encoder_widths),
            output_activation=self.output_activation,
            depth_fold=self.depth_fold,
        )
        return _BUILDERS[self.net](cfg)

    def fit(self, X, y):
        """Train on paired batches; ``y`` is (n_samples, classes, *spatial)."""
        X = check_volume_array(X, self._rank)
        y = check_volume_array(np.asarray(y, dtype=np.float64), self._rank, "y")
        if X.shape[0] != y.shape[0]:
            raise ValidationError(
                f"X and y disagree on n_samples: {X.shape[0]} vs {y.shape[0]}")
        self.graph_ = self._build(X.shape[2:])
        self.store_ = init_store(self.graph_, seed=self.random_state,
                                 dtype=np.float64)
        samples = [(X[i:i + 1], y[i:i + 1]) for i in range(X.shape[0])]

        def batches(epoch):
            rng = np.random.default_rng((self.random_state, epoch))
            return [samples[int(rng.integers(len(samples)))]
                    for _ in range(self.steps_per_epoch)]

        schedule = ExpDecaySchedule(lr0=self.lr, factor=1.0, floor=1e-8)
        result = train_loop(
            self.graph_, self.store_, batches,
            epochs=self.epochs, schedule=schedule, loss_cfg=LossConfig(),
            betas=self.betas, lookahead_k=self.lookahead_k,
            lookahead_alpha=self.lookahead_alpha,
        )
        self.history_ = result.history
        return self

    def _check_fitted(self):
        if not hasattr(self, "store_"):
            raise ValidationError("estimator is not fitted; call fit first")

    def predict_proba(self, X):
        """Per-class probabilities, (n_samples, classes, *spatial)."""
        self._check_fitted()
        X = check_volume_array(X, self._rank)
        outs = [run_graph(self.graph_, self.store_, X[i:i + 1],
                          mode="infer")[0]
                for i in range(X.shape[0])]
        return np.concatenate(outs, axis=0)

    def predict(self, X, threshold: float = 0.5):
        """Hard masks: thresholded for sigmoid heads, argmax for softmax."""
        proba = self.predict_proba(X)
        if self.output_activation == "sigmoid":
            return (proba >= threshold).astype(np.uint8)
        return proba.argmax(axis=1).astype(np.uint8)

    def score(self, X, y):
        """Mean foreground overlap (Dice) across samples and classes."""
        pred = self.predict(X)
        y = np.asarray(y)
        if self.output_activation != "sigmoid":
            scores = [dice(pred[i] == c, y[i] == c)
                      for i in range(pred.shape[0])
                      for c in range(1, self.n_classes)]
        else:
            scores = [dice(pred[i, c] > 0, y[i, c] > 0)
                      for i in range(pred.shape[0])
                      for c in range(pred.shape[1])]
        return float(np.mean(scores))
