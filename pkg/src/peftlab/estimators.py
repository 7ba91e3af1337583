"""Scikit-learn style estimators over the adaptation trainer.

`fit(X, y)` adapts a frozen base checkpoint to the given data under the
trainable-parameter budget (or trains a fresh backbone when no checkpoint
is supplied); `predict(X)` returns dense per-pixel maps. Hyperparameters
follow sklearn conventions (stored verbatim, validated in fit), so the
estimators compose with `clone`, pipelines, and model selection tools.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .backbone import BackboneConfig
from .selection import CRITERION_GRADIENT
from .serialization import load_checkpoint
from .tasks import miou, rmse
from .training import (
    BASELINE_KINDS,
    TaskData,
    TrainConfig,
    adapt_with_mask,
    pretrain,
    run_adaptation,
    run_baseline,
)
from .validation import (
    check_depth_labels,
    check_image_array,
    check_segmentation_labels,
    train_val_split,
)


class _AdaptedDenseEstimator(BaseEstimator):
    _label_kind = ""  # subclass responsibility

    def __init__(self, base_checkpoint=None, beta=0.1, rho=0.5, steps=1000,
                 batch_size=8, lr=1e-3, weight_decay=0.01, step_size=None,
                 criterion=CRITERION_GRADIENT, adapter_style="sequential_residual",
                 baseline=None, imported_mask=None, backbone=None,
                 val_fraction=0.2, seed=0):
        self.base_checkpoint = base_checkpoint
        self.beta = beta
        self.rho = rho
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_size = step_size
        self.criterion = criterion
        self.adapter_style = adapter_style
        self.baseline = baseline
        self.imported_mask = imported_mask
        self.backbone = backbone
        self.val_fraction = val_fraction
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, seed=self.seed, beta=self.beta,
            rho=self.rho, step_size=self.step_size, criterion=self.criterion,
            adapter_style=self.adapter_style)

    def _validate_labels(self, y, X, num_classes):
        if self._label_kind == "segmentation":
            return check_segmentation_labels(y, X, num_classes)
        return check_depth_labels(y, X)

    def _backbone_config(self, X, y) -> BackboneConfig:
        fields = dict(self.backbone or {})
        fields.setdefault("image_size", (X.shape[1], X.shape[2]))
        fields.setdefault("in_channels", X.shape[3])
        fields["head_kind"] = self._label_kind
        if self._label_kind == "segmentation":
            fields.setdefault("num_classes", int(np.max(y)) + 1)
        return BackboneConfig(**fields)

    def fit(self, X, y):
        X = check_image_array(X)
        if self.baseline is not None and self.baseline not in BASELINE_KINDS:
            raise ValueError(
                f"baseline must be one of {BASELINE_KINDS} or None, got {self.baseline!r}")

        if self.base_checkpoint is not None:
            ckpt = load_checkpoint(self.base_checkpoint)
            if ckpt.adapter is not None:
                raise ValueError("base checkpoint already contains adapters")
            base = ckpt.to_model()
            config = base.config
            expected = (config.image_size[0], config.image_size[1], config.in_channels)
            if X.shape[1:] != expected:
                raise ValueError(
                    f"X shape {X.shape[1:]} does not match checkpoint input {expected}")
            if config.head_kind != self._label_kind:
                raise ValueError(
                    f"checkpoint head is {config.head_kind!r}, estimator needs "
                    f"{self._label_kind!r}")
        else:
            base = None
            config = None

        num_classes = config.num_classes if config is not None else None
        y = self._validate_labels(y, X, num_classes)
        if config is None:
            config = self._backbone_config(X, y)

        train_idx, val_idx = train_val_split(X.shape[0], self.val_fraction, self.seed)
        data = TaskData.from_arrays(
            X[train_idx], y[train_idx], X[val_idx], y[val_idx],
            self._label_kind, config.num_classes)

        train_config = self._train_config()
        if base is None:
            result = pretrain(config, data, train_config)
        elif self.imported_mask is not None:
            result = adapt_with_mask(base, data, train_config, self.imported_mask)
        elif self.baseline is not None:
            result = run_baseline(base, data, train_config, self.baseline)
        else:
            result = run_adaptation(base, data, train_config)

        self.model_ = result.model
        self.mask_manifest_ = result.mask.to_manifest() if result.mask else None
        self.report_ = result.report
        self.config_ = result.model.config
        if self._label_kind == "segmentation":
            self.classes_ = np.arange(result.model.config.num_classes)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted yet; call fit(X, y) first")

    def predict(self, X):
        self._check_fitted()
        X = check_image_array(X)
        return self.model_.predict(X)


class AdaptedSegmenter(_AdaptedDenseEstimator):
    """Per-pixel classifier: frozen backbone + budgeted adapters.

    score(X, y) is the mean intersection-over-union of the predicted
    class maps, in [0, 1].
    """

    _label_kind = "segmentation"

    def score(self, X, y):
        self._check_fitted()
        X = check_image_array(X)
        y = check_segmentation_labels(y, X, self.config_.num_classes)
        return miou(self.predict(X), y, self.config_.num_classes)


class AdaptedDepthRegressor(_AdaptedDenseEstimator):
    """Per-pixel regressor: frozen backbone + budgeted adapters.

    score(X, y) is the negative RMSE (higher is better, 0 is perfect),
    keeping the sklearn convention that larger scores win.
    """

    _label_kind = "regression"

    def score(self, X, y):
        self._check_fitted()
        X = check_image_array(X)
        y = check_depth_labels(y, X)
        return -rmse(self.predict(X), y)
