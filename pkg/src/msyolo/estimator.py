"""Scikit-learn style estimator facade over the detection pipeline.

``MSYoloDetector`` follows the fit/predict contract: hyperparameters are
constructor arguments stored verbatim (so ``get_params``/``set_params`` and
``sklearn.clone`` work), fitted state lives in trailing-underscore
attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DetectionDataset
from .errors import UsageError
from .metrics import EvalReport, evaluate_detections
from .trainer import TrainConfig, predict_images, train
from .validation import check_image_batch, check_targets


class MSYoloDetector(BaseEstimator):
    """Anchor-free infrared object detector with a UIB backbone.

    Parameters mirror the training config; ``fit`` trains from scratch on
    grayscale images, ``predict`` returns per-image detection dicts, and
    ``score`` reports mAP@0.50.

    Examples
    --------
    >>> det = MSYoloDetector(epochs=30, imgsz=160, seed=0)
    >>> det.fit(images, targets)  # doctest: +SKIP
    >>> det.predict(images[:2])   # doctest: +SKIP
    """

    def __init__(self, width_scale=0.25, imgsz=160, epochs=50, batch_size=8,
                 optimizer="adaptive", lr=0.01, use_slide=True,
                 backbone="mobilenetv4", conf_threshold=0.25, iou_threshold=0.45,
                 max_steps=0, seed=0, class_names=None):
        self.width_scale = width_scale
        self.imgsz = imgsz
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.use_slide = use_slide
        self.backbone = backbone
        self.conf_threshold = conf_threshold
        self.iou_threshold = iou_threshold
        self.max_steps = max_steps
        self.seed = seed
        self.class_names = class_names

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, imgsz=self.imgsz,
            width_scale=self.width_scale, optimizer=self.optimizer, lr=self.lr,
            use_slide=self.use_slide, backbone=self.backbone,
            conf_threshold=self.conf_threshold, iou_threshold=self.iou_threshold,
            max_steps=self.max_steps, seed=self.seed)

    def fit(self, X, y):
        """Train on images ``X`` with per-image ``{'boxes', 'labels'}`` targets."""
        images = check_image_batch(X)
        targets, inferred = check_targets(y, len(images))
        if self.class_names is not None:
            names = list(self.class_names)
            if inferred > len(names):
                raise UsageError(
                    f"targets contain label {inferred - 1} but only "
                    f"{len(names)} class names were given")
        else:
            names = [f"class{i}" for i in range(max(1, inferred))]
        ds = DetectionDataset(images=images, gts=targets, class_names=names)
        result = train(ds, self._train_config())
        self.class_names_ = names
        self.graph_ = result.graph
        self.train_log_ = result.log
        self.slide_state_ = result.state
        return self

    def _check_fitted(self):
        if not hasattr(self, "graph_"):
            raise UsageError("this MSYoloDetector instance is not fitted yet")

    def predict(self, X) -> list[dict]:
        """Per-image dicts with ``boxes`` (k,4), ``labels`` (k,), ``scores`` (k,)."""
        self._check_fitted()
        images = check_image_batch(X)
        per_image = predict_images(self.graph_, images, self.imgsz,
                                   self.conf_threshold, self.iou_threshold,
                                   batch_size=self.batch_size)
        out = []
        for dets in per_image:
            out.append({
                "boxes": np.array([d.box for d in dets], dtype=np.float64).reshape(-1, 4),
                "labels": np.array([d.class_id for d in dets], dtype=np.int64),
                "scores": np.array([d.confidence for d in dets], dtype=np.float64),
            })
        return out

    def evaluate(self, X, y) -> EvalReport:
        """Full per-class evaluation report on labeled data."""
        self._check_fitted()
        images = check_image_batch(X)
        targets, _ = check_targets(y, len(images))
        dets = predict_images(self.graph_, images, self.imgsz,
                              self.conf_threshold, self.iou_threshold,
                              batch_size=self.batch_size)
        return evaluate_detections(dets, targets, self.class_names_)

    def score(self, X, y) -> float:
        """mAP@0.50 on labeled data (higher is better)."""
        return self.evaluate(X, y).map50

    def save(self, path: str) -> None:
        self._check_fitted()
        save_checkpoint(self.graph_, path)

    def load(self, path: str) -> "MSYoloDetector":
        """Attach weights from a checkpoint to this (unfitted) estimator."""
        self.graph_ = load_checkpoint(path)
        m = self.graph_.config.num_classes
        names = list(self.class_names) if self.class_names else [f"class{i}" for i in range(m)]
        if len(names) != m:
            raise UsageError(f"checkpoint has {m} classes but {len(names)} names were given")
        self.class_names_ = names
        return self
