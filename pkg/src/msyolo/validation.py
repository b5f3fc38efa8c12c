"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def check_image_batch(X) -> list[np.ndarray]:
    """Coerce input images to a list of (H, W) float32 arrays in [0, 1].

    Accepts a single 2-D array, an (N, H, W) or (N, 1, H, W) array, or a
    list of 2-D arrays (sizes may differ; letterboxing handles that later).
    Integer dtypes are assumed 0..255.
    """
    if isinstance(X, np.ndarray):
        if X.ndim == 2:
            items = [X]
        elif X.ndim == 3:
            items = list(X)
        elif X.ndim == 4 and X.shape[1] == 1:
            items = [x[0] for x in X]
        else:
            raise ValidationError(
                f"images must be (H,W), (N,H,W) or (N,1,H,W); got shape {X.shape}")
    elif isinstance(X, (list, tuple)):
        items = [np.asarray(x) for x in X]
    else:
        raise ValidationError(f"unsupported image container {type(X).__name__}")

    out = []
    for i, img in enumerate(items):
        arr = np.asarray(img)
        if arr.ndim != 2:
            raise ValidationError(f"image {i} is not 2-D grayscale (shape {arr.shape})")
        if arr.size == 0:
            raise ValidationError(f"image {i} is empty")
        if np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype(np.float32) / 255.0
        else:
            arr = arr.astype(np.float32)
            if arr.size and float(arr.max(initial=0.0)) > 1.5:
                arr = arr / 255.0
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"image {i} contains non-finite values")
        out.append(np.clip(arr, 0.0, 1.0))
    return out


def check_targets(y, n_images: int) -> tuple[list, int]:
    """Normalize per-image targets to [(class_id, (x1, y1, x2, y2)), ...].

    Each element of ``y`` is a dict with ``boxes`` ((k, 4) corner format)
    and ``labels`` ((k,) integers), or a (boxes, labels) pair. Returns the
    normalized targets and the inferred class count.
    """
    if y is None:
        raise ValidationError("detection training requires targets (got y=None)")
    if len(y) != n_images:
        raise ValidationError(f"got {len(y)} target entries for {n_images} images")
    targets = []
    max_label = -1
    for i, entry in enumerate(y):
        if isinstance(entry, dict):
            boxes, labels = entry.get("boxes"), entry.get("labels")
        else:
            boxes, labels = entry
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        labels = np.asarray(labels).reshape(-1)
        if boxes.shape[0] != labels.shape[0]:
            raise ValidationError(
                f"targets[{i}]: {boxes.shape[0]} boxes vs {labels.shape[0]} labels")
        if boxes.size and not np.all(np.isfinite(boxes)):
            raise ValidationError(f"targets[{i}]: non-finite box coordinates")
        if boxes.size and (np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1])):
            raise ValidationError(f"targets[{i}]: boxes must satisfy x_min < x_max, y_min < y_max")
        if labels.size and (np.any(labels < 0) or not np.issubdtype(labels.dtype, np.integer)):
            raise ValidationError(f"targets[{i}]: labels must be non-negative integers")
        if labels.size:
            max_label = max(max_label, int(labels.max()))
        targets.append([(int(c), tuple(float(v) for v in b)) for c, b in zip(labels, boxes)])
    return targets, max_label + 1
