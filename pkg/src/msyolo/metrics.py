"""Detection evaluation: IoU, greedy matching, precision/recall, AP, mAP.

Conventions, fixed across the package and its oracles:

- a detection is a true positive iff its IoU with an unmatched same-class
  ground truth STRICTLY exceeds the threshold;
- matching is greedy in descending confidence (ties by ascending detection
  index, IoU ties by ascending ground-truth index), one match per GT;
- AP uses 101-point interpolation (mean over recall thresholds
  0.00, 0.01, ..., 1.00 of the best precision at recall >= t);
- mAP averages over classes with at least one GT instance; classes with
  detections but no GT are reported as undefined and excluded;
- scalar precision/recall are read off the AP@0.50 curve at the prefix
  that maximizes F1 (ties resolved toward the shortest prefix).

All arithmetic is float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, UsageError
from .model import Detection

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


def iou(a, b) -> float:
    """Intersection-over-union of two (x_min, y_min, x_max, y_max) boxes."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    area_a = max(0.0, ax2 - ax1) * max(0.0, ay2 - ay1)
    area_b = max(0.0, bx2 - bx1) * max(0.0, by2 - by1)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@dataclass
class MatchRecord:
    """Outcome of one detection under one IoU threshold."""

    det_index: int
    class_id: int
    confidence: float
    is_true_positive: bool
    matched_gt: int | None = None
    image_index: int = 0


def match(dets: list[Detection], gts: list[tuple], iou_threshold: float) -> list[MatchRecord]:
    """Greedily match one image's detections against its ground truths.

    ``gts`` is a list of (class_id, box) pairs. Each GT is matched by at
    most one detection; a detection is TP iff its best-IoU unmatched
    same-class GT strictly exceeds the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    taken = [False] * len(gts)
    records = []
    for di in order:
        det = dets[di]
        best_iou = 0.0
        best_gt = None
        for gi, (gcls, gbox) in enumerate(gts):
            if taken[gi] or gcls != det.class_id:
                continue
            v = iou(det.box, gbox)
            if v > best_iou:  # IoU ties keep the earliest GT index
                best_iou = v
                best_gt = gi
        if best_gt is not None and best_iou > iou_threshold:
            taken[best_gt] = True
            records.append(MatchRecord(di, det.class_id, det.confidence, True, best_gt))
        else:
            records.append(MatchRecord(di, det.class_id, det.confidence, False, None))
    return records


def precision_recall(records: list[MatchRecord], num_gt: int):
    """Cumulative precision/recall over the descending-confidence prefix.

    Records must already be sorted in the global evaluation order.
    Returns (precision, recall, envelope) float64 arrays; the envelope is
    the right-to-left running maximum of precision used for AP integration.
    """
    if num_gt < 0:
        raise UsageError("num_gt must be non-negative")
    flags = np.array([r.is_true_positive for r in records], dtype=np.float64)
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    precision = tp / np.maximum(tp + fp, 1.0)
    recall = tp / num_gt if num_gt > 0 else np.zeros_like(tp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    return precision, recall, envelope


def average_precision(precision: np.ndarray, recall: np.ndarray, envelope: np.ndarray | None = None) -> float:
    """101-point interpolated area under the precision-recall curve."""
    if len(precision) == 0:
        return 0.0
    if envelope is None:
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for i in range(101):
        t = i / 100.0
        idx = np.searchsorted(recall, t, side="left")
        total += float(envelope[idx]) if idx < len(envelope) else 0.0
    return total / 101.0


def map_all(per_class_aps: dict) -> tuple[float, float]:
    """(mAP50, mAP50-95) from {class_id: {threshold: AP}} over 10 thresholds."""
    evaluable = sorted(per_class_aps)
    if not evaluable:
        raise UsageError("mAP undefined: no class has any ground-truth instance")
    map50 = sum(per_class_aps[c][IOU_THRESHOLDS[0]] for c in evaluable) / len(evaluable)
    map5095 = sum(
        sum(per_class_aps[c][t] for t in IOU_THRESHOLDS) / len(IOU_THRESHOLDS)
        for c in evaluable
    ) / len(evaluable)
    return map50, map5095


@dataclass
class ClassEval:
    class_id: int
    name: str
    pictures: int
    instances: int
    precision: float | None
    recall: float | None
    ap50: float | None
    ap50_95: float | None


@dataclass
class EvalReport:
    """Per-class metric table plus the aggregate 'all' row."""

    classes: list[ClassEval]
    all_pictures: int
    all_instances: int
    precision: float
    recall: float
    map50: float
    map50_95: float
    undefined_classes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "all": {
                "pictures": self.all_pictures,
                "instances": self.all_instances,
                "precision": self.precision,
                "recall": self.recall,
                "map50": self.map50,
                "map50_95": self.map50_95,
            },
            "classes": [
                {
                    "class_id": c.class_id,
                    "name": c.name,
                    "pictures": c.pictures,
                    "instances": c.instances,
                    "precision": c.precision,
                    "recall": c.recall,
                    "ap50": c.ap50,
                    "ap50_95": c.ap50_95,
                }
                for c in self.classes
            ],
            "undefined_classes": self.undefined_classes,
        }

    def to_text(self) -> str:
        def fmt(v):
            return "    -" if v is None else f"{v:.3f}"

        header = f"{'Class':<16}{'Pictures':>9}{'Instances':>11}{'Precision':>11}{'Recall':>8}{'mAP50':>8}{'mAP50-95':>10}"
        lines = [header]
        lines.append(
            f"{'all':<16}{self.all_pictures:>9}{self.all_instances:>11}"
            f"{fmt(self.precision):>11}{fmt(self.recall):>8}{fmt(self.map50):>8}{fmt(self.map50_95):>10}"
        )
        for c in self.classes:
            lines.append(
                f"{c.name:<16}{c.pictures:>9}{c.instances:>11}"
                f"{fmt(c.precision):>11}{fmt(c.recall):>8}{fmt(c.ap50):>8}{fmt(c.ap50_95):>10}"
            )
        return "\n".join(lines)


def _f1_operating_point(records: list[MatchRecord], num_gt: int):
    """Scalar (precision, recall) at the prefix maximizing F1 (smallest wins ties)."""
    if not records or num_gt == 0:
        return (0.0, 0.0) if num_gt > 0 else (None, None)
    precision, recall, _ = precision_recall(records, num_gt)
    best = (0.0, 0.0)
    best_f1 = -1.0
    for k in range(len(records)):
        p, r = float(precision[k]), float(recall[k])
        f1 = 2.0 * p * r / (p + r) if (p + r) > 0 else 0.0
        if f1 > best_f1:
            best_f1 = f1
            best = (p, r)
    return best


def evaluate_detections(detections: list[list[Detection]],
                        ground_truths: list[list[tuple]],
                        class_names: list[str],
                        iou_thresholds=IOU_THRESHOLDS) -> EvalReport:
    """Full dataset evaluation.

    ``detections[i]`` are the predictions for image i; ``ground_truths[i]``
    is a list of (class_id, (x_min, y_min, x_max, y_max)) pairs for image i.
    """
    if len(detections) != len(ground_truths):
        raise UsageError(
            f"detections cover {len(detections)} images but ground truth covers "
            f"{len(ground_truths)}")
    num_classes = len(class_names)
    num_gt = {c: 0 for c in range(num_classes)}
    pictures = {c: 0 for c in range(num_classes)}
    for gts in ground_truths:
        present = set()
        for gcls, _ in gts:
            num_gt[gcls] += 1
            present.add(gcls)
        for c in present:
            pictures[c] += 1

    # per threshold: match each image, then merge per class in global order
    per_class_records: dict[float, dict[int, list[MatchRecord]]] = {}
    for t in iou_thresholds:
        buckets: dict[int, list[MatchRecord]] = {c: [] for c in range(num_classes)}
        for img_idx, (dets, gts) in enumerate(zip(detections, ground_truths)):
            for rec in match(dets, gts, t):
                rec.image_index = img_idx
                buckets[rec.class_id].append(rec)
        for c in range(num_classes):
            buckets[c].sort(key=lambda r: (-r.confidence, r.image_index, r.det_index))
        per_class_records[t] = buckets

    evaluable = [c for c in range(num_classes) if num_gt[c] > 0]
    undefined = [c for c in range(num_classes)
                 if num_gt[c] == 0 and any(len(per_class_records[t][c]) for t in iou_thresholds)]
    if not evaluable:
        raise UsageError("mAP undefined: no class has any ground-truth instance")

    aps: dict[int, dict[float, float]] = {}
    rows = []
    for c in range(num_classes):
        if num_gt[c] == 0:
            rows.append(ClassEval(c, class_names[c], 0, 0, None, None, None, None))
            continue
        aps[c] = {}
        for t in iou_thresholds:
            p, r, env = precision_recall(per_class_records[t][c], num_gt[c])
            aps[c][t] = average_precision(p, r, env)
        prec, rec = _f1_operating_point(per_class_records[iou_thresholds[0]][c], num_gt[c])
        ap50 = aps[c][iou_thresholds[0]]
        ap5095 = sum(aps[c][t] for t in iou_thresholds) / len(iou_thresholds)
        rows.append(ClassEval(c, class_names[c], pictures[c], num_gt[c], prec, rec, ap50, ap5095))

    map50, map5095 = map_all(aps)
    mean_p = sum(rows[c].precision for c in evaluable) / len(evaluable)
    mean_r = sum(rows[c].recall for c in evaluable) / len(evaluable)
    return EvalReport(
        classes=rows,
        all_pictures=len(ground_truths),
        all_instances=sum(num_gt.values()),
        precision=mean_p,
        recall=mean_r,
        map50=map50,
        map50_95=map5095,
        undefined_classes=undefined,
    )


def load_predictions_jsonl(path: str, num_images: int) -> list[list[Detection]]:
    """Read detections from JSON lines: one object per detection with keys
    ``image_index``, ``class_id``, ``box`` ([x_min, y_min, x_max, y_max]) and
    ``confidence``."""
    out: list[list[Detection]] = [[] for _ in range(num_images)]
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                idx = int(obj["image_index"])
                det = Detection(box=tuple(float(v) for v in obj["box"]),
                                class_id=int(obj["class_id"]),
                                confidence=float(obj["confidence"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: bad prediction record: {exc}") from None
            if not 0 <= idx < num_images:
                raise ParseError(f"{path}:{lineno}: image_index {idx} out of range")
            out[idx].append(det)
    return out
