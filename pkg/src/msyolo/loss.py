"""SlideLoss sample weighting, target assignment, and the detection loss.

The piecewise-exponential weight emphasizes prediction-target pairs whose
IoU sits just below the adaptive threshold mu:

    f(x) = 1          for x <= mu - 0.1
    f(x) = e^(1-mu)   for mu - 0.1 < x < mu
    f(x) = e^(1-x)    for x >= mu

mu tracks the running average of matched-pair IoUs via an exponential
moving average, clamped to [0.05, 1.2]; pushing mu to 1.1 or above makes
the flat branch cover all of [0, 1], which reproduces the unweighted
baseline loss exactly.

The composite loss is CIoU box regression over positive cells plus
binary cross-entropy classification, with the slide weight applied to the
positive classification term only and treated as a constant per step (no
gradient flows through the weight).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import InvalidStateError
from .metrics import iou
from .tensor import Tensor

MU_MIN, MU_MAX = 0.05, 1.2
BASELINE_MU = 1.1  # flat branch covers all of [0, 1] from here up

# box-area thresholds (letterboxed pixels) routing each GT to one scale
SCALE_AREA_BOUNDS = (32.0 ** 2, 96.0 ** 2)


@dataclass(frozen=True)
class SlideState:
    """Adaptive threshold state owned by the training loop."""

    mu: float = 0.5
    ema_momentum: float = 0.05
    sample_count: int = 0

    def __post_init__(self):
        if not MU_MIN <= self.mu <= MU_MAX:
            raise InvalidStateError(f"mu {self.mu} outside [{MU_MIN}, {MU_MAX}]")
        # 1.0 is legal: it makes mu exactly the latest batch mean
        if not 0.0 < self.ema_momentum <= 1.0:
            raise InvalidStateError(f"ema momentum {self.ema_momentum} outside (0,1]")


def slide_weight(x, mu: float):
    """Piecewise-exponential weight f(x) for a pair with IoU x.

    Accepts a scalar or an array; continuous at x == mu, with the single
    jump of height e^(1-mu) - 1 at x == mu - 0.1.
    """
    xa = np.asarray(x, dtype=np.float64)
    flat = xa <= mu - 0.1
    high = xa >= mu
    out = np.where(flat, 1.0, np.where(high, np.exp(1.0 - xa), math.exp(1.0 - mu)))
    return float(out) if np.isscalar(x) or xa.ndim == 0 else out


def update_mu(state: SlideState, matched_ious) -> SlideState:
    """EMA update toward the batch mean of matched-pair IoUs, clamped."""
    ious = [float(v) for v in matched_ious]
    if not ious:
        return state
    m = state.ema_momentum
    new_mu = (1.0 - m) * state.mu + m * (sum(ious) / len(ious))
    new_mu = min(max(new_mu, MU_MIN), MU_MAX)
    return replace(state, mu=new_mu, sample_count=state.sample_count + len(ious))


@dataclass
class AssignedTarget:
    """One ground truth bound to a (scale, cell) plus its current pair IoU."""

    image_index: int
    scale_index: int
    cell: tuple  # (i, j) in the scale's grid
    gt_box: tuple  # (x_min, y_min, x_max, y_max), letterboxed pixels
    gt_class: int
    pair_iou: float = 0.0


def assign_targets(grid_shapes, gts_per_image, strides=(8, 16, 32)) -> list[AssignedTarget]:
    """Bind each GT to one scale (by box area) and one cell (by center).

    ``grid_shapes`` is [(h, w)] per scale; ``gts_per_image[i]`` is a list of
    (class_id, (x_min, y_min, x_max, y_max)) in letterboxed pixels. Cells
    are half-open, so a center exactly on a boundary lands in the
    higher-index cell. When two GTs claim the same cell the larger-area one
    wins and the loser is dropped for this step.
    """
    chosen: dict[tuple, tuple] = {}  # (img, scale, i, j) -> (area, order, target)
    for img_idx, gts in enumerate(gts_per_image):
        for order, (gcls, box) in enumerate(gts):
            x1, y1, x2, y2 = (float(v) for v in box)
            area = max(0.0, x2 - x1) * max(0.0, y2 - y1)
            if area <= 0.0:
                continue
            if area < SCALE_AREA_BOUNDS[0]:
                scale = 0
            elif area < SCALE_AREA_BOUNDS[1]:
                scale = 1
            else:
                scale = 2
            stride = strides[scale]
            h, w = grid_shapes[scale]
            i = min(max(int((y1 + y2) / 2.0 // stride), 0), h - 1)
            j = min(max(int((x1 + x2) / 2.0 // stride), 0), w - 1)
            key = (img_idx, scale, i, j)
            target = AssignedTarget(img_idx, scale, (i, j), (x1, y1, x2, y2), int(gcls))
            prev = chosen.get(key)
            if prev is None or area > prev[0]:
                chosen[key] = (area, order, target)
    ordered = sorted(chosen.values(), key=lambda v: (v[2].image_index, v[2].scale_index, v[1]))
    return [t for _, _, t in ordered]


def decode_cells(raw_map: np.ndarray, n_idx, i_idx, j_idx, stride: int) -> np.ndarray:
    """Decode the boxes predicted at specific cells (numpy, no gradient)."""
    cells = raw_map[n_idx, :4, i_idx, j_idx].astype(np.float64)  # (K, 4)
    dist = T._softplus_np(cells)
    cx = (j_idx + 0.5) * stride
    cy = (i_idx + 0.5) * stride
    return np.stack([
        cx - dist[:, 0] * stride,
        cy - dist[:, 1] * stride,
        cx + dist[:, 2] * stride,
        cy + dist[:, 3] * stride,
    ], axis=1)


def compute_pair_ious(raw_maps, assignments: list[AssignedTarget], strides=(8, 16, 32)) -> list[AssignedTarget]:
    """Refresh each assignment's pair IoU from the current predictions."""
    maps = [m.data if isinstance(m, Tensor) else np.asarray(m) for m in raw_maps]
    for t in assignments:
        raw = maps[t.scale_index]
        i, j = t.cell
        box = decode_cells(raw, np.array([t.image_index]), np.array([i]), np.array([j]),
                           strides[t.scale_index])[0]
        t.pair_iou = iou(tuple(box), t.gt_box)
    return assignments


def _col(t: Tensor, idx: int) -> Tensor:
    return T.take(t, (slice(None), idx))


def ciou(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Complete-IoU loss per row of (K, 4) corner boxes; 0 iff identical.

    Degenerate predictions are floored to a hair above zero extent, which
    keeps the loss finite with IoU ~ 0 and a full center-distance penalty.
    """
    gt = np.asarray(gt, dtype=pred.dtype)
    px1, py1, px2, py2 = (_col(pred, k) for k in range(4))
    gx1, gy1, gx2, gy2 = (gt[:, k] for k in range(4))
    pw = T.maximum(px2 - px1, 1e-12)
    ph = T.maximum(py2 - py1, 1e-12)
    gw = np.maximum(gx2 - gx1, 1e-12)
    gh = np.maximum(gy2 - gy1, 1e-12)

    ix1 = T.maximum(px1, gx1)
    iy1 = T.maximum(py1, gy1)
    ix2 = T.minimum(px2, gx2)
    iy2 = T.minimum(py2, gy2)
    inter = T.maximum(ix2 - ix1, 0.0) * T.maximum(iy2 - iy1, 0.0)
    union = pw * ph + gw * gh - inter
    iou_t = inter / union

    ex1 = T.minimum(px1, gx1)
    ey1 = T.minimum(py1, gy1)
    ex2 = T.maximum(px2, gx2)
    ey2 = T.maximum(py2, gy2)
    c2 = (ex2 - ex1) ** 2.0 + (ey2 - ey1) ** 2.0
    rho2 = ((px1 + px2) * 0.5 - (gx1 + gx2) * 0.5) ** 2.0 \
        + ((py1 + py2) * 0.5 - (gy1 + gy2) * 0.5) ** 2.0

    v = (T.arctan(pw / ph) - np.arctan(gw / gh)) ** 2.0 * (4.0 / math.pi ** 2)
    alpha = v / (1.0 - iou_t + v + 1e-9)
    return 1.0 - iou_t + rho2 / c2 + alpha * v


def ciou_loss(pred_box, gt_box) -> float:
    """Scalar CIoU loss between two corner boxes."""
    pred = Tensor(np.asarray([pred_box], dtype=np.float64))
    out = ciou(pred, np.asarray([gt_box], dtype=np.float64))
    return float(out.data[0])


def detection_loss(raw_maps, assignments: list[AssignedTarget], mu: float, *,
                   lambda_box: float = 7.5, lambda_cls: float = 0.5,
                   use_slide: bool = True, strides=(8, 16, 32)):
    """Composite detection loss over the raw head maps.

    total = (lambda_box * sum CIoU
             + lambda_cls * sum w * BCE(pos)
             + lambda_cls * sum BCE(neg)) / max(1, P)

    where P is the number of positive cells, w is the slide weight of each
    positive's pair IoU (1.0 when ``use_slide`` is off), the positive BCE
    covers all class channels at assigned cells against one-hot targets,
    and the negative BCE covers every other cell against all-zero targets.
    Weights are constants per step; gradients flow only through the raw
    predictions. Returns (scalar Tensor, components).
    """
    raw_maps = [m if isinstance(m, Tensor) else Tensor(m) for m in raw_maps]
    num_pos = len(assignments)
    denom = float(max(1, num_pos))
    dtype = raw_maps[0].dtype

    box_sum = None
    pos_sum = None
    neg_sum = None
    for s, raw in enumerate(raw_maps):
        n, c, h, w = raw.shape
        m = c - 4
        stride = strides[s]
        scale_ts = [t for t in assignments if t.scale_index == s]

        target_map = np.zeros((n, m, h, w), dtype=dtype)
        pos_weight = np.zeros((n, 1, h, w), dtype=dtype)
        neg_mask = np.ones((n, 1, h, w), dtype=dtype)
        if scale_ts:
            n_idx = np.array([t.image_index for t in scale_ts])
            i_idx = np.array([t.cell[0] for t in scale_ts])
            j_idx = np.array([t.cell[1] for t in scale_ts])
            cls_idx = np.array([t.gt_class for t in scale_ts])
            weights = (slide_weight(np.array([t.pair_iou for t in scale_ts]), mu)
                       if use_slide else np.ones(len(scale_ts)))
            target_map[n_idx, cls_idx, i_idx, j_idx] = 1.0
            pos_weight[n_idx, 0, i_idx, j_idx] = weights.astype(dtype)
            neg_mask[n_idx, 0, i_idx, j_idx] = 0.0

            # box regression at positive cells
            box_cells = T.take(raw, (n_idx, slice(0, 4), i_idx, j_idx))  # (K, 4)
            dist = T.softplus(box_cells)
            cx = ((j_idx + 0.5) * stride).astype(dtype)
            cy = ((i_idx + 0.5) * stride).astype(dtype)
            x1 = _col(dist, 0) * (-stride) + cx
            y1 = _col(dist, 1) * (-stride) + cy
            x2 = _col(dist, 2) * stride + cx
            y2 = _col(dist, 3) * stride + cy
            pred_boxes = T.stack([x1, y1, x2, y2], axis=1)
            gt_boxes = np.array([t.gt_box for t in scale_ts], dtype=np.float64)
            box_term = ciou(pred_boxes, gt_boxes).sum()
            box_sum = box_term if box_sum is None else box_sum + box_term

        cls_logits = T.take(raw, (slice(None), slice(4, None)))
        bce = T.bce_with_logits(cls_logits, target_map)
        if scale_ts:
            pos_term = (bce * Tensor(pos_weight, dtype=dtype)).sum()
            pos_sum = pos_term if pos_sum is None else pos_sum + pos_term
        neg_term = (bce * Tensor(neg_mask, dtype=dtype)).sum()
        neg_sum = neg_term if neg_sum is None else neg_sum + neg_term

    components = {}
    total = None
    if box_sum is not None:
        box_part = box_sum * (lambda_box / denom)
        cls_pos_part = pos_sum * (lambda_cls / denom)
        total = box_part + cls_pos_part
        components["box"] = float(box_part.data)
        components["cls_pos"] = float(cls_pos_part.data)
    else:
        components["box"] = 0.0
        components["cls_pos"] = 0.0
    neg_part = neg_sum * (lambda_cls / denom)
    total = neg_part if total is None else total + neg_part
    components["cls_neg"] = float(neg_part.data)
    components["total"] = float(total.data)
    components["num_pos"] = num_pos
    components["mu"] = float(mu)
    for name in ("box", "cls_pos", "cls_neg", "total"):
        if not math.isfinite(components[name]):
            raise InvalidStateError(f"detection loss component {name!r} is not finite")
    return total, components
