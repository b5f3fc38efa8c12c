"""Independent reference implementations used as test oracles.

Everything here is written naively (explicit loops, pure Python floats)
and separately from the package's production code paths, so agreement is
meaningful. The finite-difference probe evaluates the function in float64
regardless of the precision under test.
"""

from __future__ import annotations

import math

import numpy as np

from msyolo.tensor import Tensor


# -- convolution -------------------------------------------------------------


def naive_conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """Nested-loop cross-correlation; the shape/semantics oracle for conv2d."""
    n, cin, h, wd = x.shape
    cout, cin_g, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(np.asarray(x, dtype=np.float64),
                ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    cpg = cout // groups
    for ni in range(n):
        for co in range(cout):
            g = co // cpg
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(cin_g):
                        for ky in range(k):
                            for kx in range(k):
                                acc += float(xp[ni, g * cin_g + ci, oy * stride + ky, ox * stride + kx]) \
                                    * float(w[co, ci, ky, kx])
                    out[ni, co, oy, ox] = acc + (float(b[co]) if b is not None else 0.0)
    return out


# -- finite differences --------------------------------------------------------


def finite_difference_grads(fn, arrays, h=1e-3):
    """Central differences of a scalar function of several arrays (float64)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(arrays)
            flat[i] = orig - h
            fm = fn(arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def check_gradients(build, arrays, dtype=np.float32, rel_tol=1e-4, h=1e-3):
    """Analytic gradients at ``dtype`` against float64 central differences.

    ``build`` maps a list of Tensors to a scalar Tensor and must be pure.
    Error metric: |analytic - numeric| / max(1, |analytic|), elementwise.
    Returns the worst relative error over all inputs.
    """
    leaves = [Tensor(a, requires_grad=True, dtype=dtype) for a in arrays]
    build(leaves).backward()
    analytic = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]

    def probe(arrs):
        return float(build([Tensor(a, dtype=np.float64) for a in arrs]).data)

    numeric = finite_difference_grads(probe, arrays, h=h)
    worst = 0.0
    for a, nmr in zip(analytic, numeric):
        err = np.abs(a.astype(np.float64) - nmr) / np.maximum(1.0, np.abs(a.astype(np.float64)))
        worst = max(worst, float(err.max()))
    assert worst < rel_tol, f"gradient mismatch: max relative error {worst:.3e} >= {rel_tol}"
    return worst


# -- detection evaluation -------------------------------------------------------

BF_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


def bf_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0.0 else 0.0


def bf_match_image(dets, gts, thr):
    """Greedy per-image matching; returns [(det, det_index, is_tp)]."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    used = set()
    out = []
    for di in order:
        d = dets[di]
        best_iou = 0.0
        best_gt = None
        for gi, (gcls, gbox) in enumerate(gts):
            if gi in used or gcls != d.class_id:
                continue
            v = bf_iou(d.box, gbox)
            if v > best_iou:
                best_iou = v
                best_gt = gi
        if best_gt is not None and best_iou > thr:
            used.add(best_gt)
            out.append((d, di, True))
        else:
            out.append((d, di, False))
    return out


def bf_curves(flags, num_gt):
    """Cumulative precision/recall from an ordered TP/FP flag list."""
    tp = fp = 0
    precision, recall = [], []
    for is_tp in flags:
        if is_tp:
            tp += 1
        else:
            fp += 1
        precision.append(tp / (tp + fp))
        recall.append(tp / num_gt if num_gt > 0 else 0.0)
    return precision, recall


def bf_average_precision(precision, recall) -> float:
    if not precision:
        return 0.0
    total = 0.0
    for i in range(101):
        t = i / 100.0
        best = 0.0
        for p, r in zip(precision, recall):
            if r >= t and p > best:
                best = p
        total += best
    return total / 101.0


def bf_f1_point(flags, num_gt):
    if not flags or num_gt == 0:
        return 0.0, 0.0
    precision, recall = bf_curves(flags, num_gt)
    best_p, best_r, best_f1 = 0.0, 0.0, -1.0
    for p, r in zip(precision, recall):
        f1 = 2.0 * p * r / (p + r) if (p + r) > 0 else 0.0
        if f1 > best_f1:
            best_f1, best_p, best_r = f1, p, r
    return best_p, best_r


def brute_force_report(dets_per_image, gts_per_image, num_classes):
    """Full evaluation by exhaustive loops; mirrors the documented protocol:
    per-image greedy matching, global ordering by (-confidence, image index,
    detection index), 101-point AP, means over classes with ground truth."""
    num_gt = {c: 0 for c in range(num_classes)}
    for gts in gts_per_image:
        for gcls, _ in gts:
            num_gt[gcls] += 1

    per_class = {}
    for c in range(num_classes):
        if num_gt[c] == 0:
            continue
        aps = {}
        f1_point = None
        for thr in BF_THRESHOLDS:
            entries = []
            for img_idx, (dets, gts) in enumerate(zip(dets_per_image, gts_per_image)):
                for d, di, is_tp in bf_match_image(dets, gts, thr):
                    if d.class_id == c:
                        entries.append((-d.confidence, img_idx, di, is_tp))
            entries.sort()
            flags = [e[3] for e in entries]
            precision, recall = bf_curves(flags, num_gt[c])
            aps[thr] = bf_average_precision(precision, recall)
            if thr == BF_THRESHOLDS[0]:
                f1_point = bf_f1_point(flags, num_gt[c])
        ap5095 = sum(aps[t] for t in BF_THRESHOLDS) / len(BF_THRESHOLDS)
        per_class[c] = {
            "num_gt": num_gt[c],
            "ap50": aps[BF_THRESHOLDS[0]],
            "ap": aps,
            "ap5095": ap5095,
            "precision": f1_point[0],
            "recall": f1_point[1],
        }

    classes = sorted(per_class)
    return {
        "per_class": per_class,
        "map50": sum(per_class[c]["ap50"] for c in classes) / len(classes),
        "map50_95": sum(per_class[c]["ap5095"] for c in classes) / len(classes),
        "precision": sum(per_class[c]["precision"] for c in classes) / len(classes),
        "recall": sum(per_class[c]["recall"] for c in classes) / len(classes),
    }


# -- complete-IoU ---------------------------------------------------------------


def reference_ciou(pred, gt) -> float:
    """Closed-form CIoU loss, evaluated directly in float64."""
    px1, py1, px2, py2 = (float(v) for v in pred)
    gx1, gy1, gx2, gy2 = (float(v) for v in gt)
    pw, ph = max(px2 - px1, 1e-12), max(py2 - py1, 1e-12)
    gw, gh = max(gx2 - gx1, 1e-12), max(gy2 - gy1, 1e-12)
    iw = max(min(px2, gx2) - max(px1, gx1), 0.0)
    ih = max(min(py2, gy2) - max(py1, gy1), 0.0)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    v_iou = inter / union
    cw = max(px2, gx2) - min(px1, gx1)
    ch = max(py2, gy2) - min(py1, gy1)
    c2 = cw * cw + ch * ch
    rho2 = ((px1 + px2) / 2.0 - (gx1 + gx2) / 2.0) ** 2 + ((py1 + py2) / 2.0 - (gy1 + gy2) / 2.0) ** 2
    v = (4.0 / math.pi ** 2) * (math.atan(pw / ph) - math.atan(gw / gh)) ** 2
    alpha = v / (1.0 - v_iou + v + 1e-9)
    return 1.0 - v_iou + rho2 / c2 + alpha * v
