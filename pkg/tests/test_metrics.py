"""Evaluator against spec examples and the independent brute-force oracle."""

import json

import numpy as np
import pytest

from msyolo.errors import ParseError, UsageError
from msyolo.metrics import (IOU_THRESHOLDS, MatchRecord, average_precision,
                            evaluate_detections, iou, load_predictions_jsonl,
                            map_all, match, precision_recall)
from msyolo.model import Detection

from oracles import brute_force_report


def det(box, cls=0, conf=0.9):
    return Detection(box=box, class_id=cls, confidence=conf)


class TestIoU:
    def test_identical(self):
        assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0

    def test_partial_overlap_arithmetic(self):
        # intersection 1, union 4 + 4 - 1 = 7
        assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1.0 / 7.0, abs=1e-12)

    def test_zero_area_box(self):
        assert iou((1, 1, 1, 3), (0, 0, 2, 2)) == 0.0


class TestMatch:
    def test_exact_hit_is_tp(self):
        records = match([det((0, 0, 10, 10))], [(0, (0, 0, 10, 10))], 0.5)
        assert records[0].is_true_positive and records[0].matched_gt == 0

    def test_single_match_rule(self):
        dets = [det((0, 0, 10, 10), conf=0.9), det((0, 0, 10, 10), conf=0.8)]
        records = match(dets, [(0, (0, 0, 10, 10))], 0.5)
        by_index = {r.det_index: r.is_true_positive for r in records}
        assert by_index[0] is True and by_index[1] is False

    def test_iou_equal_to_threshold_is_fp(self):
        # boxes overlap with IoU exactly 0.5: [0,0,2,1] vs [1,0,3,1] -> 1/3... use
        # [0,0,2,2] vs [0,1,2,3]: inter 2, union 8-2=6 -> 1/3; craft exact 0.5:
        # [0,0,1,2] vs [0,1,1,3]: inter 1, union 4-1=3 -> 1/3. Use containment:
        # [0,0,2,2] vs [0,0,2,1]: inter 2, union 4 -> 0.5 exactly.
        records = match([det((0, 0, 2, 2))], [(0, (0, 0, 2, 1))], 0.5)
        assert records[0].is_true_positive is False  # strict "exceeds"

    def test_class_mismatch_never_matches(self):
        records = match([det((0, 0, 10, 10), cls=1)], [(0, (0, 0, 10, 10))], 0.5)
        assert records[0].is_true_positive is False

    def test_confidence_tie_broken_by_index(self):
        dets = [det((0, 0, 10, 10), conf=0.5), det((0, 0, 10, 10), conf=0.5)]
        records = match(dets, [(0, (0, 0, 10, 10))], 0.3)
        first = next(r for r in records if r.det_index == 0)
        assert first.is_true_positive

    def test_iou_tie_prefers_lower_gt_index(self):
        gts = [(0, (0, 0, 10, 10)), (0, (0, 0, 10, 10))]
        records = match([det((0, 0, 10, 10))], gts, 0.5)
        assert records[0].matched_gt == 0


class TestPrecisionRecall:
    def test_cumulative_example(self):
        records = [MatchRecord(i, 0, 0.9 - 0.1 * i, tp) for i, tp in enumerate([True, False, True])]
        p, r, _ = precision_recall(records, num_gt=3)
        np.testing.assert_allclose(p, [1.0, 0.5, 2.0 / 3.0])
        np.testing.assert_allclose(r, [1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0])

    def test_all_tp_constant_precision(self):
        records = [MatchRecord(i, 0, 0.9, True) for i in range(4)]
        p, _, _ = precision_recall(records, num_gt=4)
        assert np.all(p == 1.0)

    def test_no_detections(self):
        p, r, _ = precision_recall([], num_gt=3)
        assert len(p) == 0 and len(r) == 0
        assert average_precision(p, r) == 0.0


class TestAveragePrecision:
    def test_perfect_detector(self):
        records = [MatchRecord(i, 0, 0.9, True) for i in range(5)]
        p, r, env = precision_recall(records, num_gt=5)
        assert average_precision(p, r, env) == 1.0

    def test_matches_brute_force_on_example(self):
        flags = [True, False, True]
        records = [MatchRecord(i, 0, 0.9 - 0.1 * i, tp) for i, tp in enumerate(flags)]
        p, r, env = precision_recall(records, num_gt=3)
        got = average_precision(p, r, env)
        # independent direct 101-point evaluation
        expect = 0.0
        for i in range(101):
            t = i / 100.0
            best = 0.0
            for pp, rr in zip(p, r):
                if rr >= t and pp > best:
                    best = float(pp)
            expect += best
        expect /= 101.0
        assert got == expect

    def test_fp_to_tp_never_decreases_ap(self, rng):
        for _ in range(30):
            n = int(rng.integers(2, 10))
            flags = [bool(rng.random() < 0.5) for _ in range(n)]
            num_gt = sum(flags) + int(rng.integers(1, 4))
            records = [MatchRecord(i, 0, 1.0 - 0.01 * i, f) for i, f in enumerate(flags)]
            p, r, env = precision_recall(records, num_gt)
            base = average_precision(p, r, env)
            fps = [i for i, f in enumerate(flags) if not f]
            if not fps:
                continue
            flip = flags.copy()
            flip[fps[int(rng.integers(0, len(fps)))]] = True
            records2 = [MatchRecord(i, 0, 1.0 - 0.01 * i, f) for i, f in enumerate(flip)]
            p2, r2, env2 = precision_recall(records2, num_gt)
            assert average_precision(p2, r2, env2) >= base


class TestMapAll:
    def test_single_class_uniform(self):
        aps = {0: {t: 0.7 for t in IOU_THRESHOLDS}}
        assert map_all(aps) == (0.7, pytest.approx(0.7))

    def test_two_classes_mean(self):
        aps = {0: {t: 1.0 for t in IOU_THRESHOLDS}, 1: {t: 0.0 for t in IOU_THRESHOLDS}}
        assert map_all(aps)[0] == 0.5

    def test_no_evaluable_classes_is_error(self):
        with pytest.raises(UsageError):
            map_all({})


def random_micro_dataset(rng):
    """<= 5 images, <= 10 detections, lattice coordinates to force ties."""
    num_classes = int(rng.integers(1, 4))
    n_images = int(rng.integers(1, 6))
    gts, dets = [], []
    total_dets = 0
    for _ in range(n_images):
        img_gts = []
        for _ in range(int(rng.integers(0, 4))):
            x1 = float(rng.integers(0, 8)) * 4.0
            y1 = float(rng.integers(0, 8)) * 4.0
            w = float(rng.integers(1, 6)) * 4.0
            h = float(rng.integers(1, 6)) * 4.0
            img_gts.append((int(rng.integers(0, num_classes)), (x1, y1, x1 + w, y1 + h)))
        gts.append(img_gts)
        img_dets = []
        for _ in range(int(rng.integers(0, 4))):
            if total_dets >= 10:
                break
            if img_gts and rng.random() < 0.6:
                # perturb a GT so near-threshold IoUs appear
                gcls, (x1, y1, x2, y2) = img_gts[int(rng.integers(0, len(img_gts)))]
                dx = float(rng.integers(-1, 2)) * 4.0
                box = (x1 + dx, y1, x2 + dx, y2)
                cls = gcls if rng.random() < 0.8 else int(rng.integers(0, num_classes))
            else:
                x1 = float(rng.integers(0, 8)) * 4.0
                y1 = float(rng.integers(0, 8)) * 4.0
                box = (x1, y1, x1 + float(rng.integers(1, 6)) * 4.0,
                       y1 + float(rng.integers(1, 6)) * 4.0)
                cls = int(rng.integers(0, num_classes))
            img_dets.append(Detection(box=box, class_id=cls,
                                      confidence=float(rng.integers(1, 11)) / 10.0))
            total_dets += 1
        dets.append(img_dets)
    if not any(gts):
        gts[0] = [(0, (0.0, 0.0, 8.0, 8.0))]
    return dets, gts, num_classes


class TestOracleEquivalence:
    def test_micro_datasets_match_brute_force_exactly(self):
        rng = np.random.default_rng(77)
        for trial in range(40):
            dets, gts, m = random_micro_dataset(rng)
            names = [f"c{i}" for i in range(m)]
            report = evaluate_detections(dets, gts, names)
            ref = brute_force_report(dets, gts, m)
            assert report.map50 == ref["map50"], trial
            assert report.map50_95 == ref["map50_95"], trial
            assert report.precision == ref["precision"], trial
            assert report.recall == ref["recall"], trial
            for c, row in enumerate(report.classes):
                if c in ref["per_class"]:
                    assert row.ap50 == ref["per_class"][c]["ap50"]
                    assert row.ap50_95 == ref["per_class"][c]["ap5095"]
                else:
                    assert row.ap50 is None


class TestEvalReport:
    def test_table_columns_and_undefined_class(self):
        dets = [[det((0, 0, 10, 10), cls=0, conf=0.9), det((20, 20, 30, 30), cls=1, conf=0.8)]]
        gts = [[(0, (0, 0, 10, 10))]]  # class 1 has detections but no GT
        report = evaluate_detections(dets, gts, ["a", "b"])
        text = report.to_text()
        for col in ("Class", "Pictures", "Instances", "Precision", "Recall", "mAP50", "mAP50-95"):
            assert col in text
        assert report.undefined_classes == [1]
        assert report.classes[1].ap50 is None
        assert "-" in text.splitlines()[3]  # the undefined class renders dashes

    def test_json_round_trip(self):
        dets = [[det((0, 0, 10, 10))]]
        gts = [[(0, (0, 0, 10, 10))]]
        report = evaluate_detections(dets, gts, ["a"])
        blob = json.dumps(report.to_dict())
        assert json.loads(blob)["all"]["map50"] == 1.0


class TestPredictionsJsonl:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "preds.jsonl"
        path.write_text(
            '{"image_index": 0, "class_id": 1, "box": [1, 2, 3, 4], "confidence": 0.5}\n'
            '{"image_index": 1, "class_id": 0, "box": [0, 0, 5, 5], "confidence": 0.25}\n')
        out = load_predictions_jsonl(str(path), 2)
        assert out[0][0].class_id == 1 and out[1][0].box == (0.0, 0.0, 5.0, 5.0)

    def test_bad_record_is_parse_error(self, tmp_path):
        path = tmp_path / "preds.jsonl"
        path.write_text('{"image_index": 0}\n')
        with pytest.raises(ParseError, match="preds.jsonl:1"):
            load_predictions_jsonl(str(path), 1)

    def test_out_of_range_index(self, tmp_path):
        path = tmp_path / "preds.jsonl"
        path.write_text('{"image_index": 5, "class_id": 0, "box": [0,0,1,1], "confidence": 0.5}\n')
        with pytest.raises(ParseError, match="out of range"):
            load_predictions_jsonl(str(path), 2)
