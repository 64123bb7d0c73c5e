"""Evaluation-protocol tests with independent reference implementations."""

import numpy as np
import pytest

from partmix.errors import InvalidAnnotationError, UndefinedMetricError
from partmix.evaluate import (
    GroundTruth,
    average_precision,
    evaluate_detections,
    iou,
    load_ground_truth,
    match_detections,
    pr_curve,
    save_ground_truth,
    sort_detection_records,
    write_pr_csv,
    zero_one_error,
)


def rasterized_iou(a, b, res=2000):
    """Pixel-counting oracle: sample point centers on a fine grid."""
    x0 = min(a[0], b[0])
    y0 = min(a[1], b[1])
    x1 = max(a[0] + a[2], b[0] + b[2])
    y1 = max(a[1] + a[3], b[1] + b[3])
    xs = x0 + (np.arange(res) + 0.5) * (x1 - x0) / res
    ys = y0 + (np.arange(res) + 0.5) * (y1 - y0) / res
    gx, gy = np.meshgrid(xs, ys)

    def inside(r):
        return (gx >= r[0]) & (gx < r[0] + r[2]) & (gy >= r[1]) & (gy < r[1] + r[3])

    in_a = inside(a)
    in_b = inside(b)
    inter = np.sum(in_a & in_b)
    union = np.sum(in_a | in_b)
    return inter / union


def reference_matcher(detections, gt_boxes, difficult, thresh):
    """Independent greedy matcher written box-by-box."""
    taken = set()
    labels = []
    for box, _ in detections:
        overlaps = [iou(box, g) for g in gt_boxes]
        best_j = -1
        best = 0.0
        for j, ov in enumerate(overlaps):
            if ov > best:
                best, best_j = ov, j
        if best_j < 0 or best < thresh:
            labels.append(0)
        elif difficult[best_j]:
            labels.append(-1)
        elif best_j in taken:
            labels.append(0)
        else:
            taken.add(best_j)
            labels.append(1)
    return np.asarray(labels, dtype=np.int8)


def staircase_ap(labels, n_pos):
    """Direct trapezoid-free integration of the enveloped staircase."""
    kept = [v for v in labels if v != -1]
    tp = fp = 0
    points = [(0.0, None)]
    for v in kept:
        tp += v
        fp += 1 - v
        points.append((tp / n_pos, tp / (tp + fp)))
    # monotone envelope: precision at recall r = max precision at recall >= r
    ap = 0.0
    for i in range(1, len(points)):
        r_prev = points[i - 1][0]
        r_cur = points[i][0]
        if r_cur == r_prev:
            continue
        env = max(p for r, p in points[i:] if p is not None)
        ap += (r_cur - r_prev) * env
    return ap


class TestIou:
    def test_identical_rects(self):
        assert iou((3, 4, 10, 12), (3, 4, 10, 12)) == 1.0

    def test_disjoint_rects(self):
        assert iou((0, 0, 5, 5), (10, 10, 5, 5)) == 0.0

    def test_half_offset_unit_squares(self):
        got = iou((0, 0, 1, 1), (0.5, 0, 1, 1))
        assert got == pytest.approx(1 / 3, abs=1e-12)
        assert got == pytest.approx(rasterized_iou((0, 0, 1, 1), (0.5, 0, 1, 1)), abs=2e-3)

    def test_random_rects_match_rasterized_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = (rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(1, 8), rng.uniform(1, 8))
            b = (rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(1, 8), rng.uniform(1, 8))
            assert iou(a, b) == pytest.approx(rasterized_iou(a, b), abs=3e-3)

    def test_zero_area_raises(self):
        with pytest.raises(InvalidAnnotationError):
            iou((0, 0, 0, 5), (0, 0, 5, 5))

    def test_symmetry(self):
        a, b = (1, 2, 4, 3), (2, 1, 5, 5)
        assert iou(a, b) == iou(b, a)


class TestMatchDetections:
    def test_single_exact_hit(self):
        gt = GroundTruth("im", [(10, 10, 20, 20)])
        labels = match_detections([((10, 10, 20, 20), 0.9)], gt)
        assert list(labels) == [1]

    def test_double_detection_penalized(self):
        gt = GroundTruth("im", [(10, 10, 20, 20)])
        dets = [((10, 10, 20, 20), 0.9), ((11, 11, 20, 20), 0.8)]
        assert list(match_detections(dets, gt)) == [1, 0]

    def test_difficult_neither_counts_nor_penalizes(self):
        gt = GroundTruth("im", [(10, 10, 20, 20)], difficult=[True])
        dets = [((10, 10, 20, 20), 0.9)]
        assert list(match_detections(dets, gt)) == [-1]
        assert gt.n_positive == 0

    def test_unsorted_input_raises(self):
        gt = GroundTruth("im", [(0, 0, 5, 5)])
        with pytest.raises(InvalidAnnotationError):
            match_detections([((0, 0, 5, 5), 0.1), ((0, 0, 5, 5), 0.9)], gt)

    def test_random_scenes_match_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            n_gt = rng.integers(1, 6)
            boxes = [
                (rng.uniform(0, 80), rng.uniform(0, 80), rng.uniform(8, 30), rng.uniform(8, 30))
                for _ in range(n_gt)
            ]
            difficult = [bool(rng.uniform() < 0.2) for _ in range(n_gt)]
            gt = GroundTruth("im", boxes, difficult)
            n_det = int(rng.integers(0, 10))
            dets = []
            for _ in range(n_det):
                if rng.uniform() < 0.6 and n_gt:
                    src = boxes[rng.integers(0, n_gt)]
                    jit = rng.uniform(-4, 4, size=2)
                    dets.append(((src[0] + jit[0], src[1] + jit[1], src[2], src[3]), rng.uniform()))
                else:
                    dets.append(
                        ((rng.uniform(0, 80), rng.uniform(0, 80), rng.uniform(8, 30),
                          rng.uniform(8, 30)), rng.uniform())
                    )
            dets.sort(key=lambda d: -d[1])
            got = match_detections(dets, gt)
            want = reference_matcher(dets, boxes, difficult, 0.5)
            np.testing.assert_array_equal(got, want)


class TestAveragePrecision:
    def test_all_tp_is_one(self):
        assert average_precision([1, 1, 1], n_pos=3) == pytest.approx(1.0, abs=1e-15)

    def test_tp_fp_tp_case(self):
        # precision 1 at recall 0.5, then 2/3 at recall 1.0
        ap = average_precision([1, 0, 1], n_pos=2)
        assert ap == pytest.approx(0.5 * 1.0 + 0.5 * (2 / 3), abs=1e-12)

    def test_matches_staircase_oracle_random(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(1, 30))
            labels = rng.choice([1, 0, -1], size=n, p=[0.4, 0.5, 0.1])
            n_pos = max(int(np.sum(labels == 1)) + int(rng.integers(0, 4)), 1)
            got = average_precision(labels, n_pos)
            want = staircase_ap(list(labels), n_pos)
            assert got == pytest.approx(want, abs=1e-12)
            assert 0.0 <= got <= 1.0

    def test_trailing_fp_never_increases(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            labels = list(rng.choice([1, 0], size=rng.integers(1, 15)))
            n_pos = max(int(np.sum(labels)), 1)
            base = average_precision(labels, n_pos)
            extended = average_precision(labels + [0, 0, 0], n_pos)
            assert extended <= base + 1e-15

    def test_ignored_labels_are_dropped(self):
        assert average_precision([1, -1, -1, 1], n_pos=2) == pytest.approx(1.0)

    def test_eleven_point_flag(self):
        # all recall points >= threshold see precision from the staircase max
        ap11 = average_precision([1, 1], n_pos=2, eleven_point=True)
        assert ap11 == pytest.approx(1.0, abs=1e-12)
        ap11b = average_precision([1, 0, 1], n_pos=2, eleven_point=True)
        want = (6 * 1.0 + 5 * (2 / 3)) / 11
        assert ap11b == pytest.approx(want, abs=1e-12)

    def test_zero_positives_raises(self):
        with pytest.raises(UndefinedMetricError):
            average_precision([0, 0], n_pos=0)

    def test_no_detections_gives_zero(self):
        assert average_precision([], n_pos=5) == 0.0


class TestZeroOneError:
    def test_identical(self):
        assert zero_one_error([1, 0, 1], [1, 0, 1]) == 0

    def test_complement(self):
        assert zero_one_error([1, 1, 0, 0], [0, 0, 1, 1]) == 4

    def test_length_mismatch_raises(self):
        with pytest.raises(InvalidAnnotationError):
            zero_one_error([1, 0], [1])

    def test_objective_need_not_track_error(self):
        # two models can order oppositely under a margin objective vs 0-1
        # error; the metric itself must just count mismatches
        labels = [1] * 5 + [0] * 5
        pred_a = [1, 1, 1, 1, 0, 0, 0, 0, 0, 1]
        pred_b = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0]
        assert zero_one_error(pred_a, labels) == 2
        assert zero_one_error(pred_b, labels) == 0


class TestAggregation:
    def test_monotone_score_transform_invariance(self):
        rng = np.random.default_rng(4)
        gts = {
            "a": GroundTruth("a", [(10, 10, 20, 20), (50, 50, 20, 20)]),
            "b": GroundTruth("b", [(0, 0, 15, 15)]),
        }
        records = []
        for img in ["a", "b"]:
            for _ in range(6):
                records.append(
                    (img,
                     (rng.uniform(0, 60), rng.uniform(0, 60), rng.uniform(10, 25),
                      rng.uniform(10, 25)),
                     rng.uniform())
                )
        ap1, _, _ = evaluate_detections(records, gts)
        transformed = [(i, b, 3.0 * s ** 3 + 1.0) for i, b, s in records]
        ap2, _, _ = evaluate_detections(transformed, gts)
        assert ap1 == pytest.approx(ap2, abs=1e-15)

    def test_permuting_equal_scores_changes_nothing(self):
        gts = {"a": GroundTruth("a", [(0, 0, 10, 10), (30, 30, 10, 10)])}
        records = [
            ("a", (0, 0, 10, 10), 0.5),
            ("a", (30, 30, 10, 10), 0.5),
            ("a", (60, 60, 10, 10), 0.5),
        ]
        ap0, lab0, _ = evaluate_detections(records, gts)
        ap1, lab1, _ = evaluate_detections(records[::-1], gts)
        assert ap0 == ap1
        np.testing.assert_array_equal(lab0, lab1)

    def test_unknown_image_counts_as_fp(self):
        gts = {"a": GroundTruth("a", [(0, 0, 10, 10)])}
        records = [("a", (0, 0, 10, 10), 0.9), ("zz", (0, 0, 10, 10), 0.8)]
        ap, labels, n_pos = evaluate_detections(records, gts)
        assert list(labels) == [1, 0]
        assert n_pos == 1

    def test_sort_is_content_based(self):
        records = [
            ("b", (1, 1, 2, 2), 0.7),
            ("a", (5, 5, 2, 2), 0.7),
            ("a", (1, 1, 2, 2), 0.9),
        ]
        ranked = sort_detection_records(records)
        assert [r[2] for r in ranked] == [0.9, 0.7, 0.7]
        assert ranked[1][0] == "a" and ranked[2][0] == "b"


class TestSerialization:
    def test_ground_truth_roundtrip(self, tmp_path):
        gts = [
            GroundTruth("img1", [(1, 2, 3, 4), (5, 6, 7, 8)], [False, True]),
            GroundTruth("img2", [(0.5, 0.25, 10, 12)]),
        ]
        path = tmp_path / "gt.json"
        save_ground_truth(gts, path)
        back = load_ground_truth(path)
        assert len(back) == 2
        assert back[0].image_id == "img1"
        assert back[0].boxes == [(1, 2, 3, 4), (5, 6, 7, 8)]
        assert back[0].difficult == [False, True]
        assert back[1].boxes == [(0.5, 0.25, 10, 12)]

    def test_pr_csv(self, tmp_path):
        path = tmp_path / "pr.csv"
        write_pr_csv([1, 0, 1], n_pos=2, path=path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "recall,precision"
        rows = [tuple(float(v) for v in ln.split(",")) for ln in lines[1:]]
        assert rows[0] == (0.5, 1.0)
        assert rows[2][0] == 1.0
        assert rows[2][1] == pytest.approx(2 / 3, abs=1e-15)

    def test_invalid_box_rejected(self):
        with pytest.raises(InvalidAnnotationError):
            GroundTruth("x", [(0, 0, -1, 5)])

    def test_pr_curve_needs_positives(self):
        with pytest.raises(UndefinedMetricError):
            pr_curve([1, 0], n_pos=0)
