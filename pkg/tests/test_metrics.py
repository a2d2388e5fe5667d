import itertools

import numpy as np
import pytest

from festa.metrics import (MAP_IOU_THRESHOLDS, accuracy, average_precision,
                           binary_auc, box_iou, dice_coefficient, macro_auc,
                           mean_average_precision)


def pair_counting_auc(scores, labels):
    """O(n^2) oracle: fraction of (positive, negative) pairs ranked
    correctly, ties at half credit."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestAuc:
    def test_perfect_ranking(self):
        assert binary_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_reversed_ranking(self):
        assert binary_auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 0.0

    def test_matches_pair_counting_oracle(self, rng):
        for trial in range(30):
            n = int(rng.integers(5, 51))
            labels = np.zeros(n, dtype=int)
            labels[:max(1, int(rng.integers(1, n)))] = 1
            rng.shuffle(labels)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            scores = np.round(rng.random(n), 2)  # coarse grid forces ties
            got = binary_auc(scores, labels)
            want = pair_counting_auc(scores, labels)
            assert got == pytest.approx(want, abs=1e-12)

    def test_invariant_under_monotone_transform(self, rng):
        scores = rng.random(40)
        labels = (rng.random(40) < 0.5).astype(int)
        labels[0], labels[1] = 0, 1
        base = binary_auc(scores, labels)
        assert binary_auc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
        assert binary_auc(3 * scores + 7, labels) == pytest.approx(base, abs=1e-12)

    def test_random_scores_near_half(self, rng):
        labels = np.array([0, 1] * 500)
        scores = rng.random(1000)
        assert abs(binary_auc(scores, labels) - 0.5) < 0.05

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            binary_auc([0.1, 0.2], [1, 1])

    def test_macro_average(self, rng):
        probs = rng.random((60, 3))
        labels = rng.integers(0, 3, 60)
        per_class = [binary_auc(probs[:, k], (labels == k).astype(int))
                     for k in range(3)]
        assert macro_auc(probs, labels) == pytest.approx(np.mean(per_class))


class TestDice:
    def test_identical_masks(self):
        m = np.array([1, 0, 1, 1])
        assert dice_coefficient(m, m) == 1.0

    def test_disjoint_masks(self):
        assert dice_coefficient([1, 1, 0, 0], [0, 0, 1, 1]) == 0.0

    def test_arithmetic_fixture(self):
        a = np.zeros(16)
        b = np.zeros(16)
        a[:4] = 1
        b[2:6] = 1  # |A|=4, |B|=4, overlap 2
        assert dice_coefficient(a, b) == 0.5

    def test_both_empty_is_perfect(self):
        assert dice_coefficient(np.zeros(8), np.zeros(8)) == 1.0

    def test_symmetric(self, rng):
        a = rng.random(16) < 0.4
        b = rng.random(16) < 0.4
        assert dice_coefficient(a, b) == dice_coefficient(b, a)


class TestIou:
    def test_identical(self):
        assert box_iou([0, 0, 2, 2], [0, 0, 2, 2]) == 1.0

    def test_disjoint(self):
        assert box_iou([0, 0, 1, 1], [2, 2, 1, 1]) == 0.0

    def test_half_overlap(self):
        assert box_iou([0, 0, 2, 1], [1, 0, 2, 1]) == pytest.approx(1 / 3)


def exhaustive_ap(detections, gt_boxes, thr):
    """Oracle AP: at every ranked prefix, count true positives by trying all
    detection-to-ground-truth assignments (maximal matching), then integrate
    the precision envelope step by step."""
    dets = sorted(detections, key=lambda d: -d[2])
    n_gt = sum(len(v) for v in gt_boxes.values())
    if n_gt == 0 or not dets:
        return 0.0

    def best_match_count(prefix):
        by_img = {}
        for img, box, _ in prefix:
            by_img.setdefault(img, []).append(box)
        total = 0
        for img, boxes in by_img.items():
            gts = gt_boxes.get(img, [])
            best = 0
            for assign in itertools.permutations(range(len(gts)),
                                                 min(len(boxes), len(gts))):
                hits = sum(1 for b, gi in zip(boxes, assign)
                           if box_iou(b, gts[gi]) >= thr)
                best = max(best, hits)
            total += best
        return total

    recalls, precisions = [], []
    for k in range(1, len(dets) + 1):
        tp = best_match_count(dets[:k])
        recalls.append(tp / n_gt)
        precisions.append(tp / k)
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    ap, prev = 0.0, 0.0
    for r, p in zip(recalls, precisions):
        ap += (r - prev) * p
        prev = r
    return ap


class TestMeanAveragePrecision:
    def test_exact_single_detection(self):
        gt = {0: [np.array([1.0, 1.0, 2.0, 2.0])]}
        dets = [(0, np.array([1.0, 1.0, 2.0, 2.0]), 0.37)]
        assert mean_average_precision(dets, gt) == 1.0

    def test_no_detections(self):
        gt = {0: [np.array([1.0, 1.0, 2.0, 2.0])]}
        assert mean_average_precision([], gt) == 0.0

    def test_thresholds_are_the_eight_step_grid(self):
        assert len(MAP_IOU_THRESHOLDS) == 8
        assert MAP_IOU_THRESHOLDS[0] == pytest.approx(0.40)
        assert MAP_IOU_THRESHOLDS[-1] == pytest.approx(0.75)

    def _fixture(self):
        # 3 images, 4 ground-truth boxes, 5 predictions with distinct,
        # unambiguous overlaps (each prediction overlaps at most one gt)
        gt = {
            0: [np.array([0.0, 0.0, 2.0, 2.0])],
            1: [np.array([1.0, 1.0, 2.0, 1.0]), np.array([3.0, 0.0, 1.0, 2.0])],
            2: [np.array([0.0, 2.0, 2.0, 2.0])],
        }
        dets = [
            (0, np.array([0.0, 0.0, 2.0, 2.0]), 0.95),   # exact hit
            (1, np.array([1.0, 1.2, 2.0, 1.0]), 0.80),   # iou 2/3 on first gt
            (1, np.array([0.0, 3.0, 1.0, 1.0]), 0.70),   # miss
            (2, np.array([0.1, 2.0, 2.0, 2.0]), 0.60),   # iou ~0.9
            (2, np.array([3.0, 0.0, 0.5, 0.5]), 0.50),   # miss
        ]
        return dets, gt

    def test_matches_exhaustive_oracle(self):
        dets, gt = self._fixture()
        for thr in MAP_IOU_THRESHOLDS:
            got = average_precision(dets, gt, thr)
            want = exhaustive_ap(dets, gt, thr)
            assert got == pytest.approx(want, abs=1e-12), f"thr={thr}"

    def test_monotone_in_threshold(self):
        dets, gt = self._fixture()
        aps = [average_precision(dets, gt, t) for t in MAP_IOU_THRESHOLDS]
        assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))


def test_accuracy():
    assert accuracy([1, 2, 0], [1, 2, 2]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        accuracy([], [])
