import math

import numpy as np
import pytest

from lungpipe import metrics


# Brute-force oracles: plain per-element loops, independent of the
# vectorized implementations they check.

def iou_oracle(a, b):
    inter = union = 0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        if x and y:
            inter += 1
        if x or y:
            union += 1
    return inter / union if union else 1.0


def dice_oracle(a, b):
    inter = total = 0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        if x and y:
            inter += 1
        total += bool(x) + bool(y)
    return 2 * inter / total if total else 1.0


def bce_oracle(p, y, eps=metrics.BCE_EPS):
    total = 0.0
    for pi, yi in zip(np.ravel(p), np.ravel(y)):
        pi = min(max(pi, eps), 1.0 - eps)
        total += -(yi * math.log(pi) + (1.0 - yi) * math.log(1.0 - pi))
    return total / np.size(p)


def accuracy_oracle(p, y):
    hits = 0
    for pi, yi in zip(np.ravel(p), np.ravel(y)):
        hits += (1.0 if pi >= 0.5 else 0.0) == yi
    return hits / np.size(p)


class TestIoU:
    def test_identical_masks(self):
        m = np.array([[1, 0], [1, 1]])
        assert metrics.iou(m, m) == 1.0

    def test_disjoint_masks(self):
        a = np.array([[1, 0], [0, 0]])
        b = np.array([[0, 0], [0, 1]])
        assert metrics.iou(a, b) == 0.0

    def test_offset_blocks_on_4x4_grid(self):
        a = np.zeros((4, 4), dtype=int)
        a[0:2, 0:2] = 1
        b = np.zeros((4, 4), dtype=int)
        b[1:3, 1:3] = 1
        assert metrics.iou(a, b) == pytest.approx(1.0 / 7.0)

    def test_both_empty(self):
        z = np.zeros((3, 3), dtype=int)
        assert metrics.iou(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match=r"\(2, 2\).*\(3, 3\)"):
            metrics.iou(np.zeros((2, 2)), np.zeros((3, 3)))


class TestDice:
    def test_identical_masks(self):
        m = np.array([[1, 1], [0, 1]])
        assert metrics.dice(m, m) == 1.0

    def test_offset_blocks_on_4x4_grid(self):
        a = np.zeros((4, 4), dtype=int)
        a[0:2, 0:2] = 1
        b = np.zeros((4, 4), dtype=int)
        b[1:3, 1:3] = 1
        assert metrics.dice(a, b) == pytest.approx(0.25)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metrics.dice(np.zeros((2, 3)), np.zeros((3, 2)))


class TestBce:
    def test_half_predictions_give_ln2(self):
        p = np.full(10, 0.5)
        y = np.array([0, 1] * 5, dtype=float)
        assert metrics.bce_loss(p, y) == pytest.approx(math.log(2.0))

    def test_point_nine_on_positive(self):
        assert metrics.bce_loss([0.9], [1.0]) == pytest.approx(-math.log(0.9))

    def test_perfect_prediction_is_near_zero(self):
        y = np.array([0.0, 1.0, 1.0, 0.0])
        loss = metrics.bce_loss(y, y)
        assert 0.0 <= loss <= -math.log(1.0 - metrics.BCE_EPS) + 1e-12

    def test_finite_at_saturated_predictions(self):
        loss = metrics.bce_loss([0.0, 1.0], [1.0, 0.0])
        assert np.isfinite(loss) and loss > 0

    def test_rejects_out_of_range_prediction(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            metrics.bce_loss([1.5], [1.0])

    def test_rejects_soft_target(self):
        with pytest.raises(ValueError, match="0 or 1"):
            metrics.bce_loss([0.5], [0.5])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        p = rng.uniform(0.05, 0.95, size=10)
        y = rng.integers(0, 2, size=10).astype(float)
        analytic = (p - y) / (p * (1.0 - p)) / p.size
        h = 1e-6
        for i in range(10):
            up, down = p.copy(), p.copy()
            up[i] += h
            down[i] -= h
            fd = (metrics.bce_loss(up, y) - metrics.bce_loss(down, y)) / (2 * h)
            assert abs(fd - analytic[i]) / abs(analytic[i]) <= 1e-4


class TestRoundedAccuracy:
    def test_hand_rounded_example(self):
        p = [0.7, 0.2, 0.51, 0.49]
        y = [1.0, 0.0, 1.0, 1.0]
        assert metrics.rounded_accuracy(p, y) == pytest.approx(0.75)

    def test_exact_predictions(self):
        y = np.array([0.0, 1.0, 1.0])
        assert metrics.rounded_accuracy(y, y) == 1.0

    def test_tie_rounds_up(self):
        assert metrics.rounded_accuracy([0.5], [1.0]) == 1.0
        assert metrics.rounded_accuracy([0.5], [0.0]) == 0.0

    def test_permutation_invariant(self):
        rng = np.random.default_rng(11)
        p = rng.uniform(0, 1, size=50)
        y = rng.integers(0, 2, size=50).astype(float)
        base = metrics.rounded_accuracy(p, y)
        for _ in range(20):
            perm = rng.permutation(50)
            assert metrics.rounded_accuracy(p[perm], y[perm]) == base


class TestRandomizedProperties:
    def test_against_oracles_on_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            shape = (int(rng.integers(1, 7)), int(rng.integers(1, 7)))
            a = rng.integers(0, 2, size=shape)
            b = rng.integers(0, 2, size=shape)
            assert metrics.iou(a, b) == pytest.approx(iou_oracle(a, b))
            assert metrics.dice(a, b) == pytest.approx(dice_oracle(a, b))
            p = rng.uniform(0, 1, size=shape)
            y = b.astype(float)
            assert metrics.bce_loss(p, y) == pytest.approx(bce_oracle(p, y))
            assert metrics.rounded_accuracy(p, y) == pytest.approx(accuracy_oracle(p, y))

    def test_iou_dice_identity_and_ordering(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            shape = (int(rng.integers(1, 9)), int(rng.integers(1, 9)))
            a = rng.integers(0, 2, size=shape)
            b = rng.integers(0, 2, size=shape)
            i = metrics.iou(a, b)
            d = metrics.dice(a, b)
            assert 0.0 <= i <= d <= 1.0
            assert abs(d - 2.0 * i / (1.0 + i)) <= 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            a = rng.integers(0, 2, size=(5, 5))
            b = rng.integers(0, 2, size=(5, 5))
            assert metrics.iou(a, b) == metrics.iou(b, a)
            assert metrics.dice(a, b) == metrics.dice(b, a)
