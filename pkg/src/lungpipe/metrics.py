"""Shared evaluation and loss functions for segmentation and classification.

All functions are pure and operate on numpy arrays. Predictions are real
values in [0, 1]; targets are hard {0, 1}. Shapes must match exactly.
"""

import numpy as np

BCE_EPS = 1e-7


def _check_shapes(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _check_score_pair(prediction, target):
    p, y = _check_shapes(prediction, target)
    p = p.astype(np.float64)
    y = y.astype(np.float64)
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValueError("predictions must lie in [0, 1]")
    if p.size and not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("targets must be exactly 0 or 1")
    return p, y


def iou(a, b):
    """Intersection over union (Jaccard index) of two binary masks.

    Both masks empty counts as perfect agreement (1.0).
    """
    a, b = _check_shapes(a, b)
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    inter = np.logical_and(a, b).sum()
    return float(inter) / float(union)


def dice(a, b):
    """Dice coefficient 2|A∩B| / (|A| + |B|); both-empty convention 1.0."""
    a, b = _check_shapes(a, b)
    a = a.astype(bool)
    b = b.astype(bool)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    inter = np.logical_and(a, b).sum()
    return 2.0 * float(inter) / float(denom)


def bce_loss(prediction, target, eps=BCE_EPS):
    """Mean binary cross-entropy with predictions clamped to [eps, 1-eps]."""
    p, y = _check_score_pair(prediction, target)
    p = np.clip(p, eps, 1.0 - eps)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def rounded_accuracy(prediction, target):
    """Fraction of entries where the rounded prediction equals the target.

    Ties round up: prediction >= 0.5 counts as 1.
    """
    p, y = _check_score_pair(prediction, target)
    rounded = (p >= 0.5).astype(np.float64)
    return float(np.mean(rounded == y))
