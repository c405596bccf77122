"""Binary mask algebra and geometry.

Masks are 2-D uint8 arrays over {0, 1}. Connected components use
8-connectivity; "distance from center" is the Euclidean distance from a
component's centroid to ((h-1)/2, (w-1)/2).
"""

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class Component:
    """One 8-connected foreground region of a mask."""

    pixels: list  # list of (row, col)
    centroid: tuple  # (row, col), arithmetic mean of pixel coordinates
    center_distance: float

    @property
    def size(self):
        return len(self.pixels)


def _check_mask(mask):
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    if m.size and not np.all((m == 0) | (m == 1)):
        raise ValueError("mask values must be exactly 0 or 1")
    return m.astype(np.uint8)


def combine(left, right):
    """Pixel-wise OR of two masks (left/right lung fusion)."""
    left = _check_mask(left)
    right = _check_mask(right)
    if left.shape != right.shape:
        raise ValueError(f"shape mismatch: {left.shape} vs {right.shape}")
    return np.logical_or(left, right).astype(np.uint8)


def binarize(probabilities, threshold=0.5):
    """Threshold a probability grid into a mask: 1 where prob >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    probs = np.asarray(probabilities, dtype=np.float64)
    return (probs >= threshold).astype(np.uint8)


def overlay(image, mask):
    """Keep only the masked pixels of an image (pixel-wise product).

    Accepts (H, W) or channel-first (C, H, W) images; channel count is
    preserved.
    """
    img = np.asarray(image, dtype=np.float32)
    m = _check_mask(mask)
    spatial = img.shape if img.ndim == 2 else img.shape[1:]
    if spatial != m.shape:
        raise ValueError(f"shape mismatch: image {spatial} vs mask {m.shape}")
    if img.ndim == 2:
        return img * m
    return img * m[None, :, :]


def connected_components(mask):
    """Decompose a mask into its 8-connected components.

    Returns a list of Component sorted by label order (top-left first).
    """
    m = _check_mask(mask)
    labels, count = ndimage.label(m, structure=EIGHT_CONNECTED)
    h, w = m.shape
    center = ((h - 1) / 2.0, (w - 1) / 2.0)
    comps = []
    for lab in range(1, count + 1):
        rows, cols = np.nonzero(labels == lab)
        centroid = (float(rows.mean()), float(cols.mean()))
        dist = float(np.hypot(centroid[0] - center[0], centroid[1] - center[1]))
        comps.append(Component(list(zip(rows.tolist(), cols.tolist())), centroid, dist))
    return comps


def retain_two_regions(mask):
    """Keep only the two components whose centroids are nearest the center.

    Masks with at most two components come back unchanged. Ties on
    distance prefer the larger component, then earlier label order.
    """
    m = _check_mask(mask)
    comps = connected_components(m)
    if len(comps) <= 2:
        return m.copy()
    order = sorted(range(len(comps)),
                   key=lambda i: (comps[i].center_distance, -comps[i].size, i))
    out = np.zeros_like(m)
    for i in order[:2]:
        for r, c in comps[i].pixels:
            out[r, c] = 1
    return out


def mirror_fill(mask):
    """Reconstruct a missing lung by reflecting a lone region.

    If the mask has exactly one component, returns the union of the mask
    and its reflection across the vertical centerline; otherwise the mask
    is returned unchanged.
    """
    m = _check_mask(mask)
    comps = connected_components(m)
    if len(comps) != 1:
        return m.copy()
    return np.logical_or(m, m[:, ::-1]).astype(np.uint8)


def save_mask(mask, path):
    """Write a mask as a single-channel 8-bit PNG (0 background, 255 lung)."""
    m = _check_mask(mask)
    Image.fromarray(m * 255, mode="L").save(path)


def load_mask(path):
    """Read a mask image; any nonzero pixel counts as foreground."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 0).astype(np.uint8)
