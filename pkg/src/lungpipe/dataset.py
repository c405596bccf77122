"""Dataset ingestion and preprocessing.

Covers manifest CSV parsing, the uncertain/missing -> 0 label policy,
frontal-view filtering, seeded 70/20/10 splits, image loading and
transforms, and the synthetic desk-scale data generators used for tests
and the CLI's --synthetic mode.
"""

import csv
import io
import os
from dataclasses import dataclass, field

import cv2
import numpy as np
from PIL import Image

from . import mask_ops

# The 14 observation columns, in manifest order.
OBSERVATIONS = [
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
]

NUM_LABELS = len(OBSERVATIONS)

METADATA_COLUMNS = ["Path", "Sex", "Age", "Frontal/Lateral", "AP/PA"]

# Raw label alphabet: 1 positive, 0 negative, -1 uncertain, None missing.
POSITIVE = 1
NEGATIVE = 0
UNCERTAIN = -1
MISSING = None

_CELL_TO_LABEL = {"1.0": POSITIVE, "0.0": NEGATIVE, "-1.0": UNCERTAIN, "": MISSING}
_LABEL_TO_CELL = {POSITIVE: "1.0", NEGATIVE: "0.0", UNCERTAIN: "-1.0", MISSING: ""}


@dataclass
class ManifestRecord:
    path: str
    sex: str
    age: str
    view: str  # "Frontal" or "Lateral"
    ap_pa: str
    raw_labels: tuple  # 14 entries over {1, 0, -1, None}


@dataclass
class DatasetManifest:
    header: list = field(default_factory=lambda: list(OBSERVATIONS))
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)


@dataclass
class SplitAssignment:
    train: list
    val: list
    test: list
    seed: int


def parse_manifest(csv_text):
    """Parse a CheXpert-style manifest CSV into a DatasetManifest.

    Expected header: Path,Sex,Age,Frontal/Lateral,AP/PA followed by the
    14 observation names. Label cells are "1.0", "0.0", "-1.0" or empty.
    """
    reader = csv.reader(io.StringIO(csv_text))
    rows = list(reader)
    if not rows:
        raise ValueError("manifest has no header row")
    header = rows[0]
    n_meta = len(METADATA_COLUMNS)
    if len(header) != n_meta + NUM_LABELS:
        raise ValueError(
            f"header has {len(header)} columns, expected {n_meta + NUM_LABELS}")
    observations = header[n_meta:]
    manifest = DatasetManifest(header=observations, records=[])
    for row_num, row in enumerate(rows[1:], start=2):
        if len(row) != n_meta + NUM_LABELS:
            raise ValueError(
                f"row {row_num}: expected {n_meta + NUM_LABELS} columns, got {len(row)}")
        labels = []
        for cell in row[n_meta:]:
            if cell not in _CELL_TO_LABEL:
                raise ValueError(f"row {row_num}: unknown label token {cell!r}")
            labels.append(_CELL_TO_LABEL[cell])
        manifest.records.append(ManifestRecord(
            path=row[0], sex=row[1], age=row[2], view=row[3], ap_pa=row[4],
            raw_labels=tuple(labels)))
    return manifest


def serialize_manifest(manifest):
    """Inverse of parse_manifest."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(METADATA_COLUMNS + list(manifest.header))
    for rec in manifest.records:
        cells = [_LABEL_TO_CELL[lab] for lab in rec.raw_labels]
        writer.writerow([rec.path, rec.sex, rec.age, rec.view, rec.ap_pa] + cells)
    return out.getvalue()


def clean_labels(raw):
    """Apply the label-cleaning policy: positive -> 1, everything else -> 0."""
    if len(raw) != NUM_LABELS:
        raise ValueError(f"expected {NUM_LABELS} label slots, got {len(raw)}")
    return np.array([1.0 if lab == POSITIVE else 0.0 for lab in raw],
                    dtype=np.float32)


def filter_frontal(manifest):
    """Keep only frontal-view records, preserving order."""
    kept = [r for r in manifest.records if r.view == "Frontal"]
    return DatasetManifest(header=list(manifest.header), records=kept)


def split(n, seed):
    """Seeded 70/20/10 split of indices 0..n-1.

    Sizes are (floor(0.7n), floor(0.2n), remainder), assigned in
    train/val/test order over a uniform shuffle.
    """
    if n < 0:
        raise ValueError("record count must be non-negative")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(0.7 * n))
    n_val = int(np.floor(0.2 * n))
    return SplitAssignment(
        train=perm[:n_train].tolist(),
        val=perm[n_train:n_train + n_val].tolist(),
        test=perm[n_train + n_val:].tolist(),
        seed=seed,
    )


def save_split(assignment, path):
    with open(path, "w") as f:
        f.write(f"# seed={assignment.seed}\n")
        f.write("index,partition\n")
        for name in ("train", "val", "test"):
            for idx in getattr(assignment, name):
                f.write(f"{idx},{name}\n")


def load_split(path):
    parts = {"train": [], "val": [], "test": []}
    seed = 0
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line.startswith("# seed="):
                seed = int(line.split("=", 1)[1])
                continue
            if not line or line == "index,partition":
                continue
            idx, name = line.split(",")
            parts[name].append(int(idx))
    return SplitAssignment(seed=seed, **parts)


def load_image(path):
    """Load a PNG/JPEG as a channel-first float32 array in [0, 1].

    Grayscale inputs are replicated to 3 channels. 16-bit containers are
    treated as 12-bit density data and scaled by 1/4095.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im)
    except Exception as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    elif arr.dtype in (np.uint16, np.int32):
        arr = np.clip(arr.astype(np.float32) / 4095.0, 0.0, 1.0)
    else:
        arr = arr.astype(np.float32)
    if arr.ndim == 2:
        arr = np.stack([arr, arr, arr], axis=0)
    else:
        arr = arr[:, :, :3].transpose(2, 0, 1)
    return arr


def resize(image, size=(256, 256), nearest=False):
    """Resize to (h, w): bilinear for images, nearest-neighbor for masks."""
    h, w = size
    if h < 1 or w < 1:
        raise ValueError(f"target size must be positive, got {size}")
    arr = np.asarray(image)
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    if arr.ndim == 2:
        out = cv2.resize(arr.astype(np.float32), (w, h), interpolation=interp)
        if nearest:
            out = out.astype(arr.dtype)
        return out
    chans = [cv2.resize(c.astype(np.float32), (w, h), interpolation=interp)
             for c in arr]
    return np.stack(chans, axis=0)


def random_hflip(image, label, p, rng):
    """With probability p, reflect the image across its vertical centerline.

    Labels are view-invariant and never altered.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"flip probability must lie in [0, 1], got {p}")
    if rng.random() < p:
        image = np.ascontiguousarray(image[..., ::-1])
    return image, label


def equalize_histogram(image):
    """CDF-based histogram equalization over 256 bins, output in [0, 1].

    The mapping is monotone non-decreasing; a constant image maps to 0.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected single-channel image, got shape {arr.shape}")
    levels = np.clip(np.round(arr * 255.0), 0, 255).astype(np.int64)
    hist = np.bincount(levels.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    nonzero = cdf[hist > 0]
    cdf_min = nonzero[0] if nonzero.size else 0
    total = levels.size
    if total == cdf_min:
        return np.zeros_like(arr, dtype=np.float32)
    lut = np.round((cdf - cdf_min) / (total - cdf_min) * 255.0)
    lut = np.clip(lut, 0, 255)
    return (lut[levels] / 255.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Synthetic desk-scale data
# ---------------------------------------------------------------------------

def _ellipse_mask(shape, center, semi_axes):
    h, w = shape
    rr, cc = np.ogrid[:h, :w]
    a, b = semi_axes
    return (((rr - center[0]) / a) ** 2 + ((cc - center[1]) / b) ** 2) <= 1.0


def _draw_lungs(rng, size):
    """Two bright ellipses flanking the vertical centerline.

    Returns (image, mask, lung_params) where lung_params is a list of
    (center, semi_axes) for the left and right ellipses.
    """
    h, w = size
    image = rng.uniform(0.0, 0.22, size=(h, w)).astype(np.float32)
    mask = np.zeros((h, w), dtype=np.uint8)
    params = []
    for cx_frac in (0.28, 0.72):
        cy = h * (0.5 + rng.uniform(-0.05, 0.05))
        cx = w * (cx_frac + rng.uniform(-0.03, 0.03))
        a = h * rng.uniform(0.20, 0.30)
        b = w * rng.uniform(0.13, 0.16)
        ell = _ellipse_mask((h, w), (cy, cx), (a, b))
        image[ell] = 0.35 + rng.uniform(-0.03, 0.03)
        mask[ell] = 1
        params.append(((cy, cx), (a, b)))
    return image, mask, params


def generate_synthetic_pair(seed, size=(64, 64), distractors=False):
    """A noisy two-lung phantom and its exact ground-truth mask.

    With distractors on, 1-3 bright blobs are added far from the image
    center (in both image and mask) to exercise retain_two_regions.
    """
    h, w = size
    if h < 32 or w < 32:
        raise ValueError(f"size must be at least 32x32, got {size}")
    rng = np.random.default_rng(seed)
    image, mask, _ = _draw_lungs(rng, size)
    if distractors:
        for _ in range(int(rng.integers(1, 4))):
            corner_r = rng.choice([h * 0.08, h * 0.92])
            corner_c = rng.choice([w * 0.08, w * 0.92])
            cy = corner_r + rng.uniform(-h * 0.04, h * 0.04)
            cx = corner_c + rng.uniform(-w * 0.04, w * 0.04)
            r = rng.uniform(1.5, 3.5)
            blob = _ellipse_mask((h, w), (cy, cx), (r, r))
            image[blob] = 0.5 + rng.uniform(0.0, 0.2)
            mask[blob] = 1
    return image, mask


# Marker stamps for the multilabel generator: one distinctive shape per
# label slot, all drawn at full intensity so the classes differ by shape.
def _stamp_shapes():
    shapes = []

    def disk(r):
        d = 2 * r + 1
        yy, xx = np.ogrid[:d, :d]
        return ((yy - r) ** 2 + (xx - r) ** 2 <= r * r).astype(np.float32)

    def square(s):
        return np.ones((s, s), dtype=np.float32)

    def hollow_square(s, t):
        m = np.ones((s, s), dtype=np.float32)
        m[t:-t, t:-t] = 0
        return m

    def plus(s, t):
        m = np.zeros((s, s), dtype=np.float32)
        mid = s // 2
        m[mid - t // 2: mid + t // 2 + 1, :] = 1
        m[:, mid - t // 2: mid + t // 2 + 1] = 1
        return m

    def diag_cross(s):
        m = np.zeros((s, s), dtype=np.float32)
        for i in range(s):
            for d in (-1, 0, 1):
                j = i + d
                if 0 <= j < s:
                    m[i, j] = 1
                    m[i, s - 1 - j] = 1
        return m

    def hbar(s, t):
        m = np.zeros((s, s), dtype=np.float32)
        mid = s // 2
        m[mid - t // 2: mid + t // 2 + 1, :] = 1
        return m

    def ring(r, t):
        d = 2 * r + 1
        yy, xx = np.ogrid[:d, :d]
        dist2 = (yy - r) ** 2 + (xx - r) ** 2
        return ((dist2 <= r * r) & (dist2 >= (r - t) ** 2)).astype(np.float32)

    def checker(s, cell):
        yy, xx = np.indices((s, s))
        return (((yy // cell) + (xx // cell)) % 2).astype(np.float32)

    def stripes(s, period):
        yy = np.indices((s, s))[0]
        return ((yy % period) < period // 2).astype(np.float32)

    def triangle(s):
        m = np.zeros((s, s), dtype=np.float32)
        for i in range(s):
            half = int(round(i * (s - 1) / (2 * (s - 1))))
            mid = s // 2
            m[i, mid - half: mid + half + 1] = 1
        return m

    shapes.append(disk(2))
    shapes.append(disk(4))
    shapes.append(square(5))
    shapes.append(square(9))
    shapes.append(hollow_square(9, 2))
    shapes.append(plus(9, 3))
    shapes.append(diag_cross(9))
    shapes.append(hbar(9, 3))
    shapes.append(hbar(9, 3).T)
    shapes.append(ring(4, 2))
    shapes.append(checker(8, 2))
    shapes.append(stripes(9, 4))
    shapes.append(stripes(9, 4).T)
    shapes.append(triangle(9))
    return shapes


_MARKER_SHAPES = _stamp_shapes()

# One saturated RGB color per label slot so markers differ in hue as well
# as shape; hue separation keeps the slots linearly separable.
_MARKER_COLORS = [
    (1.0, 0.1, 0.1),
    (0.1, 1.0, 0.1),
    (0.1, 0.1, 1.0),
    (1.0, 1.0, 0.1),
    (1.0, 0.1, 1.0),
    (0.1, 1.0, 1.0),
    (1.0, 1.0, 1.0),
    (1.0, 0.55, 0.1),
    (0.55, 1.0, 0.1),
    (0.1, 1.0, 0.55),
    (0.1, 0.55, 1.0),
    (0.55, 0.1, 1.0),
    (1.0, 0.1, 0.55),
    (0.55, 0.55, 0.55),
]


def _paste(image, stamp, center, value=1.0, allowed=None):
    """Stamp a shape onto image; allowed restricts which pixels may change."""
    h, w = image.shape
    sh, sw = stamp.shape
    r0 = int(round(center[0])) - sh // 2
    c0 = int(round(center[1])) - sw // 2
    rs, cs = max(r0, 0), max(c0, 0)
    re, ce = min(r0 + sh, h), min(c0 + sw, w)
    if re <= rs or ce <= cs:
        return
    sub = stamp[rs - r0:re - r0, cs - c0:ce - c0]
    writable = sub > 0
    if allowed is not None:
        writable = writable & (allowed[rs:re, cs:ce] > 0)
    region = image[rs:re, cs:ce]
    image[rs:re, cs:ce] = np.where(writable, value * sub, region)


def generate_synthetic_labeled(seed, size=(64, 64), clutter=False):
    """A labeled two-lung phantom for multilabel classification.

    Label slot j is 1 iff marker shape j was stamped inside a lung; with
    clutter on, confounding marker shapes are also stamped outside the
    lungs. Returns (image [3,h,w], labels [14], lung_mask [h,w]).
    """
    h, w = size
    if h < 64 or w < 64:
        raise ValueError(f"size must be at least 64x64, got {size}")
    rng = np.random.default_rng(seed)
    image, mask, params = _draw_lungs(rng, size)
    img3 = np.stack([image.copy(), image.copy(), image.copy()], axis=0)
    labels = rng.integers(0, 2, size=NUM_LABELS).astype(np.float32)
    for j in range(NUM_LABELS):
        if labels[j] != 1:
            continue
        lung = params[j % 2]
        (cy, cx), (a, b) = lung
        slot = j // 2  # 7 slots along each lung's vertical axis
        offset = (slot - 3) / 3.8  # fraction of the semi-major axis
        for c in range(3):
            _paste(img3[c], _MARKER_SHAPES[j], (cy + offset * a, cx),
                   value=_MARKER_COLORS[j][c], allowed=mask)
    if clutter:
        outside = 1 - mask
        for _ in range(int(rng.integers(1, 4))):
            j = int(rng.integers(0, NUM_LABELS))
            edge_r = rng.choice([3.0, h - 4.0])
            cc = rng.uniform(w * 0.44, w * 0.56)
            center = (edge_r + rng.uniform(-1, 1), cc)
            for c in range(3):
                _paste(img3[c], _MARKER_SHAPES[j], center,
                       value=_MARKER_COLORS[j][c], allowed=outside)
    return img3, labels, mask


def write_synthetic_dataset(root, n, seed, size=(64, 64), clutter=False):
    """Materialize a synthetic labeled dataset on disk.

    Writes n PNG images under root/images/ plus a manifest.csv in the
    standard layout; every record is frontal. Returns the manifest path.
    """
    img_dir = os.path.join(root, "images")
    os.makedirs(img_dir, exist_ok=True)
    manifest = DatasetManifest(records=[])
    for i in range(n):
        img3, labels, _ = generate_synthetic_labeled(seed + i, size=size,
                                                     clutter=clutter)
        rel = os.path.join("images", f"{i:05d}.png")
        rgb = np.clip(np.round(img3.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(os.path.join(root, rel))
        raw = tuple(POSITIVE if v == 1 else NEGATIVE for v in labels)
        manifest.records.append(ManifestRecord(
            path=rel, sex="Unknown", age="0", view="Frontal", ap_pa="AP",
            raw_labels=raw))
    manifest_path = os.path.join(root, "manifest.csv")
    with open(manifest_path, "w") as f:
        f.write(serialize_manifest(manifest))
    return manifest_path
