"""Experiment orchestration: the two pipelines and the comparison report.

Stages are independent commands joined only by files on disk, so the
segmentation pipeline, each classification arm, and the report step can
run as separate processes:

    localize-train   train the lung localizer, write checkpoint + history
    overlay          predict masks, post-process, write overlay images
    classify-train   train one classification arm (original | overlay)
    evaluate         test-set metrics for one arm
    compare-report   join arm histories into a table and curve plots
"""

import argparse
import hashlib
import io
import os
import sys
from dataclasses import dataclass, field

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from . import classifier, dataset, localizer, mask_ops
from .artifacts import history_to_csv, read_history_csv

ARMS = ("original", "overlay")


@dataclass
class ExperimentConfig:
    manifest: str = "manifest.csv"
    image_root: str = "."
    mask_dir: str = "masks"
    overlay_dir: str = "overlays"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"
    seed: int = 0
    threshold: float = 0.5
    retain_two: bool = True
    mirror_fill: bool = True
    synthetic: bool = False
    synthetic_n_images: int = 240
    synthetic_n_pairs: int = 200
    synthetic_clutter: bool = True
    loc: localizer.SegModelConfig = field(
        default_factory=lambda: localizer.SegModelConfig(input_size=(64, 64)))
    cls: classifier.ClsModelConfig = field(
        default_factory=classifier.ClsModelConfig)


def _parse_value(raw):
    raw = raw.strip()
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def _parse_pair(raw):
    parts = [int(p) for p in raw.lower().replace("x", ",").split(",")]
    return tuple(parts)


def parse_config(path):
    """Read a flat key=value config file with section prefixes.

    Example lines: seed=7, classifier.batch_size=50,
    localizer.input_size=64x64, postprocess.retain_two=true.
    """
    cfg = ExperimentConfig()
    with open(path) as f:
        for line_num, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_num}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            key = key.strip()
            try:
                _apply_key(cfg, key, raw.strip())
            except (AttributeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_num}: {exc}") from exc
    return cfg


def _apply_key(cfg, key, raw):
    paths_keys = {"manifest", "image_root", "mask_dir", "overlay_dir",
                  "checkpoint_dir", "report_dir"}
    if key.startswith("paths."):
        name = key[len("paths."):]
        if name not in paths_keys:
            raise ValueError(f"unknown path key {name!r}")
        setattr(cfg, name, raw)
    elif key.startswith("postprocess."):
        name = key[len("postprocess."):]
        if name not in ("retain_two", "mirror_fill"):
            raise ValueError(f"unknown postprocess key {name!r}")
        setattr(cfg, name, _parse_value(raw))
    elif key.startswith("synthetic."):
        name = "synthetic_" + key[len("synthetic."):]
        if not hasattr(cfg, name):
            raise ValueError(f"unknown synthetic key {key!r}")
        setattr(cfg, name, _parse_value(raw))
    elif key.startswith("localizer."):
        name = key[len("localizer."):]
        if not hasattr(cfg.loc, name):
            raise ValueError(f"unknown localizer key {name!r}")
        value = _parse_pair(raw) if name == "input_size" else _parse_value(raw)
        setattr(cfg.loc, name, value)
    elif key.startswith("classifier."):
        name = key[len("classifier."):]
        if not hasattr(cfg.cls, name):
            raise ValueError(f"unknown classifier key {name!r}")
        if name in ("input_size", "block_layers"):
            value = _parse_pair(raw)
        else:
            value = _parse_value(raw)
        setattr(cfg.cls, name, value)
    elif hasattr(cfg, key):
        setattr(cfg, key, _parse_value(raw))
    else:
        raise ValueError(f"unknown config key {key!r}")


def config_lines(cfg):
    lines = []
    for name in ("manifest", "image_root", "mask_dir", "overlay_dir",
                 "checkpoint_dir", "report_dir"):
        lines.append(f"paths.{name}={getattr(cfg, name)}")
    lines.append(f"seed={cfg.seed}")
    lines.append(f"threshold={cfg.threshold}")
    lines.append(f"postprocess.retain_two={str(cfg.retain_two).lower()}")
    lines.append(f"postprocess.mirror_fill={str(cfg.mirror_fill).lower()}")
    lines.append(f"synthetic={str(cfg.synthetic).lower()}")
    lines.append(f"synthetic.n_images={cfg.synthetic_n_images}")
    lines.append(f"synthetic.n_pairs={cfg.synthetic_n_pairs}")
    lines.append(f"synthetic.clutter={str(cfg.synthetic_clutter).lower()}")
    loc = cfg.loc
    lines.append(f"localizer.input_size={loc.input_size[0]}x{loc.input_size[1]}")
    for name in ("depth", "base_channels", "learning_rate", "batch_size", "epochs"):
        lines.append(f"localizer.{name}={getattr(loc, name)}")
    cls = cfg.cls
    lines.append(f"classifier.backbone={cls.backbone}")
    lines.append(f"classifier.block_layers={','.join(map(str, cls.block_layers))}")
    lines.append(f"classifier.input_size={cls.input_size[0]}x{cls.input_size[1]}")
    for name in ("growth_rate", "init_channels", "learning_rate", "batch_size",
                 "epochs", "flip_probability", "stem_downsample"):
        lines.append(f"classifier.{name}={getattr(cls, name)}")
    return lines


def config_hash(cfg):
    text = "\n".join(config_lines(cfg))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _provenance(cfg):
    return f"# config={config_hash(cfg)} seed={cfg.seed}\n"


def _seg_checkpoint_path(cfg):
    return os.path.join(cfg.checkpoint_dir, "localizer.ckpt")


def _cls_checkpoint_path(cfg, arm):
    return os.path.join(cfg.checkpoint_dir, f"classifier_{arm}.ckpt")


def _history_path(cfg, arm):
    return os.path.join(cfg.report_dir, f"history_{arm}.csv")


# ---------------------------------------------------------------------------
# localize-train
# ---------------------------------------------------------------------------

def _load_real_seg_pairs(cfg):
    img_dir = os.path.join(cfg.image_root, "images")
    left_dir = os.path.join(cfg.mask_dir, "left")
    right_dir = os.path.join(cfg.mask_dir, "right")
    for d in (img_dir, left_dir, right_dir):
        if not os.path.isdir(d):
            raise FileNotFoundError(
                f"segmentation data directory missing: {d} "
                "(enable synthetic mode or provide image/mask directories)")
    pairs = []
    size = tuple(cfg.loc.input_size)
    for name in sorted(os.listdir(img_dir)):
        img = dataset.load_image(os.path.join(img_dir, name))[0]
        img = dataset.equalize_histogram(img)
        img = dataset.resize(img, size)
        left = mask_ops.load_mask(os.path.join(left_dir, name))
        right = mask_ops.load_mask(os.path.join(right_dir, name))
        mask = mask_ops.combine(left, right)
        mask = dataset.resize(mask, size, nearest=True)
        pairs.append((img, mask))
    return pairs


def cmd_localize_train(cfg):
    """Train the localizer and write its checkpoint and history CSV."""
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    os.makedirs(cfg.report_dir, exist_ok=True)
    size = tuple(cfg.loc.input_size)
    if cfg.synthetic:
        pairs = [dataset.generate_synthetic_pair(cfg.seed + i, size=size)
                 for i in range(cfg.synthetic_n_pairs)]
    else:
        pairs = _load_real_seg_pairs(cfg)
    model = localizer.build_seg_model(cfg.loc, seed=cfg.seed)
    ckpt = localizer.train_localizer(model, pairs, cfg.loc,
                                     val_fraction=0.2, seed=cfg.seed)
    localizer.save_seg_checkpoint(ckpt, _seg_checkpoint_path(cfg))
    hist_path = os.path.join(cfg.report_dir, "history_localizer.csv")
    with open(hist_path, "w") as f:
        f.write(_provenance(cfg))
    with open(hist_path, "a") as f:
        f.write(history_to_csv(ckpt.history, include_seg_metrics=True))
    final_val = [r for r in ckpt.history if r.phase == "val"][-1]
    print(f"localize-train: {len(pairs)} pairs, {cfg.loc.epochs} epochs, "
          f"final val iou={final_val.iou:.4f} dice={final_val.dice:.4f}")
    return ckpt


# ---------------------------------------------------------------------------
# overlay
# ---------------------------------------------------------------------------

def postprocess_mask(mask, retain_two, mirror):
    """Apply the configured post-processing; returns (mask, before, after)."""
    before = len(mask_ops.connected_components(mask))
    out = mask
    if retain_two:
        out = mask_ops.retain_two_regions(out)
    if mirror:
        out = mask_ops.mirror_fill(out)
    after = len(mask_ops.connected_components(out))
    return out, before, after


def _ensure_synthetic_dataset(cfg):
    manifest_path = os.path.join(cfg.image_root, cfg.manifest)
    if not os.path.exists(manifest_path):
        dataset.write_synthetic_dataset(
            cfg.image_root, cfg.synthetic_n_images, cfg.seed,
            size=tuple(cfg.cls.input_size), clutter=cfg.synthetic_clutter)
    return manifest_path


def _read_manifest(cfg):
    if cfg.synthetic:
        manifest_path = _ensure_synthetic_dataset(cfg)
    else:
        manifest_path = os.path.join(cfg.image_root, cfg.manifest)
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    with open(manifest_path) as f:
        manifest = dataset.parse_manifest(f.read())
    return dataset.filter_frontal(manifest)


def cmd_overlay(cfg, predict_fn=None):
    """Predict, post-process and overlay masks for every frontal record.

    Writes overlay PNGs mirroring the source layout plus a sidecar CSV
    `source_path,overlay_path,components_before,components_after,skipped_reason`.
    Unreadable images are logged in the sidecar and skipped.
    """
    manifest = _read_manifest(cfg)
    if predict_fn is None:
        ckpt_path = _seg_checkpoint_path(cfg)
        if not os.path.exists(ckpt_path):
            raise FileNotFoundError(f"localizer checkpoint not found: {ckpt_path}")
        ckpt = localizer.load_seg_checkpoint(ckpt_path)

        def predict_fn(gray):
            return localizer.predict_masks(ckpt, [gray], cfg.threshold)[0]

        seg_size = tuple(ckpt.config.input_size)
    else:
        seg_size = tuple(cfg.loc.input_size)

    os.makedirs(cfg.overlay_dir, exist_ok=True)
    sidecar_rows = []
    for rec in manifest.records:
        src = os.path.join(cfg.image_root, rec.path)
        dst = os.path.join(cfg.overlay_dir, rec.path)
        try:
            img = dataset.load_image(src)
        except (FileNotFoundError, ValueError) as exc:
            sidecar_rows.append((rec.path, "", "", "", str(exc)))
            continue
        gray = img.mean(axis=0)
        mask = predict_fn(dataset.resize(gray, seg_size))
        mask, before, after = postprocess_mask(mask, cfg.retain_two, cfg.mirror_fill)
        mask = dataset.resize(mask, gray.shape, nearest=True)
        out = mask_ops.overlay(img, mask)
        os.makedirs(os.path.dirname(dst), exist_ok=True)
        rgb = np.clip(np.round(out.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(dst)
        sidecar_rows.append((rec.path, rec.path, before, after, ""))
    os.makedirs(cfg.report_dir, exist_ok=True)
    sidecar_path = os.path.join(cfg.report_dir, "overlay_sidecar.csv")
    with open(sidecar_path, "w") as f:
        f.write(_provenance(cfg))
        f.write("source_path,overlay_path,components_before,components_after,"
                "skipped_reason\n")
        for row in sidecar_rows:
            f.write(",".join(str(c) for c in row) + "\n")
    done = sum(1 for r in sidecar_rows if not r[4])
    print(f"overlay: wrote {done}/{len(sidecar_rows)} overlays to {cfg.overlay_dir}")
    return sidecar_path


# ---------------------------------------------------------------------------
# classify-train / evaluate
# ---------------------------------------------------------------------------

class _DiskData:
    """Lazy (image, label) access over a manifest; one arm's image stream."""

    def __init__(self, manifest, root, input_size):
        self.records = manifest.records
        self.root = root
        self.input_size = tuple(input_size)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        rec = self.records[i]
        img = dataset.load_image(os.path.join(self.root, rec.path))
        if img.shape[1:] != self.input_size:
            img = dataset.resize(img, self.input_size)
        return img, dataset.clean_labels(rec.raw_labels)


def _arm_root(cfg, arm):
    if arm == "original":
        return cfg.image_root
    if arm == "overlay":
        return cfg.overlay_dir
    raise ValueError(f"unknown arm {arm!r}; expected one of {ARMS}")


def _write_split(cfg, assignment):
    os.makedirs(cfg.report_dir, exist_ok=True)
    path = os.path.join(cfg.report_dir, "split.csv")
    buf = io.StringIO()
    buf.write(_provenance(cfg))
    buf.write(f"# seed={assignment.seed}\n")
    buf.write("index,partition\n")
    for name in ("train", "val", "test"):
        for idx in getattr(assignment, name):
            buf.write(f"{idx},{name}\n")
    content = buf.getvalue()
    if os.path.exists(path):
        with open(path) as f:
            if f.read() != content:
                raise RuntimeError(
                    "split.csv differs from the existing one; both arms must "
                    "share the same split and seed")
    else:
        with open(path, "w") as f:
            f.write(content)
    return path


def cmd_classify_train(cfg, arm):
    """Train one comparison arm and write its checkpoint and history CSV."""
    manifest = _read_manifest(cfg)
    root = _arm_root(cfg, arm)
    if arm == "overlay":
        missing = [r.path for r in manifest.records
                   if not os.path.exists(os.path.join(root, r.path))]
        if missing:
            raise FileNotFoundError(
                f"overlay images missing for {len(missing)} records "
                f"(first: {missing[0]}); run the overlay stage first")
    data = _DiskData(manifest, root, cfg.cls.input_size)
    assignment = dataset.split(len(data), cfg.seed)
    _write_split(cfg, assignment)
    model = classifier.build_classifier(cfg.cls, seed=cfg.seed)
    ckpt = classifier.train_classifier(model, data, cfg.cls,
                                       assignment, seed=cfg.seed)
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    classifier.save_cls_checkpoint(ckpt, _cls_checkpoint_path(cfg, arm))
    hist_path = _history_path(cfg, arm)
    with open(hist_path, "w") as f:
        f.write(_provenance(cfg))
    with open(hist_path, "a") as f:
        f.write(history_to_csv(ckpt.history))
    final_val = [r for r in ckpt.history if r.phase == "val"][-1]
    print(f"classify-train[{arm}]: {len(data)} records, "
          f"final val accuracy={final_val.accuracy:.4f}")
    return ckpt


def cmd_evaluate(cfg, arm):
    """Evaluate one arm's checkpoint on the test partition."""
    ckpt_path = _cls_checkpoint_path(cfg, arm)
    if not os.path.exists(ckpt_path):
        raise FileNotFoundError(f"classifier checkpoint not found: {ckpt_path}")
    ckpt = classifier.load_cls_checkpoint(ckpt_path)
    manifest = _read_manifest(cfg)
    data = _DiskData(manifest, _arm_root(cfg, arm), ckpt.config.input_size)
    assignment = dataset.split(len(data), cfg.seed)
    record = classifier.evaluate(ckpt, data, assignment.test)
    os.makedirs(cfg.report_dir, exist_ok=True)
    path = os.path.join(cfg.report_dir, f"test_{arm}.csv")
    with open(path, "w") as f:
        f.write(_provenance(cfg))
        f.write("arm,loss,accuracy\n")
        f.write(f"{arm},{record.loss:.6f},{record.accuracy:.6f}\n")
    print(f"evaluate[{arm}]: test loss={record.loss:.6f} "
          f"accuracy={record.accuracy:.6f}")
    return record


# ---------------------------------------------------------------------------
# compare-report
# ---------------------------------------------------------------------------

def _arm_table(history):
    """Per-epoch rows (epoch, train_loss, train_acc, val_loss, val_acc)."""
    by_epoch = {}
    for rec in history:
        row = by_epoch.setdefault(rec.epoch, {})
        row[rec.phase] = rec
    table = []
    for epoch in sorted(by_epoch):
        tr = by_epoch[epoch].get("train")
        va = by_epoch[epoch].get("val")
        table.append((epoch,
                      tr.loss if tr else float("nan"),
                      tr.accuracy if tr else float("nan"),
                      va.loss if va else float("nan"),
                      va.accuracy if va else float("nan")))
    return table


def cmd_compare_report(cfg, arms=ARMS):
    """Join arm histories into a text table and accuracy/loss curve plots."""
    histories = {}
    for arm in arms:
        path = _history_path(cfg, arm)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing history for arm {arm!r}: {path}")
        histories[arm] = read_history_csv(path)
    os.makedirs(cfg.report_dir, exist_ok=True)

    table_path = os.path.join(cfg.report_dir, "comparison.txt")
    with open(table_path, "w") as f:
        f.write(_provenance(cfg))
        f.write(f"{'arm':<10}{'epoch':>6}{'train_loss':>12}{'train_acc':>12}"
                f"{'val_loss':>12}{'val_acc':>12}\n")
        for arm in arms:
            for epoch, tl, ta, vl, va in _arm_table(histories[arm]):
                f.write(f"{arm:<10}{epoch:>6}{tl:>12.6f}{ta:>12.6f}"
                        f"{vl:>12.6f}{va:>12.6f}\n")

    plot_paths = []
    for metric, col in (("accuracy", (2, 4)), ("loss", (1, 3))):
        fig, ax = plt.subplots(figsize=(6, 4))
        for arm in arms:
            table = _arm_table(histories[arm])
            epochs = [row[0] for row in table]
            ax.plot(epochs, [row[col[0]] for row in table],
                    marker="o", label=f"{arm} train")
            ax.plot(epochs, [row[col[1]] for row in table],
                    marker="s", linestyle="--", label=f"{arm} val")
        ax.set_xlabel("epoch")
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} by epoch")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(cfg.report_dir, f"{metric}.png")
        fig.savefig(path)
        plt.close(fig)
        plot_paths.append(path)
    print(f"compare-report: wrote {table_path} and {len(plot_paths)} plots")
    return table_path, plot_paths


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _load_config(args):
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.synthetic:
        cfg.synthetic = True
    return cfg


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lungpipe",
        description="Lung localization and multilabel classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("localize-train", "overlay", "classify-train", "evaluate",
                 "compare-report"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--synthetic", action="store_true",
                       help="generate synthetic data instead of reading real data")
        if name in ("classify-train", "evaluate"):
            p.add_argument("--arm", choices=ARMS, required=True)
        if name == "compare-report":
            p.add_argument("--arms", default="original,overlay",
                           help="comma-separated arms to include")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command == "localize-train":
            cmd_localize_train(cfg)
        elif args.command == "overlay":
            cmd_overlay(cfg)
        elif args.command == "classify-train":
            cmd_classify_train(cfg, args.arm)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.arm)
        elif args.command == "compare-report":
            arms = tuple(a for a in args.arms.split(",") if a)
            cmd_compare_report(cfg, arms)
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
