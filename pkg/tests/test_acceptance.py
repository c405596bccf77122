"""Acceptance suite for the full pipeline.

Each test checks one release criterion end to end and prints a single
PASS/FAIL line. Oracles here are deliberately independent of the library
implementation (plain Python loops, flood fill, finite differences).
"""

import csv
import io
import os

import numpy as np
import torch

from lungpipe import classifier, cli, dataset, localizer, mask_ops, metrics
from lungpipe.artifacts import read_history_csv, write_history_csv


def _report(name, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

def _iou_oracle(a, b):
    inter = union = 0
    for x, y in zip(a.ravel(), b.ravel()):
        inter += int(x and y)
        union += int(x or y)
    return 1.0 if union == 0 else inter / union


def _dice_oracle(a, b):
    inter = 0
    for x, y in zip(a.ravel(), b.ravel()):
        inter += int(x and y)
    total = int(a.sum()) + int(b.sum())
    return 1.0 if total == 0 else 2.0 * inter / total


def _bce_oracle(pred, target, eps=1e-7):
    total = 0.0
    for p, t in zip(pred.ravel(), target.ravel()):
        p = min(max(p, eps), 1.0 - eps)
        total += -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    return total / pred.size


def _accuracy_oracle(pred, target):
    hits = 0
    for p, t in zip(pred.ravel(), target.ravel()):
        hits += int((1 if p >= 0.5 else 0) == int(t))
    return hits / pred.size


def _flood_components(mask):
    """8-connected components by breadth-first flood fill."""
    mask = np.asarray(mask)
    seen = np.zeros(mask.shape, dtype=bool)
    comps = []
    h, w = mask.shape
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            stack = [(r, c)]
            seen[r, c] = True
            pixels = []
            while stack:
                y, x = stack.pop()
                pixels.append((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if (0 <= ny < h and 0 <= nx < w
                                and mask[ny, nx] and not seen[ny, nx]):
                            seen[ny, nx] = True
                            stack.append((ny, nx))
            comps.append(pixels)
    return comps


def _retain_two_oracle(mask):
    comps = _flood_components(mask)
    center = ((mask.shape[0] - 1) / 2.0, (mask.shape[1] - 1) / 2.0)
    scored = []
    for order, pixels in enumerate(comps):
        cy = sum(p[0] for p in pixels) / len(pixels)
        cx = sum(p[1] for p in pixels) / len(pixels)
        dist = ((cy - center[0]) ** 2 + (cx - center[1]) ** 2) ** 0.5
        scored.append((dist, -len(pixels), order, pixels))
    scored.sort(key=lambda s: s[:3])
    out = np.zeros(mask.shape, dtype=np.uint8)
    for _, _, _, pixels in scored[:2]:
        for y, x in pixels:
            out[y, x] = 1
    return out


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

class TestAcceptance:
    def test_a1_metric_oracles(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(1000):
            shape = (int(rng.integers(1, 8)), int(rng.integers(1, 8)))
            a = (rng.random(shape) < 0.5).astype(np.uint8)
            b = (rng.random(shape) < 0.5).astype(np.uint8)
            pred = rng.random(shape)
            target = (rng.random(shape) < 0.5).astype(np.float64)
            worst = max(
                worst,
                abs(metrics.iou(a, b) - _iou_oracle(a, b)),
                abs(metrics.dice(a, b) - _dice_oracle(a, b)),
                abs(metrics.bce_loss(pred, target) - _bce_oracle(pred, target)),
                abs(metrics.rounded_accuracy(pred, target)
                    - _accuracy_oracle(pred, target)),
                abs(metrics.dice(a, b)
                    - 2.0 * metrics.iou(a, b) / (1.0 + metrics.iou(a, b))))
        _report("metric oracles (1000 inputs, identity <= 1e-12)",
                worst <= 1e-12, f"worst deviation {worst:.2e}")

    def test_a2_mask_op_oracles(self):
        rng = np.random.default_rng(12)
        for i in range(500):
            density = rng.uniform(0.02, 0.6)
            mask = (rng.random((32, 32)) < density).astype(np.uint8)
            kept = mask_ops.retain_two_regions(mask)
            assert np.array_equal(kept, _retain_two_oracle(mask))
            assert np.all(kept <= mask)
            assert len(_flood_components(kept)) <= 2
            assert np.array_equal(mask_ops.retain_two_regions(kept), kept)
            comps = _flood_components(kept)
            filled = mask_ops.mirror_fill(kept)
            if len(comps) == 1:
                assert np.array_equal(filled, kept | kept[:, ::-1])
                assert np.array_equal(filled, filled[:, ::-1])
            else:
                assert np.array_equal(filled, kept)
        _report("mask ops vs flood-fill oracle (500 masks)", True,
                "retain-two, subset, idempotence and mirror invariants hold")

    def test_a3_label_policy(self):
        cells = ["1.0", "0.0", "-1.0", ""]
        raw_of = {"1.0": dataset.POSITIVE, "0.0": dataset.NEGATIVE,
                  "-1.0": dataset.UNCERTAIN, "": dataset.MISSING}
        rng = np.random.default_rng(13)
        header = ",".join(dataset.METADATA_COLUMNS + dataset.OBSERVATIONS)
        rows = []
        picks = []
        # all four alphabet tokens in a single varying slot, exhaustively
        for cell in cells:
            picks.append([cell] + ["0.0"] * 13)
        for _ in range(300):
            picks.append([cells[int(rng.integers(4))] for _ in range(14)])
        for i, row in enumerate(picks):
            rows.append(",".join(
                [f"img{i:03d}.png", "Male", "40", "Frontal", "AP"] + row))
        text = header + "\n" + "\n".join(rows) + "\n"
        manifest = dataset.parse_manifest(text)
        for rec, row in zip(manifest.records, picks):
            assert list(rec.raw_labels) == [raw_of[c] for c in row]
            cleaned = dataset.clean_labels(rec.raw_labels)
            expected = [1.0 if c == "1.0" else 0.0 for c in row]
            assert cleaned.tolist() == expected
        assert dataset.serialize_manifest(manifest) == text
        _report("label policy (4 single-slot cases + 300 sampled rows)", True,
                "positive -> 1, uncertain/negative/missing -> 0; round trip exact")

    def test_a4_split_partitions(self):
        for n in range(1001):
            s = dataset.split(n, seed=17)
            sizes = (len(s.train), len(s.val), len(s.test))
            assert sizes == (int(0.7 * n), int(0.2 * n),
                             n - int(0.7 * n) - int(0.2 * n))
            assert sorted(s.train + s.val + s.test) == list(range(n))
            again = dataset.split(n, seed=17)
            assert (s.train, s.val, s.test) == (again.train, again.val, again.test)
        big = dataset.split(28629, seed=17)
        sizes = (len(big.train), len(big.val), len(big.test))
        _report("seeded 70/20/10 split (n in 0..1000, n=28629)",
                sizes == (20040, 5725, 2864), f"n=28629 -> {sizes}")

    def test_a5_segmentation_analogue(self):
        pairs = [dataset.generate_synthetic_pair(100 + i, size=(64, 64))
                 for i in range(200)]
        cfg = localizer.SegModelConfig(input_size=(64, 64), depth=3,
                                       base_channels=16, batch_size=8, epochs=10)
        model = localizer.build_seg_model(cfg, seed=0)
        ckpt = localizer.train_localizer(model, pairs, cfg,
                                         val_fraction=0.2, seed=0)
        final = [r for r in ckpt.history if r.phase == "val"][-1]
        _report("segmentation analogue (200 pairs, depth 3, batch 8, 10 epochs)",
                final.iou >= 0.90 and final.dice >= 0.94,
                f"val iou={final.iou:.4f} (>=0.90) dice={final.dice:.4f} (>=0.94)")

    def test_a6_gradient_checks(self):
        rng = np.random.default_rng(14)
        h = 1e-6
        worst = 0.0

        def check(model, loss_fn, x, y, n_checks=8):
            nonlocal worst
            loss = loss_fn(model(x), y)
            model.zero_grad()
            loss.backward()
            params = [p for p in model.parameters() if p.grad is not None]
            done = 0
            while done < n_checks:
                p = params[int(rng.integers(len(params)))]
                idx = tuple(int(rng.integers(s)) for s in p.shape)
                grad = p.grad[idx].item()
                if abs(grad) < 1e-8:
                    continue
                with torch.no_grad():
                    orig = p[idx].item()
                    p[idx] = orig + h
                    up = loss_fn(model(x), y).item()
                    p[idx] = orig - h
                    down = loss_fn(model(x), y).item()
                    p[idx] = orig
                fd = (up - down) / (2 * h)
                worst = max(worst, abs(fd - grad) / max(abs(grad), 1e-12))
                done += 1

        seg_cfg = localizer.SegModelConfig(input_size=(16, 16), depth=1,
                                           base_channels=4)
        seg = localizer.build_seg_model(seg_cfg, seed=4).double()
        seg.eval()
        check(seg, localizer._clamped_bce,
              torch.from_numpy(rng.random((2, 1, 16, 16))),
              torch.from_numpy((rng.random((2, 1, 16, 16)) < 0.5).astype(float)))

        cls_cfg = classifier.dense_tiny_config(
            block_layers=(1, 1), growth_rate=4, init_channels=8,
            input_size=(8, 8))
        cls = classifier.build_classifier(cls_cfg, seed=4).double()
        cls.eval()
        check(cls, classifier._clamped_bce,
              torch.from_numpy(rng.random((2, 3, 8, 8))),
              torch.from_numpy(rng.integers(0, 2, (2, 14)).astype(float)))

        _report("loss gradients vs central finite differences",
                worst <= 1e-3, f"worst relative error {worst:.2e} (<=1e-3)")

    def test_a7_classification_analogue(self, tmp_path):
        data = []
        for i in range(3000):
            img, labels, _ = dataset.generate_synthetic_labeled(i, size=(64, 64))
            data.append((img, labels))
        cfg = classifier.dense_tiny_config()
        assert cfg.batch_size == 50 and cfg.epochs <= 8
        split = dataset.split(len(data), seed=0)
        model = classifier.build_classifier(cfg, seed=0)
        ckpt = classifier.train_classifier(model, data, cfg, split, seed=0)
        final = [r for r in ckpt.history if r.phase == "val"][-1]

        hist_path = tmp_path / "history.csv"
        write_history_csv(ckpt.history, hist_path)
        lines = hist_path.read_text().strip().splitlines()
        assert lines[0] == "epoch,phase,loss,accuracy"
        assert len(lines) == 1 + 2 * cfg.epochs
        for line in lines[1:]:
            epoch, phase, loss, acc = line.split(",")
            assert phase in ("train", "val")
            assert int(epoch) >= 1
            float(loss), float(acc)
        _report("classification analogue (dense-tiny, batch 50, <=8 epochs)",
                final.accuracy >= 0.95,
                f"val accuracy={final.accuracy:.4f} (>=0.95), "
                f"history rows={len(lines) - 1}")

    def _small_cfg(self, root):
        cfg = cli.ExperimentConfig(
            image_root=os.path.join(root, "data"),
            overlay_dir=os.path.join(root, "overlays"),
            checkpoint_dir=os.path.join(root, "ckpt"),
            report_dir=os.path.join(root, "reports"),
            seed=5, synthetic=True,
            synthetic_n_images=30, synthetic_n_pairs=16)
        cfg.loc = localizer.SegModelConfig(input_size=(64, 64), depth=2,
                                           base_channels=8, epochs=2)
        cfg.cls = classifier.dense_tiny_config(
            block_layers=(1, 1), growth_rate=4, init_channels=8,
            batch_size=5, epochs=2)
        return cfg

    def _run_pipeline(self, cfg):
        cli.cmd_localize_train(cfg)
        cli.cmd_overlay(cfg)
        cli.cmd_classify_train(cfg, "original")
        cli.cmd_classify_train(cfg, "overlay")
        cli.cmd_evaluate(cfg, "original")
        cli.cmd_evaluate(cfg, "overlay")
        return cli.cmd_compare_report(cfg)

    def test_a8_end_to_end_smoke_and_rerun(self, tmp_path, monkeypatch):
        artifacts = ("history_localizer.csv", "history_original.csv",
                     "history_overlay.csv", "test_original.csv",
                     "test_overlay.csv", "split.csv", "overlay_sidecar.csv",
                     "comparison.txt")
        outputs = []
        # identical relative paths from two working directories, so the
        # provenance hashes and sidecar paths are comparable byte for byte
        for run in ("first", "second"):
            base = tmp_path / run
            base.mkdir()
            monkeypatch.chdir(base)
            cfg = self._small_cfg(".")
            table_path, plot_paths = self._run_pipeline(cfg)
            assert os.path.exists(table_path)
            assert all(os.path.exists(p) for p in plot_paths)
            table = open(table_path).read()
            for arm in ("original", "overlay"):
                assert arm in table
            outputs.append({name: open(os.path.join(cfg.report_dir, name),
                                       "rb").read()
                            for name in artifacts})
        mismatched = [n for n in artifacts if outputs[0][n] != outputs[1][n]]
        _report("end-to-end smoke test, byte-identical rerun",
                not mismatched,
                f"{len(artifacts)} artifacts compared; mismatches: "
                f"{mismatched or 'none'}")

    def test_a9_overlay_benefit(self, tmp_path):
        cfg = cli.ExperimentConfig(
            image_root=str(tmp_path / "data"),
            overlay_dir=str(tmp_path / "overlays"),
            checkpoint_dir=str(tmp_path / "ckpt"),
            report_dir=str(tmp_path / "reports"),
            seed=0, synthetic=True,
            synthetic_n_images=3000, synthetic_n_pairs=200,
            synthetic_clutter=True)
        cfg.loc = localizer.SegModelConfig(input_size=(64, 64), depth=3,
                                           base_channels=16, batch_size=8,
                                           epochs=10)
        self._run_pipeline(cfg)
        final = {}
        for arm in ("original", "overlay"):
            history = read_history_csv(os.path.join(cfg.report_dir,
                                                    f"history_{arm}.csv"))
            final[arm] = [r for r in history if r.phase == "val"][-1].accuracy
        _report("overlay benefit (in-lung signal, out-of-lung clutter)",
                final["overlay"] >= final["original"] - 0.02,
                f"val accuracy overlay={final['overlay']:.4f} vs "
                f"original={final['original']:.4f} (margin 0.02)")
