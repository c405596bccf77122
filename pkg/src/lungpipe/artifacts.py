"""Checkpoint archives and per-epoch history records.

A checkpoint is a zip archive holding a plain-text JSON config section,
an opaque weights section (torch state dict), and the training history
CSV. History CSVs are written with fixed float formatting so reruns with
the same seed are byte-identical.
"""

import io
import json
import zipfile
from dataclasses import dataclass, asdict

import torch


@dataclass
class MetricsRecord:
    epoch: int
    phase: str  # "train" or "val"
    loss: float
    accuracy: float
    iou: float = None
    dice: float = None


def history_to_csv(history, include_seg_metrics=False):
    cols = ["epoch", "phase", "loss", "accuracy"]
    if include_seg_metrics:
        cols += ["iou", "dice"]
    lines = [",".join(cols)]
    for rec in history:
        row = [str(rec.epoch), rec.phase, f"{rec.loss:.6f}", f"{rec.accuracy:.6f}"]
        if include_seg_metrics:
            row += [f"{rec.iou:.6f}", f"{rec.dice:.6f}"]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def write_history_csv(history, path, include_seg_metrics=False):
    with open(path, "w") as f:
        f.write(history_to_csv(history, include_seg_metrics))


def read_history_csv(path):
    """Parse a history CSV back into MetricsRecord rows."""
    records = []
    with open(path) as f:
        header = None
        for line_num, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line.split(",")
                if header[:4] != ["epoch", "phase", "loss", "accuracy"]:
                    raise ValueError(f"line {line_num}: unexpected header {line!r}")
                continue
            cells = line.split(",")
            if len(cells) != len(header):
                raise ValueError(
                    f"line {line_num}: expected {len(header)} cells, got {len(cells)}")
            try:
                rec = MetricsRecord(
                    epoch=int(cells[0]), phase=cells[1],
                    loss=float(cells[2]), accuracy=float(cells[3]))
                if len(cells) >= 6:
                    rec.iou = float(cells[4])
                    rec.dice = float(cells[5])
            except ValueError as exc:
                raise ValueError(f"line {line_num}: {exc}") from exc
            records.append(rec)
    return records


def save_checkpoint(path, config_dict, state_dict, history,
                    include_seg_metrics=False):
    weights = io.BytesIO()
    torch.save(state_dict, weights)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("config.json", json.dumps(config_dict, indent=2, sort_keys=True))
        zf.writestr("weights.pt", weights.getvalue())
        zf.writestr("history.csv", history_to_csv(history, include_seg_metrics))


def load_checkpoint(path):
    with zipfile.ZipFile(path, "r") as zf:
        config_dict = json.loads(zf.read("config.json").decode())
        state_dict = torch.load(io.BytesIO(zf.read("weights.pt")),
                                weights_only=True)
        history = []
        csv_text = zf.read("history.csv").decode()
        lines = [ln for ln in csv_text.splitlines() if ln.strip()]
        for line in lines[1:]:
            cells = line.split(",")
            rec = MetricsRecord(epoch=int(cells[0]), phase=cells[1],
                                loss=float(cells[2]), accuracy=float(cells[3]))
            if len(cells) >= 6:
                rec.iou = float(cells[4])
                rec.dice = float(cells[5])
            history.append(rec)
    return config_dict, state_dict, history


def record_to_dict(rec):
    return asdict(rec)
