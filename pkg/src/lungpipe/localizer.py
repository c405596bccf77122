"""Encoder-decoder lung localization model with training and prediction.

A compact U-Net over single-channel inputs: each encoder stage doubles
the channel count and halves the spatial dims; decoder stages upsample
and concatenate the matching encoder feature map; a final 1x1 conv plus
sigmoid yields per-pixel lung probabilities.
"""

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn

from . import mask_ops, metrics
from .artifacts import MetricsRecord, save_checkpoint, load_checkpoint


@dataclass
class SegModelConfig:
    input_size: tuple = (256, 256)
    depth: int = 3
    base_channels: int = 16
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 10

    def validate(self):
        if self.batch_size < 1 or self.epochs < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size, epochs must be >= 1 and learning_rate > 0")
        factor = 2 ** self.depth
        h, w = self.input_size
        for name, dim in (("height", h), ("width", w)):
            if dim % factor != 0:
                raise ValueError(
                    f"input {name} {dim} is not divisible by 2^depth = {factor}")


@dataclass
class SegCheckpoint:
    config: SegModelConfig
    state_dict: dict
    history: list = field(default_factory=list)


class _DoubleConv(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class UNet(nn.Module):
    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        ch = config.base_channels
        self.encoders = nn.ModuleList()
        in_ch = 1
        for _ in range(config.depth):
            self.encoders.append(_DoubleConv(in_ch, ch))
            in_ch = ch
            ch *= 2
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _DoubleConv(in_ch, ch)
        self.upconvs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for _ in range(config.depth):
            self.upconvs.append(nn.ConvTranspose2d(ch, ch // 2, kernel_size=2, stride=2))
            self.decoders.append(_DoubleConv(ch, ch // 2))
            ch //= 2
        self.head = nn.Conv2d(ch, 1, kernel_size=1)

    def forward(self, x):
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upconvs, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([skip, x], dim=1))
        return torch.sigmoid(self.head(x))


def build_seg_model(config, seed=0):
    """Build a U-Net with deterministic initial parameters for a seed."""
    config.validate()
    torch.manual_seed(seed)
    return UNet(config)


def _clamped_bce(pred, target, eps=metrics.BCE_EPS):
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def _as_batches(indices, batch_size):
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def _epoch_metrics(model, images, masks, batch_size):
    """Sample-weighted loss/accuracy plus mean per-image IoU and Dice."""
    model.eval()
    total_loss = 0.0
    total_acc = 0.0
    ious, dices = [], []
    n = len(images)
    with torch.no_grad():
        for batch in _as_batches(list(range(n)), batch_size):
            x = torch.from_numpy(np.stack([images[i] for i in batch]))[:, None]
            y = torch.from_numpy(np.stack([masks[i] for i in batch]).astype(np.float32))[:, None]
            pred = model(x)
            for k in range(len(batch)):
                total_loss += _clamped_bce(pred[k], y[k]).item()
                p_np = pred[k, 0].numpy()
                m_np = y[k, 0].numpy()
                total_acc += metrics.rounded_accuracy(p_np, m_np)
                binary = mask_ops.binarize(p_np, 0.5)
                ious.append(metrics.iou(binary, m_np))
                dices.append(metrics.dice(binary, m_np))
    return (total_loss / n, total_acc / n,
            float(np.mean(ious)), float(np.mean(dices)))


def train_localizer(model, data, config, val_fraction=0.2, seed=0):
    """Train on (image, mask) pairs and return a SegCheckpoint with history.

    Pairs are shuffled once with the seed, the last val_fraction held out
    for validation; each epoch records train and val loss, rounded pixel
    accuracy, and mean IoU/Dice.
    """
    if not data:
        raise ValueError("training data is empty")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    config.validate()
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    n_val = max(1, int(round(val_fraction * len(data))))
    val_idx = order[-n_val:]
    train_idx = order[:-n_val]
    if len(train_idx) == 0:
        raise ValueError("training data too small for the validation fraction")
    images = [np.asarray(img, dtype=np.float32) for img, _ in data]
    masks = [np.asarray(m, dtype=np.float32) for _, m in data]

    torch.manual_seed(seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history = []
    for epoch in range(1, config.epochs + 1):
        model.train()
        epoch_order = train_idx[rng.permutation(len(train_idx))]
        for batch_num, batch in enumerate(_as_batches(list(epoch_order),
                                                      config.batch_size)):
            x = torch.from_numpy(np.stack([images[i] for i in batch]))[:, None]
            y = torch.from_numpy(np.stack([masks[i] for i in batch]))[:, None]
            optimizer.zero_grad()
            loss = _clamped_bce(model(x), y)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {batch_num}")
            loss.backward()
            optimizer.step()
        for phase, idx in (("train", train_idx), ("val", val_idx)):
            loss, acc, miou, mdice = _epoch_metrics(
                model, [images[i] for i in idx], [masks[i] for i in idx],
                config.batch_size)
            history.append(MetricsRecord(epoch, phase, loss, acc, miou, mdice))
    return SegCheckpoint(config=config, state_dict=model.state_dict(),
                         history=history)


def predict_masks(checkpoint, images, threshold=0.5):
    """Binarized lung masks for a list of single-channel images.

    Every image must already match the checkpoint's input size.
    """
    config = checkpoint.config
    expected = tuple(config.input_size)
    model = UNet(config)
    model.load_state_dict(checkpoint.state_dict)
    model.eval()
    out = []
    with torch.no_grad():
        for batch in _as_batches(list(range(len(images))), config.batch_size):
            arrs = []
            for i in batch:
                arr = np.asarray(images[i], dtype=np.float32)
                if arr.shape != expected:
                    raise ValueError(
                        f"image {i}: expected size {expected}, got {arr.shape}")
                arrs.append(arr)
            probs = model(torch.from_numpy(np.stack(arrs))[:, None])[:, 0].numpy()
            for k in range(len(batch)):
                out.append(mask_ops.binarize(probs[k], threshold))
    return out


def save_seg_checkpoint(checkpoint, path):
    save_checkpoint(path, asdict(checkpoint.config), checkpoint.state_dict,
                    checkpoint.history, include_seg_metrics=True)


def load_seg_checkpoint(path):
    config_dict, state_dict, history = load_checkpoint(path)
    config_dict["input_size"] = tuple(config_dict["input_size"])
    return SegCheckpoint(config=SegModelConfig(**config_dict),
                         state_dict=state_dict, history=history)
