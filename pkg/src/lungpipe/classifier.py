"""Densely connected multilabel classifier with sigmoid outputs.

Each dense layer appends growth_rate feature maps to its block's running
concatenation; transitions halve both channels and spatial dims. Global
average pooling yields the feature vector fed to the 14-way sigmoid head,
and to the late-fusion head combining two image streams.
"""

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn

from . import metrics
from .artifacts import MetricsRecord, save_checkpoint, load_checkpoint
from .dataset import NUM_LABELS, random_hflip

DENSE121_BLOCKS = (6, 12, 24, 16)
DENSE121_GROWTH = 32
DENSE121_INIT_CHANNELS = 64


@dataclass
class ClsModelConfig:
    backbone: str = "dense-tiny"
    growth_rate: int = 12
    block_layers: tuple = (2, 2, 2)
    init_channels: int = 32
    input_size: tuple = (64, 64)
    num_labels: int = NUM_LABELS
    learning_rate: float = 3e-3
    batch_size: int = 50
    epochs: int = 8
    flip_probability: float = 0.5
    # Stem downsampling factor: 4 is the canonical 7x7/2 conv + pooled stem;
    # 2 keeps more spatial detail for small desk-scale inputs.
    stem_downsample: int = 2

    def validate(self):
        if self.stem_downsample not in (2, 4):
            raise ValueError("stem_downsample must be 2 or 4")
        if self.backbone == "dense-121":
            if (tuple(self.block_layers) != DENSE121_BLOCKS
                    or self.growth_rate != DENSE121_GROWTH
                    or self.init_channels != DENSE121_INIT_CHANNELS
                    or self.stem_downsample != 4):
                raise ValueError(
                    "dense-121 preset requires blocks (6,12,24,16), growth 32, "
                    "init channels 64")
        elif self.backbone != "dense-tiny":
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if not self.block_layers or any(n < 1 for n in self.block_layers):
            raise ValueError(f"invalid block layer counts {self.block_layers}")
        if self.num_labels != NUM_LABELS:
            raise ValueError(f"label count must be {NUM_LABELS}")
        if self.growth_rate < 1 or self.init_channels < 1:
            raise ValueError("growth rate and init channels must be positive")


def dense121_config(**overrides):
    cfg = ClsModelConfig(backbone="dense-121", growth_rate=DENSE121_GROWTH,
                         block_layers=DENSE121_BLOCKS,
                         init_channels=DENSE121_INIT_CHANNELS,
                         input_size=(256, 256), learning_rate=1e-4,
                         stem_downsample=4)
    for key, val in overrides.items():
        setattr(cfg, key, val)
    cfg.validate()
    return cfg


def dense_tiny_config(**overrides):
    cfg = ClsModelConfig()
    for key, val in overrides.items():
        setattr(cfg, key, val)
    cfg.validate()
    return cfg


def feature_length(config):
    """Terminal channel count: init channels through blocks and transitions."""
    ch = config.init_channels
    for i, layers in enumerate(config.block_layers):
        ch += config.growth_rate * layers
        if i < len(config.block_layers) - 1:
            ch //= 2
    return ch


class _DenseLayer(nn.Module):
    def __init__(self, in_ch, growth_rate, bottleneck=4):
        super().__init__()
        inter = bottleneck * growth_rate
        self.block = nn.Sequential(
            nn.BatchNorm2d(in_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(in_ch, inter, kernel_size=1, bias=False),
            nn.BatchNorm2d(inter),
            nn.ReLU(inplace=True),
            nn.Conv2d(inter, growth_rate, kernel_size=3, padding=1, bias=False),
        )

    def forward(self, x):
        return torch.cat([x, self.block(x)], dim=1)


class _DenseBlock(nn.Module):
    def __init__(self, in_ch, growth_rate, num_layers):
        super().__init__()
        self.layers = nn.Sequential(*[
            _DenseLayer(in_ch + i * growth_rate, growth_rate)
            for i in range(num_layers)])

    def forward(self, x):
        return self.layers(x)


class _Transition(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.block = nn.Sequential(
            nn.BatchNorm2d(in_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(in_ch, out_ch, kernel_size=1, bias=False),
            nn.AvgPool2d(2),
        )

    def forward(self, x):
        return self.block(x)


class DenseClassifier(nn.Module):
    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        ch = config.init_channels
        stem_stride = 2 if config.stem_downsample == 4 else 1
        stem = [
            nn.Conv2d(3, ch, kernel_size=7, stride=stem_stride, padding=3, bias=False),
            nn.BatchNorm2d(ch),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(kernel_size=3, stride=2, padding=1),
        ]
        body = []
        for i, layers in enumerate(config.block_layers):
            body.append(_DenseBlock(ch, config.growth_rate, layers))
            ch += config.growth_rate * layers
            if i < len(config.block_layers) - 1:
                body.append(_Transition(ch, ch // 2))
                ch //= 2
        body.append(nn.BatchNorm2d(ch))
        self.features = nn.Sequential(*stem, *body)
        self.head = nn.Linear(ch, config.num_labels)

    def extract(self, x):
        feat = torch.relu(self.features(x))
        return feat.mean(dim=(2, 3))

    def forward(self, x):
        return torch.sigmoid(self.head(self.extract(x)))


def build_classifier(config, seed=0):
    """Build a classifier with deterministic initial parameters for a seed."""
    config.validate()
    torch.manual_seed(seed)
    return DenseClassifier(config)


@dataclass
class ClsCheckpoint:
    config: ClsModelConfig
    state_dict: dict
    history: list = field(default_factory=list)


def _clamped_bce(pred, target, eps=metrics.BCE_EPS):
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def _stack_batch(data, indices, flip_p=0.0, rng=None):
    images, labels = [], []
    for i in indices:
        img, lab = data[i]
        img = np.asarray(img, dtype=np.float32)
        if flip_p > 0.0:
            img, lab = random_hflip(img, lab, flip_p, rng)
        images.append(img)
        labels.append(np.asarray(lab, dtype=np.float32))
    return (torch.from_numpy(np.stack(images)),
            torch.from_numpy(np.stack(labels)))


def _pass_metrics(model, data, indices, batch_size):
    """Sample-weighted mean loss and rounded accuracy, no updates."""
    model.eval()
    total_loss = 0.0
    total_acc = 0.0
    with torch.no_grad():
        for start in range(0, len(indices), batch_size):
            batch = indices[start:start + batch_size]
            x, y = _stack_batch(data, batch)
            pred = model(x)
            for k in range(len(batch)):
                total_loss += _clamped_bce(pred[k], y[k]).item()
                total_acc += metrics.rounded_accuracy(pred[k].numpy(), y[k].numpy())
    n = len(indices)
    return total_loss / n, total_acc / n


def train_classifier(model, data, config, split, seed=0):
    """BCE + Adam training over the split's train partition.

    Each epoch runs one shuffled training pass with random horizontal
    flips, then a validation pass; both phases log sample-weighted loss
    and rounded accuracy. Returns a ClsCheckpoint with full history.
    """
    config.validate()
    train_idx = list(split.train)
    val_idx = list(split.val)
    if not train_idx:
        raise ValueError("training partition is empty")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history = []
    for epoch in range(1, config.epochs + 1):
        # lr 0 must be fully inert: keep norm statistics frozen as well
        model.train(config.learning_rate > 0)
        order = [train_idx[i] for i in rng.permutation(len(train_idx))]
        for batch_num, start in enumerate(range(0, len(order), config.batch_size)):
            batch = order[start:start + config.batch_size]
            x, y = _stack_batch(data, batch, config.flip_probability, rng)
            optimizer.zero_grad()
            loss = _clamped_bce(model(x), y)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {batch_num}")
            loss.backward()
            optimizer.step()
        for phase, idx in (("train", train_idx), ("val", val_idx)):
            if not idx:
                continue
            loss, acc = _pass_metrics(model, data, idx, config.batch_size)
            history.append(MetricsRecord(epoch, phase, loss, acc))
    return ClsCheckpoint(config=config, state_dict=model.state_dict(),
                         history=history)


def _model_from_checkpoint(checkpoint):
    model = DenseClassifier(checkpoint.config)
    model.load_state_dict(checkpoint.state_dict)
    model.eval()
    return model


def evaluate(checkpoint, data, indices=None):
    """Mean BCE loss and rounded accuracy over a sample stream."""
    if indices is None:
        indices = list(range(len(data)))
    if not indices:
        raise ValueError("evaluation data is empty")
    model = _model_from_checkpoint(checkpoint)
    loss, acc = _pass_metrics(model, data, list(indices), checkpoint.config.batch_size)
    return MetricsRecord(epoch=0, phase="test", loss=loss, accuracy=acc)


def extract_features(checkpoint, image):
    """Pooled backbone features for one image; deterministic for fixed weights."""
    model = _model_from_checkpoint(checkpoint)
    arr = np.asarray(image, dtype=np.float32)
    expected = (3,) + tuple(checkpoint.config.input_size)
    if arr.shape != expected:
        raise ValueError(f"expected image shape {expected}, got {arr.shape}")
    with torch.no_grad():
        feat = model.extract(torch.from_numpy(arr)[None])
    return feat[0].numpy()


class FusionHead(nn.Module):
    """Late-fusion head: concatenated features -> 14 sigmoid scores."""

    def __init__(self, feature_lengths):
        super().__init__()
        self.feature_lengths = tuple(feature_lengths)
        self.linear = nn.Linear(sum(feature_lengths), NUM_LABELS)

    def forward(self, x):
        return torch.sigmoid(self.linear(x))


def build_fusion_head(original_length, overlay_length, seed=0):
    torch.manual_seed(seed)
    return FusionHead((original_length, overlay_length))


def fuse_predict(original_features, overlay_features, fusion_head):
    """Predict 14 scores from the two streams' concatenated features."""
    f1 = np.asarray(original_features, dtype=np.float32)
    f2 = np.asarray(overlay_features, dtype=np.float32)
    expected = fusion_head.feature_lengths
    if (f1.shape, f2.shape) != ((expected[0],), (expected[1],)):
        raise ValueError(
            f"feature lengths {(f1.shape, f2.shape)} do not match head arity {expected}")
    with torch.no_grad():
        out = fusion_head(torch.from_numpy(np.concatenate([f1, f2]))[None])
    return out[0].numpy()


def save_cls_checkpoint(checkpoint, path):
    cfg = asdict(checkpoint.config)
    save_checkpoint(path, cfg, checkpoint.state_dict, checkpoint.history)


def load_cls_checkpoint(path):
    config_dict, state_dict, history = load_checkpoint(path)
    config_dict["input_size"] = tuple(config_dict["input_size"])
    config_dict["block_layers"] = tuple(config_dict["block_layers"])
    return ClsCheckpoint(config=ClsModelConfig(**config_dict),
                         state_dict=state_dict, history=history)
