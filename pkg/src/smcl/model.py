"""Backbones with a classification head and an L2-normalized projection head.

The forward pass runs one backbone sweep over the concatenation of all views
of all sources; logits come from a linear head on the backbone feature and
contrastive features from a 2-layer MLP projector, unit-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PROJECTION_DIM = 128


class ShapeMismatchError(ValueError):
    """Views passed to the model disagree in shape."""


def conv3x3(in_planes, out_planes, stride=1):
    return nn.Conv2d(in_planes, out_planes, kernel_size=3, stride=stride, padding=1, bias=False)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = conv3x3(in_planes, planes, stride)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = conv3x3(planes, planes)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        out = out + self.shortcut(x)
        return F.relu(out)


class CifarResNet(nn.Module):
    """Pre-pool ResNet for 32x32 inputs; depth = 6n + 2 with n blocks per stage."""

    def __init__(self, blocks_per_stage=5):
        super().__init__()
        self.in_planes = 16
        self.conv1 = conv3x3(3, 16)
        self.bn1 = nn.BatchNorm2d(16)
        self.layer1 = self._make_stage(16, blocks_per_stage, stride=1)
        self.layer2 = self._make_stage(32, blocks_per_stage, stride=2)
        self.layer3 = self._make_stage(64, blocks_per_stage, stride=2)
        self.feature_dim = 64

    def _make_stage(self, planes, num_blocks, stride):
        strides = [stride] + [1] * (num_blocks - 1)
        layers = []
        for s in strides:
            layers.append(BasicBlock(self.in_planes, planes, s))
            self.in_planes = planes
        return nn.Sequential(*layers)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layer1(out)
        out = self.layer2(out)
        out = self.layer3(out)
        out = F.adaptive_avg_pool2d(out, 1)
        return out.flatten(1)

    def last_conv_block(self):
        return self.layer3[-1]


class TinyConvNet(nn.Module):
    """Four conv blocks for minute-scale tests; same interface as the ResNet."""

    def __init__(self):
        super().__init__()
        self.block1 = nn.Sequential(conv3x3(3, 16), nn.BatchNorm2d(16), nn.ReLU(inplace=True))
        self.block2 = nn.Sequential(conv3x3(16, 32, stride=2), nn.BatchNorm2d(32), nn.ReLU(inplace=True))
        self.block3 = nn.Sequential(conv3x3(32, 64, stride=2), nn.BatchNorm2d(64), nn.ReLU(inplace=True))
        self.block4 = nn.Sequential(conv3x3(64, 64), nn.BatchNorm2d(64), nn.ReLU(inplace=True))
        self.feature_dim = 64

    def forward(self, x):
        out = self.block1(x)
        out = self.block2(out)
        out = self.block3(out)
        out = self.block4(out)
        out = F.adaptive_avg_pool2d(out, 1)
        return out.flatten(1)

    def last_conv_block(self):
        return self.block4


BACKBONES = {
    "resnet32": lambda: CifarResNet(blocks_per_stage=5),
    "tiny4": TinyConvNet,
}


def _init_weights(module):
    if isinstance(module, nn.Conv2d):
        nn.init.kaiming_normal_(module.weight, mode="fan_out", nonlinearity="relu")
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.constant_(module.weight, 1.0)
        nn.init.constant_(module.bias, 0.0)
    elif isinstance(module, nn.Linear):
        nn.init.normal_(module.weight, std=0.01)
        nn.init.constant_(module.bias, 0.0)


class SmclNet(nn.Module):
    """Backbone + linear classifier on the pre-projection feature + projector.

    forward returns (logits, features); features are the projector output,
    L2-normalized to unit length. The classifier never sees the projection.
    """

    def __init__(self, backbone="resnet32", num_classes=10, proj_dim=PROJECTION_DIM):
        super().__init__()
        if backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {backbone!r}; have {sorted(BACKBONES)}")
        self.backbone_name = backbone
        self.num_classes = int(num_classes)
        self.proj_dim = int(proj_dim)
        self.backbone = BACKBONES[backbone]()
        width = self.backbone.feature_dim
        self.classifier = nn.Linear(width, self.num_classes)
        self.projector = nn.Sequential(
            nn.Linear(width, width),
            nn.ReLU(inplace=True),
            nn.Linear(width, self.proj_dim),
        )
        self.apply(_init_weights)

    def forward(self, x):
        h = self.backbone(x)
        logits = self.classifier(h)
        features = F.normalize(self.projector(h), dim=1)
        return logits, features

    def cam_target(self):
        """Module whose activations feed the class activation map."""
        return self.backbone.last_conv_block()


@dataclass
class ViewBatch:
    """Per-source views stacked view-major: (V, N, C, H, W).

    Five-view batches order views as [x1, x2, xt1, xt2, xm] with target
    labels and per-sample masked-area fractions; two-view batches carry only
    the source views and labels.
    """

    views: torch.Tensor
    source_labels: torch.Tensor
    target_labels: torch.Tensor | None = None
    area: torch.Tensor | None = None

    def __post_init__(self):
        if self.views.ndim != 5:
            raise ShapeMismatchError(f"views must be (V, N, C, H, W), got {tuple(self.views.shape)}")
        v, n = self.views.shape[0], self.views.shape[1]
        if v == 5:
            if self.target_labels is None or self.area is None:
                raise ShapeMismatchError("five-view batches need target labels and areas")
            if not (self.target_labels.shape[0] == n and self.area.shape[0] == n):
                raise ShapeMismatchError("labels/areas do not match batch size")
            a = self.area
            if bool((a < 0).any()) or bool((a > 0.9 + 1e-9).any()):
                raise ShapeMismatchError("masked-area fraction outside [0, 0.9]")
        elif v != 2:
            raise ShapeMismatchError(f"expected 2 or 5 views, got {v}")
        if self.source_labels.shape[0] != n:
            raise ShapeMismatchError("labels do not match batch size")

    @property
    def num_views(self):
        return int(self.views.shape[0])

    @property
    def num_sources(self):
        return int(self.views.shape[1])

    def flat(self):
        """Concatenate views view-major: rows [v*N + i] = view v of source i."""
        v, n, c, h, w = self.views.shape
        return self.views.reshape(v * n, c, h, w)


@dataclass
class ModelOutput:
    """Row-aligned logits and unit-norm features for V views of N sources."""

    logits: torch.Tensor
    features: torch.Tensor
    num_views: int
    num_sources: int

    def view(self, v):
        """(logits, features) rows of view v, each (N, .)."""
        n = self.num_sources
        sl = slice(v * n, (v + 1) * n)
        return self.logits[sl], self.features[sl]


def forward_views(model, batch):
    """One backbone pass over all views of all sources, view-major rows.

    batch is a ViewBatch or a (V, N, C, H, W) tensor. Training vs evaluation
    mode follows the model's current mode flag.
    """
    views = batch.views if isinstance(batch, ViewBatch) else batch
    if views.ndim != 5:
        raise ShapeMismatchError(f"views must be (V, N, C, H, W), got {tuple(views.shape)}")
    v, n = int(views.shape[0]), int(views.shape[1])
    if n == 0:
        raise ShapeMismatchError("empty batch")
    flat = views.reshape(v * n, *views.shape[2:])
    logits, features = model(flat)
    return ModelOutput(logits=logits, features=features, num_views=v, num_sources=n)


def predict(model, images, batch_size=512):
    """Argmax class labels and softmax confidences; ties go to the lowest index."""
    model.eval()
    labels, confs = [], []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            logits, _ = model(images[i : i + batch_size])
            probs = torch.softmax(logits, dim=1).numpy()
            pred = logits.numpy().argmax(axis=1)  # numpy argmax: first max wins
            labels.append(pred)
            confs.append(probs[np.arange(len(pred)), pred])
    return np.concatenate(labels), np.concatenate(confs)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model, epoch, config_fingerprint="", optimizer=None, rng_state=None, extra=None):
    """Write architecture id, parameters, config fingerprint, and epoch counter.

    Round-trips are bit-exact at the content level: every tensor and field
    loads back bitwise-identical (the container format is not byte-stable).
    """
    payload = {
        "arch": model.backbone_name,
        "num_classes": model.num_classes,
        "proj_dim": model.proj_dim,
        "epoch": int(epoch),
        "config_fingerprint": config_fingerprint,
        "state_dict": model.state_dict(),
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    if rng_state is not None:
        payload["rng_state"] = rng_state
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    return torch.load(path, map_location="cpu", weights_only=False)


def model_from_checkpoint(ckpt):
    """Rebuild the network a checkpoint describes and load its parameters."""
    if isinstance(ckpt, (str, bytes)) or hasattr(ckpt, "__fspath__"):
        ckpt = load_checkpoint(ckpt)
    model = SmclNet(ckpt["arch"], ckpt["num_classes"], ckpt.get("proj_dim", PROJECTION_DIM))
    model.load_state_dict(ckpt["state_dict"])
    return model
