"""Grouped accuracy reports and gradient-weighted class activation maps.

Groups are defined by TRAINING-set class counts: many (n > 100), med
(20 <= n <= 100, closed interval), few (n < 20). A group with no member
classes is absent from the report rather than reported as zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import augment as aug
from .model import predict

GROUP_ORDER = ("many", "med", "few")
GROUP_RULES = {"many": "n > 100", "med": "20 <= n <= 100", "few": "n < 20"}


def class_group(count):
    if count > 100:
        return "many"
    if count >= 20:
        return "med"
    return "few"


def class_groups(train_counts):
    """Partition class indices by training count. Every class lands in one group."""
    groups = {name: [] for name in GROUP_ORDER}
    for k, n in enumerate(np.asarray(train_counts)):
        groups[class_group(int(n))].append(k)
    return groups


@dataclass
class EvalReport:
    """Overall, per-group, and per-class accuracies with the raw confusion.

    Accuracies are percents. group_acc holds only non-empty groups; per-class
    entries are None for classes absent from the test set. group_def records
    the thresholds and member classes used.
    """

    overall_acc: float
    group_acc: dict
    per_class_acc: list
    confusion: np.ndarray
    group_def: dict = field(default_factory=dict)

    def to_json_dict(self):
        return {
            "overall_acc": self.overall_acc,
            "group_acc": self.group_acc,
            "per_class_acc": self.per_class_acc,
            "confusion": self.confusion.tolist(),
            "group_def": self.group_def,
        }

    def to_json(self):
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            overall_acc=d["overall_acc"],
            group_acc=dict(d["group_acc"]),
            per_class_acc=list(d["per_class_acc"]),
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            group_def=dict(d["group_def"]),
        )

    def text_table(self, name="model"):
        return format_accuracy_table([(name, self)])


def format_accuracy_table(named_reports):
    """Rows of All/Many/Med/Few percents, one line per report; dash = absent."""
    headers = ["run", "all"] + list(GROUP_ORDER)
    rows = []
    for name, rep in named_reports:
        cells = [name, f"{rep.overall_acc:.2f}"]
        for g in GROUP_ORDER:
            v = rep.group_acc.get(g)
            cells.append("-" if v is None else f"{v:.2f}")
        rows.append(cells)
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*headers), fmt.format(*["-" * w for w in widths])]
    lines += [fmt.format(*r) for r in rows]
    return "\n".join(lines) + "\n"


def confusion_matrix(y_true, y_pred, num_classes):
    """Counts[i, j] = samples of true class i predicted as class j."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    return conf


def report_from_confusion(conf, train_counts):
    """Build the grouped report from a confusion matrix and training counts."""
    conf = np.asarray(conf, dtype=np.int64)
    counts = np.asarray(train_counts, dtype=np.int64)
    k = conf.shape[0]
    if conf.shape != (k, k) or counts.shape[0] != k:
        raise ValueError("confusion matrix and training histogram disagree on K")
    total = conf.sum()
    if total == 0:
        raise ValueError("empty test set")
    overall = 100.0 * float(np.trace(conf)) / float(total)
    row_totals = conf.sum(axis=1)
    per_class = [
        (100.0 * float(conf[i, i]) / float(row_totals[i])) if row_totals[i] > 0 else None
        for i in range(k)
    ]
    groups = class_groups(counts)
    group_acc = {}
    group_def = {}
    for name in GROUP_ORDER:
        members = groups[name]
        group_def[name] = {"rule": GROUP_RULES[name], "classes": members}
        scored = [per_class[i] for i in members if per_class[i] is not None]
        if scored:  # empty group stays absent, not zero
            group_acc[name] = float(np.mean(scored))
    return EvalReport(
        overall_acc=overall,
        group_acc=group_acc,
        per_class_acc=per_class,
        confusion=conf,
        group_def=group_def,
    )


def test_tensor(dataset, channel_mean, channel_std):
    """Normalize a dataset's images into an NCHW float tensor, no augmentation."""
    x = dataset.images.astype(np.float32) / 255.0
    x = aug.normalize(x, channel_mean, channel_std)
    x = np.ascontiguousarray(x.transpose(0, 3, 1, 2))
    return torch.from_numpy(x)


def evaluate(model, test, train_hist, channel_mean, channel_std, batch_size=512):
    """Predict the test set and report grouped accuracies.

    Groups come from the TRAINING histogram; the test set is expected to be
    the balanced original split.
    """
    counts = np.asarray(getattr(train_hist, "counts", train_hist))
    images = test_tensor(test, channel_mean, channel_std)
    preds, _ = predict(model, images, batch_size=batch_size)
    conf = confusion_matrix(test.labels, preds, len(counts))
    return report_from_confusion(conf, counts)


# ---------------------------------------------------------------------------
# class activation maps
# ---------------------------------------------------------------------------


def cam(model, image, class_index):
    """Gradient-weighted activation map for one class, in [0, 1].

    image is a (C, H, W) tensor (normalized as in evaluation). Activations
    and gradients are taken at the last convolutional block; channel weights
    are spatial gradient means. An all-zero raw map skips normalization and
    comes back as zeros.
    """
    if image.ndim != 3:
        raise ValueError("cam expects a single (C, H, W) image")
    if not 0 <= class_index < model.num_classes:
        raise ValueError(f"class index {class_index} out of range")
    model.eval()
    target = model.cam_target()
    captured = {}

    def fwd_hook(_mod, _inp, out):
        captured["act"] = out

    handle = target.register_forward_hook(fwd_hook)
    try:
        x = image.unsqueeze(0).clone().requires_grad_(True)
        logits, _ = model(x)
        act = captured["act"]
        act.retain_grad()
        model.zero_grad()
        logits[0, class_index].backward()
        grads = act.grad
    finally:
        handle.remove()
        model.zero_grad()

    weights = grads.mean(dim=(2, 3), keepdim=True)
    raw = F.relu((weights * act).sum(dim=1, keepdim=True))
    raw = F.interpolate(raw, size=image.shape[1:], mode="bilinear", align_corners=False)
    raw = raw[0, 0].detach().numpy()
    peak = raw.max()
    if peak <= 0:
        return np.zeros_like(raw)
    lo = raw.min()
    if peak - lo <= 0:  # constant positive map; nothing to rescale
        return np.ones_like(raw)
    return (raw - lo) / (peak - lo)


def cam_overlay(image_uint8, heat, gain=0.6):
    """Blend a heat map over an RGB uint8 image for inspection dumps."""
    heat = np.clip(np.asarray(heat, dtype=np.float64), 0, 1)
    base = np.asarray(image_uint8, dtype=np.float64)
    if base.ndim == 2:
        base = np.repeat(base[..., None], 3, axis=2)
    color = np.zeros_like(base)
    color[..., 0] = 255.0 * heat  # red channel carries the heat
    out = (1 - gain) * base + gain * color
    return np.clip(out + 0.5, 0, 255).astype(np.uint8)
