"""Training schedule: view assembly, masking gate, SGD loop, checkpoints.

The loop follows the long-tail recipe: two-view CE + SupCon on sources until
mask_start_epoch, then five-view batches (source pair, sampled target pair,
masked third view) gated per batch by a Bernoulli draw. DRW class weights
switch on at drw_start_epoch and touch only the CE term. All randomness
derives from one root seed split into named streams (data, masking, gate,
model-init).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import torch
import yaml

from . import augment as aug
from .data import TargetSampler, effective_numbers
from .losses import (
    DrwWeights,
    NonFiniteLossError,
    combined,
    cross_entropy_rows,
    drw_weights,
    mixed_cross_entropy,
    mixed_supcon,
    supcon,
)
from .masking import MASK_MODES, mask_image
from .model import BACKBONES, SmclNet, ViewBatch, forward_views, save_checkpoint

FILL_POLICIES = ("mean", "zero")


class ConfigError(ValueError):
    """A training config key or value violates its contract."""


@dataclass
class TrainConfig:
    """Flat training configuration; defaults are the 200-epoch CIFAR recipe."""

    epochs: int = 200
    batch_size: int = 256
    lr_initial: float = 0.1
    lr_schedule: str = "step:160,180:0.1"
    momentum: float = 0.9
    weight_decay: float = 2e-4
    drw_start_epoch: int = 160
    drw_beta: float = 0.9999
    mask_start_epoch: int = 160
    mask_probability: float = 0.2
    alpha: float = 1.0
    area_cap: float = 0.9
    fill: str = "mean"
    tau: float = 0.1
    lambda_: float = 1.0
    mu: float = 0.3
    mask_mode: str = "saliency"
    strict_mixed_ce: bool = True
    seed: int = 0
    backbone: str = "resnet32"
    augmentation: str = "cifar"
    checkpoint_interval: int = 50

    def validate(self):
        c = self
        checks = [
            (c.epochs >= 0, "epochs must be >= 0"),
            (c.batch_size >= 1, "batch_size must be >= 1"),
            (c.lr_initial > 0, "lr_initial must be > 0"),
            (0 <= c.momentum < 1, "momentum must lie in [0, 1)"),
            (c.weight_decay >= 0, "weight_decay must be >= 0"),
            (0 <= c.drw_start_epoch <= c.epochs, "need 0 <= drw_start_epoch <= epochs"),
            (0 <= c.drw_beta < 1, "drw_beta must lie in [0, 1)"),
            (0 <= c.mask_start_epoch <= c.epochs, "need 0 <= mask_start_epoch <= epochs"),
            (0 <= c.mask_probability <= 1, "mask_probability must lie in [0, 1]"),
            (c.alpha > 0, "alpha must be > 0"),
            (0 < c.area_cap <= 1, "area_cap must lie in (0, 1]"),
            (c.fill in FILL_POLICIES, f"fill must be one of {FILL_POLICIES}"),
            (c.tau > 0, "tau must be > 0"),
            (c.lambda_ >= 0, "lambda must be >= 0"),
            (c.mu >= 0, "mu must be >= 0"),
            (c.mask_mode in MASK_MODES, f"mask_mode must be one of {MASK_MODES}"),
            (isinstance(c.strict_mixed_ce, bool), "strict_mixed_ce must be a boolean"),
            (c.backbone in BACKBONES, f"backbone must be one of {sorted(BACKBONES)}"),
            (c.augmentation in aug.POLICIES, f"augmentation must be one of {aug.POLICIES}"),
            (c.checkpoint_interval >= 1, "checkpoint_interval must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        parse_lr_schedule(self.lr_schedule)
        return self


# config files spell the attribute lambda_ as plain "lambda"
_KEY_TO_ATTR = {"lambda": "lambda_"}
_ATTR_TO_KEY = {"lambda_": "lambda"}


def config_to_dict(cfg):
    d = dataclasses.asdict(cfg)
    return {_ATTR_TO_KEY.get(k, k): v for k, v in d.items()}


def config_from_dict(values, base=None):
    """Build a TrainConfig from a flat mapping; unknown keys are errors."""
    cfg = dataclasses.replace(base) if base is not None else TrainConfig()
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = []
    for key, value in values.items():
        attr = _KEY_TO_ATTR.get(key, key)
        if attr not in known:
            unknown.append(key)
            continue
        f = next(f for f in dataclasses.fields(TrainConfig) if f.name == attr)
        try:
            if f.type == "bool" or isinstance(getattr(cfg, attr), bool):
                if isinstance(value, str):
                    if value.lower() in ("true", "1", "yes"):
                        value = True
                    elif value.lower() in ("false", "0", "no"):
                        value = False
                    else:
                        raise ValueError(value)
                value = bool(value)
            elif isinstance(getattr(cfg, attr), int):
                value = int(value)
            elif isinstance(getattr(cfg, attr), float):
                value = float(value)
            else:
                value = str(value)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for config key {key!r}: {value!r}")
        setattr(cfg, attr, value)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return cfg.validate()


def load_config(path, base=None):
    """Read a flat key-value config document (YAML or JSON)."""
    text = Path(path).read_text()
    values = yaml.safe_load(text)
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must hold a flat key-value mapping")
    return config_from_dict(values, base=base)


def config_fingerprint(cfg):
    """Stable short hash of the resolved config."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# schedule pieces
# ---------------------------------------------------------------------------


def parse_lr_schedule(spec):
    """"step:<e1,e2,...>:<factor>" or "cosine" -> (kind, milestones, factor)."""
    if spec == "cosine":
        return ("cosine", (), 1.0)
    if spec.startswith("step:"):
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError(f"bad step schedule {spec!r}, want step:<epochs>:<factor>")
        try:
            milestones = tuple(int(p) for p in parts[1].split(",") if p)
            factor = float(parts[2])
        except ValueError:
            raise ConfigError(f"bad step schedule {spec!r}")
        if any(m < 0 for m in milestones) or milestones != tuple(sorted(milestones)):
            raise ConfigError(f"step milestones must be sorted and >= 0: {spec!r}")
        if not 0 < factor <= 1:
            raise ConfigError(f"step factor must lie in (0, 1]: {spec!r}")
        return ("step", milestones, factor)
    raise ConfigError(f"unknown lr schedule {spec!r}")


def learning_rate(cfg, epoch):
    """Learning rate in force during the given epoch."""
    kind, milestones, factor = parse_lr_schedule(cfg.lr_schedule)
    if kind == "cosine":
        span = max(1, cfg.epochs)
        return 0.5 * cfg.lr_initial * (1.0 + math.cos(math.pi * epoch / span))
    drops = sum(1 for m in milestones if epoch >= m)
    return cfg.lr_initial * factor**drops


def masking_gate(epoch, cfg, rng):
    """Per-batch Bernoulli(p_mask) gate; always off before mask_start_epoch."""
    if epoch < cfg.mask_start_epoch:
        return False
    return bool(rng.random() < cfg.mask_probability)


def rng_streams(seed):
    """Split a root seed into the named streams all trainer randomness uses."""
    root = np.random.SeedSequence(seed)
    data_ss, mask_ss, gate_ss, init_ss = root.spawn(4)
    return SimpleNamespace(
        data=np.random.default_rng(data_ss),
        masking=np.random.default_rng(mask_ss),
        gate=np.random.default_rng(gate_ss),
        init_seed=int(init_ss.generate_state(1)[0]),
    )


def make_model(cfg, num_classes):
    """Construct the network deterministically from the model-init stream."""
    torch.manual_seed(rng_streams(cfg.seed).init_seed)
    return SmclNet(cfg.backbone, num_classes)


def epoch_batches(num_samples, batch_size, rng):
    """Shuffled epoch order split into batch index arrays."""
    perm = rng.permutation(num_samples)
    return [perm[i : i + batch_size] for i in range(0, num_samples, batch_size)]


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------


def _fill_values(cfg, bundle):
    if cfg.fill == "mean":
        return bundle.channel_mean.astype(np.float32)
    return np.zeros_like(bundle.channel_mean, dtype=np.float32)


def _stack_views(view_lists, mean, std):
    views = np.stack([np.stack(v) for v in view_lists])  # (V, N, H, W, C)
    views = aug.normalize(views, mean, std)
    views = views.transpose(0, 1, 4, 2, 3)  # to (V, N, C, H, W)
    return torch.from_numpy(np.ascontiguousarray(views)).float()


def assemble_two_views(train, idx, cfg, mean, std, rng):
    """Two augmented views per source sample; no targets, no masking."""
    x1s, x2s = [], []
    for i in idx:
        x = train.images[i]
        x1s.append(aug.augment(x, cfg.augmentation, rng))
        x2s.append(aug.augment(x, cfg.augmentation, rng))
    views = _stack_views([x1s, x2s], mean, std)
    labels = torch.from_numpy(train.labels[idx])
    return ViewBatch(views=views, source_labels=labels)


def assemble_five_views(train, idx, sampler, cfg, bundle, rng_data, rng_mask, gate_on):
    """Source pair, minor-weighted target pair, and the masked third view.

    With the gate off, A is forced to 0 and x_m is the unmasked third view,
    which collapses both mixed losses to their source-label form.
    """
    mean, std = bundle.channel_mean, bundle.channel_std
    fill = _fill_values(cfg, bundle)
    x1s, x2s, xt1s, xt2s, xms = [], [], [], [], []
    target_labels = np.empty(len(idx), dtype=np.int64)
    areas = np.zeros(len(idx), dtype=np.float64)
    for row, i in enumerate(idx):
        x = train.images[i]
        x1s.append(aug.augment(x, cfg.augmentation, rng_data))
        x2s.append(aug.augment(x, cfg.augmentation, rng_data))
        t = sampler.draw(rng_data)
        xt = train.images[t]
        target_labels[row] = train.labels[t]
        xt1s.append(aug.augment(xt, cfg.augmentation, rng_data))
        xt2s.append(aug.augment(xt, cfg.augmentation, rng_data))
        x3 = aug.augment(x, cfg.augmentation, rng_data)
        if gate_on:
            xm, spec = mask_image(
                x3, cfg.alpha, rng_mask, mode=cfg.mask_mode, fill=fill, area_cap=cfg.area_cap
            )
            areas[row] = spec.area_fraction
            xms.append(xm)
        else:
            xms.append(x3)
    views = _stack_views([x1s, x2s, xt1s, xt2s, xms], mean, std)
    return ViewBatch(
        views=views,
        source_labels=torch.from_numpy(train.labels[idx]),
        target_labels=torch.from_numpy(target_labels),
        area=torch.from_numpy(areas),
    )


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: SmclNet
    completed_epochs: int
    metrics_path: Path
    checkpoint_path: Path
    history: list = field(default_factory=list)
    final_eval: object = None


def _metrics_row(fh, row):
    fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
    fh.flush()


def _rng_state(streams):
    return {
        "data": streams.data.bit_generator.state,
        "masking": streams.masking.bit_generator.state,
        "gate": streams.gate.bit_generator.state,
        "torch": torch.get_rng_state(),
    }


def _restore_rng(streams, state):
    streams.data.bit_generator.state = state["data"]
    streams.masking.bit_generator.state = state["masking"]
    streams.gate.bit_generator.state = state["gate"]
    torch.set_rng_state(state["torch"])


def _evaluate_epoch(model, bundle):
    from .evaluation import evaluate

    if bundle.test is None or len(bundle.test) == 0:
        return None
    report = evaluate(model, bundle.test, bundle.histogram, bundle.channel_mean, bundle.channel_std)
    return report


def train(cfg, bundle, run_dir, resume=False, stop_after=None):
    """Run the full schedule; writes metrics.jsonl and checkpoint.pt.

    Identical (cfg, bundle) reruns produce byte-identical metrics logs. A
    non-finite loss aborts with the last saved checkpoint left in place and
    NonFiniteLossError raised after an abort row is logged. stop_after caps
    the number of completed epochs for bounded sessions; a checkpoint is
    always written at the stop point so resume=True continues seamlessly.
    """
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / "metrics.jsonl"
    ckpt_path = run_dir / "checkpoint.pt"
    fingerprint = config_fingerprint(cfg)

    num_classes = bundle.histogram.num_classes
    streams = rng_streams(cfg.seed)
    torch.manual_seed(streams.init_seed)
    model = SmclNet(cfg.backbone, num_classes)
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=cfg.lr_initial,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )

    start_epoch = 0
    history = []
    if resume and ckpt_path.exists():
        ckpt = torch.load(ckpt_path, map_location="cpu", weights_only=False)
        if ckpt.get("config_fingerprint") not in ("", fingerprint):
            raise ConfigError("checkpoint belongs to a different config fingerprint")
        model.load_state_dict(ckpt["state_dict"])
        if "optimizer" in ckpt:
            optimizer.load_state_dict(ckpt["optimizer"])
        if "rng_state" in ckpt:
            _restore_rng(streams, ckpt["rng_state"])
        start_epoch = int(ckpt["epoch"])
        history = list(ckpt.get("extra", {}).get("history", []))
        if metrics_path.exists():
            kept = [
                line
                for line in metrics_path.read_text().splitlines()
                if json.loads(line).get("epoch", -1) < start_epoch
            ]
            metrics_path.write_text("".join(l + "\n" for l in kept))
    else:
        metrics_path.write_text("")
        save_checkpoint(
            ckpt_path, model, epoch=0, config_fingerprint=fingerprint,
            optimizer=optimizer, rng_state=_rng_state(streams),
        )

    end_epoch = cfg.epochs
    if stop_after is not None:
        end_epoch = max(start_epoch, min(cfg.epochs, int(stop_after)))

    if cfg.epochs == 0 or start_epoch >= end_epoch:
        return TrainResult(model, start_epoch, metrics_path, ckpt_path, history,
                           _evaluate_epoch(model, bundle))

    sampler = TargetSampler(effective_numbers(bundle.histogram), bundle.train.class_indices())
    drw_full = drw_weights(bundle.histogram, cfg.drw_beta)
    mean, std = bundle.channel_mean, bundle.channel_std

    final_eval = None
    with open(metrics_path, "a") as fh:
        for epoch in range(start_epoch, end_epoch):
            lr = learning_rate(cfg, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            drw = drw_full if epoch >= cfg.drw_start_epoch else None
            in_mask_phase = cfg.mask_probability > 0 and epoch >= cfg.mask_start_epoch

            model.train()
            sums = {"mce": 0.0, "msc": 0.0, "total": 0.0, "mean_area": 0.0}
            batches = epoch_batches(len(bundle.train), cfg.batch_size, streams.data)
            for step, idx in enumerate(batches):
                try:
                    if in_mask_phase:
                        gate_on = masking_gate(epoch, cfg, streams.gate)
                        vb = assemble_five_views(
                            bundle.train, idx, sampler, cfg, bundle,
                            streams.data, streams.masking, gate_on,
                        )
                        out = forward_views(model, vb)
                        o1, f1 = out.view(0)
                        o2, f2 = out.view(1)
                        ot1, ft1 = out.view(2)
                        ot2, ft2 = out.view(3)
                        om, fm = out.view(4)
                        y, yt, area = vb.source_labels, vb.target_labels, vb.area
                        mce = mixed_cross_entropy(
                            o1, o2, om, ot1, ot2, y, yt, area,
                            drw=drw, strict=cfg.strict_mixed_ce,
                        )
                        msc = mixed_supcon(f1, f2, fm, ft1, ft2, y, yt, area, cfg.tau)
                        mean_area = float(area.mean())
                    else:
                        vb = assemble_two_views(bundle.train, idx, cfg, mean, std, streams.data)
                        out = forward_views(model, vb)
                        y = vb.source_labels
                        labels2 = torch.cat([y, y])
                        w = drw.weights.to(out.logits.dtype) if drw is not None else None
                        mce = cross_entropy_rows(out.logits, labels2, w).mean()
                        msc = supcon(out.features, labels2, cfg.tau)
                        mean_area = 0.0
                    breakdown = combined(mce, msc, cfg.lambda_, cfg.mu, cfg.tau)
                    optimizer.zero_grad()
                    breakdown.total.backward()
                    optimizer.step()
                    if not all(
                        bool(torch.isfinite(p).all()) for p in model.parameters()
                    ):
                        raise NonFiniteLossError("parameters became non-finite after update")
                except NonFiniteLossError as err:
                    _metrics_row(fh, {"kind": "abort", "epoch": epoch, "step": step,
                                      "error": str(err)})
                    raise
                vals = breakdown.as_floats()
                _metrics_row(fh, {
                    "kind": "step", "epoch": epoch, "step": step,
                    "mce": vals["mce"], "msc": vals["msc"], "total": vals["total"],
                    "mean_area": mean_area,
                })
                for key, val in (("mce", vals["mce"]), ("msc", vals["msc"]),
                                 ("total", vals["total"]), ("mean_area", mean_area)):
                    sums[key] += val

            steps = max(1, len(batches))
            report = _evaluate_epoch(model, bundle)
            final_eval = report
            epoch_row = {
                "kind": "epoch",
                "epoch": epoch,
                "lr": lr,
                "mce": sums["mce"] / steps,
                "msc": sums["msc"] / steps,
                "total": sums["total"] / steps,
                "mean_area": sums["mean_area"] / steps,
                "drw_active": drw is not None,
                "masking_phase": in_mask_phase,
                "test_accuracy": None if report is None else report.overall_acc,
                "group_accuracy": None if report is None else report.group_acc,
            }
            _metrics_row(fh, epoch_row)
            history.append(epoch_row)

            done = epoch + 1
            if done % cfg.checkpoint_interval == 0 or done == end_epoch:
                save_checkpoint(
                    ckpt_path, model, epoch=done, config_fingerprint=fingerprint,
                    optimizer=optimizer, rng_state=_rng_state(streams),
                    extra={"history": history},
                )

    return TrainResult(model, end_epoch, metrics_path, ckpt_path, history, final_eval)
