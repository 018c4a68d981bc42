"""Shared builders for tests."""

import numpy as np
import torch

from smcl import data
from smcl.trainer import TrainConfig


def unit_features(rng, n, d):
    """Random float64 unit-norm feature rows."""
    f = rng.standard_normal((n, d))
    f = f / np.linalg.norm(f, axis=1, keepdims=True)
    return torch.from_numpy(f)


def random_logits(rng, n, k, scale=3.0):
    return torch.from_numpy(rng.standard_normal((n, k)) * scale)


def tiny_bundle(num_classes=4, per_class=20, image_size=12, rho=4.0, seed=3,
                test_per_class=5, with_test=True):
    """Small synthetic long-tailed bundle for trainer/CLI tests."""
    base = data.make_synthetic(num_classes, per_class, image_size, seed=seed)
    test = data.make_synthetic(num_classes, test_per_class, image_size, seed=seed + 1) if with_test else None
    spec = data.LongTailSpec(num_classes=num_classes, rho=rho, n_max=per_class)
    return data.build_bundle(base, test, spec, seed=seed + 2)


def tiny_config(**overrides):
    """Fast-running config; DRW and masking stay off unless overridden."""
    base = dict(
        epochs=2,
        batch_size=16,
        lr_initial=0.05,
        lr_schedule="step:100:0.1",
        momentum=0.9,
        weight_decay=1e-4,
        drw_beta=0.999,
        mask_probability=0.0,
        alpha=1.0,
        tau=0.1,
        mu=0.3,
        mask_mode="saliency",
        seed=7,
        backbone="tiny4",
        augmentation="crop_flip",
        checkpoint_interval=1,
    )
    base.update(overrides)
    base.setdefault("drw_start_epoch", base["epochs"])
    base.setdefault("mask_start_epoch", base["epochs"])
    return TrainConfig(**base).validate()


class ForcedBetaRng:
    """Wraps a real generator but serves queued values for beta draws."""

    def __init__(self, betas=(), seed=0):
        self._betas = list(betas)
        self._rng = np.random.default_rng(seed)

    def beta(self, a, b):
        if self._betas:
            return self._betas.pop(0)
        return self._rng.beta(a, b)

    def integers(self, *args, **kwargs):
        return self._rng.integers(*args, **kwargs)

    def random(self, *args, **kwargs):
        return self._rng.random(*args, **kwargs)
