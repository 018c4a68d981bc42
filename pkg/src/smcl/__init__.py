"""Saliency-masked contrastive learning for long-tailed image classification."""

__version__ = "0.1.0"

from . import augment, data, evaluation, losses, masking, model, reporting, trainer

__all__ = [
    "augment",
    "data",
    "evaluation",
    "losses",
    "masking",
    "model",
    "reporting",
    "trainer",
]
