"""Image augmentation policies, keyed by id and driven by an explicit rng.

All transforms operate on float HWC arrays in [0, 1] before normalization.
Policies: "none" (identity, for deterministic tests), "crop_flip" (pad-crop
and horizontal flip), "cifar" (crop/flip plus the color-distortion stack and
cutout).
"""

from __future__ import annotations

import numpy as np

POLICIES = ("none", "crop_flip", "cifar")

# RGB <-> YIQ for hue rotation
_RGB_TO_YIQ = np.array(
    [[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]]
)
_YIQ_TO_RGB = np.array(
    [[1.0, 0.956, 0.621], [1.0, -0.272, -0.647], [1.0, -1.106, 1.703]]
)


def to_float(image):
    """uint8 HWC -> float32 in [0, 1]; float input passes through as float32."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32)


def pad_crop(image, rng, pad=4):
    """Zero-pad by `pad` on each side, then crop back at a random offset."""
    h, w = image.shape[:2]
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode="constant")
    top = int(rng.integers(2 * pad + 1))
    left = int(rng.integers(2 * pad + 1))
    return padded[top : top + h, left : left + w]


def random_hflip(image, rng, p=0.5):
    if rng.random() < p:
        return image[:, ::-1]
    return image


def _luma(image):
    return 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]


def adjust_brightness(image, factor):
    return np.clip(image * factor, 0.0, 1.0)


def adjust_contrast(image, factor):
    mean = _luma(image).mean()
    return np.clip((image - mean) * factor + mean, 0.0, 1.0)


def adjust_saturation(image, factor):
    gray = _luma(image)[..., None]
    return np.clip(gray + (image - gray) * factor, 0.0, 1.0)


def adjust_hue(image, shift):
    """Rotate the chroma plane; shift in turns, sensible range [-0.5, 0.5]."""
    yiq = image @ _RGB_TO_YIQ.T
    angle = 2.0 * np.pi * shift
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    i, q = yiq[..., 1].copy(), yiq[..., 2].copy()
    yiq[..., 1] = cos_a * i - sin_a * q
    yiq[..., 2] = sin_a * i + cos_a * q
    return np.clip(yiq @ _YIQ_TO_RGB.T, 0.0, 1.0).astype(image.dtype)


def color_jitter(image, rng, strength=(0.4, 0.4, 0.4, 0.1), p=0.8):
    """Brightness/contrast/saturation/hue jitter, applied with probability p."""
    if rng.random() >= p:
        return image
    b, c, s, h = strength
    image = adjust_brightness(image, 1.0 + rng.uniform(-b, b))
    image = adjust_contrast(image, 1.0 + rng.uniform(-c, c))
    image = adjust_saturation(image, 1.0 + rng.uniform(-s, s))
    image = adjust_hue(image, rng.uniform(-h, h))
    return image.astype(np.float32)


def random_grayscale(image, rng, p=0.2):
    if rng.random() < p:
        gray = _luma(image).astype(np.float32)
        return np.repeat(gray[..., None], image.shape[2], axis=2)
    return image


def cutout(image, rng, length=None):
    """Zero a random square of the given side (default half the image side)."""
    h, w = image.shape[:2]
    if length is None:
        length = h // 2
    cy = int(rng.integers(h))
    cx = int(rng.integers(w))
    y0, y1 = max(0, cy - length // 2), min(h, cy - length // 2 + length)
    x0, x1 = max(0, cx - length // 2), min(w, cx - length // 2 + length)
    out = image.copy()
    out[y0:y1, x0:x1] = 0.0
    return out


def augment(image, policy, rng):
    """Apply a named policy to one image. Returns float32 HWC in [0, 1]."""
    x = to_float(image)
    if policy == "none":
        return x
    if policy == "crop_flip":
        x = pad_crop(x, rng)
        x = random_hflip(x, rng)
        return np.ascontiguousarray(x)
    if policy == "cifar":
        x = pad_crop(x, rng)
        x = random_hflip(x, rng)
        x = color_jitter(x, rng)
        x = random_grayscale(x, rng)
        x = cutout(x, rng)
        return np.ascontiguousarray(x)
    raise ValueError(f"unknown augmentation policy {policy!r}; have {POLICIES}")


def normalize(image, mean, std):
    """Per-channel standardization of a float HWC image in [0, 1] units."""
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    return (image - mean) / std
