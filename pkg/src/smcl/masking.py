"""Spectral-residual saliency and rectangular mask generation.

A mask is a rectangle whose area fraction is drawn from Beta(alpha, alpha)
and whose placement follows one of three modes: centered on the saliency
peak, centered on the image center, or centered at a uniformly random pixel.
The clipped area fraction A is recorded exactly and capped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import round_half_up

DEFAULT_AREA_CAP = 0.9
MASK_MODES = ("saliency", "center", "random")


class MaskParameterError(ValueError):
    """A masking parameter is outside its documented domain."""


def to_grayscale(image):
    """Luma conversion (ITU-R 601). Accepts HW or HWC, uint8 or float."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        return x
    if x.ndim == 3 and x.shape[2] == 1:
        return x[:, :, 0]
    if x.ndim == 3 and x.shape[2] == 3:
        return 0.299 * x[:, :, 0] + 0.587 * x[:, :, 1] + 0.114 * x[:, :, 2]
    raise MaskParameterError(f"expected HW or HWC image, got shape {x.shape}")


def saliency_map(image, smooth_sigma=2.0):
    """Spectral-residual saliency. Returns a non-negative (H, W) map.

    The log-amplitude spectrum minus its local average is recombined with the
    original phase; the squared inverse transform, Gaussian-smoothed, is the
    map (scaled to peak 1). A constant image has no residual structure and
    yields an all-zero map.
    """
    g = to_grayscale(image)
    if g.shape[0] < 1 or g.shape[1] < 1:
        raise MaskParameterError("empty image")
    if np.ptp(g) == 0:
        return np.zeros(g.shape, dtype=np.float64)
    spectrum = np.fft.fft2(g)
    amplitude = np.abs(spectrum)
    phase = np.angle(spectrum)
    log_amp = np.log(amplitude + 1e-12)
    residual = log_amp - ndimage.uniform_filter(log_amp, size=3, mode="nearest")
    recombined = np.exp(residual) * np.exp(1j * phase)
    sal = np.abs(np.fft.ifft2(recombined)) ** 2
    sal = ndimage.gaussian_filter(sal, sigma=smooth_sigma)
    peak = sal.max()
    if peak <= 0:
        return np.zeros(g.shape, dtype=np.float64)
    return sal / peak


def argmax_coords(smap):
    """First (row-major) argmax of a 2-d map: smallest row, then smallest column."""
    smap = np.asarray(smap)
    return tuple(int(v) for v in np.unravel_index(np.argmax(smap), smap.shape))


def saliency_peak(image, smooth_sigma=2.0):
    """Coordinates (i, j) of the saliency maximum of an image."""
    return argmax_coords(saliency_map(image, smooth_sigma=smooth_sigma))


def saliency_to_image(smap):
    """Render a saliency map as a uint8 grayscale image for inspection."""
    smap = np.asarray(smap, dtype=np.float64)
    peak = smap.max()
    if peak > 0:
        smap = smap / peak
    return np.clip(smap * 255.0 + 0.5, 0, 255).astype(np.uint8)


def save_saliency_png(smap, path):
    from PIL import Image

    Image.fromarray(saliency_to_image(smap), mode="L").save(path)


@dataclass(frozen=True)
class MaskSpec:
    """A rectangular mask: center, clipped half-open box, exact area fraction.

    box is (row_lo, col_lo, row_hi, col_hi) after clipping to the image;
    area_fraction is box area over image area, computed from the clipped box.
    draw is the accepted Beta sample; clamped marks the deterministic cap box.
    """

    center: tuple
    box: tuple
    area_fraction: float
    draw: float = 0.0
    clamped: bool = False

    @property
    def height(self):
        return self.box[2] - self.box[0]

    @property
    def width(self):
        return self.box[3] - self.box[1]

    @property
    def pixels(self):
        return self.height * self.width


def _box_at(center, side_h, side_w, height, width):
    r0 = center[0] - side_h // 2
    c0 = center[1] - side_w // 2
    r1 = r0 + side_h
    c1 = c0 + side_w
    r0, r1 = max(0, r0), min(height, r1)
    c0, c1 = max(0, c0), min(width, c1)
    if r1 < r0:
        r1 = r0
    if c1 < c0:
        c1 = c0
    return r0, c0, r1, c1


def _spec_for_draw(a, center, height, width, clamped=False):
    side_h = round_half_up(height * np.sqrt(a))
    side_w = round_half_up(width * np.sqrt(a))
    box = _box_at(center, side_h, side_w, height, width)
    area = (box[2] - box[0]) * (box[3] - box[1])
    return MaskSpec(
        center=tuple(int(v) for v in center),
        box=box,
        area_fraction=area / (height * width),
        draw=float(a),
        clamped=clamped,
    )


def make_mask(shape, center, alpha, rng, mode="saliency", area_cap=DEFAULT_AREA_CAP):
    """Draw a mask rectangle for an image of the given (H, W) shape.

    The area fraction is a ~ Beta(alpha, alpha); the nominal box has sides
    round(H * sqrt(a)) x round(W * sqrt(a)) centered per mode (saliency uses
    the supplied center, center mode the image center, random a uniform
    pixel) and is clipped to the image. If the clipped fraction reaches
    area_cap, a is redrawn once; if it still does, the box is clamped to
    floor(H * sqrt(cap)) x floor(W * sqrt(cap)).
    """
    height, width = int(shape[0]), int(shape[1])
    if height < 1 or width < 1:
        raise MaskParameterError("mask shape must be positive")
    if not alpha > 0:
        raise MaskParameterError(f"alpha must be > 0, got {alpha}")
    if not 0 < area_cap <= 1:
        raise MaskParameterError(f"area cap must be in (0, 1], got {area_cap}")
    if mode not in MASK_MODES:
        raise MaskParameterError(f"unknown mask mode {mode!r}")

    if mode == "center":
        center = (height // 2, width // 2)
    elif mode == "random":
        center = (int(rng.integers(height)), int(rng.integers(width)))
    else:
        if center is None:
            raise MaskParameterError("saliency mode needs a center")
        center = (int(center[0]), int(center[1]))
        if not (0 <= center[0] < height and 0 <= center[1] < width):
            raise MaskParameterError(f"center {center} outside {height}x{width} image")

    spec = _spec_for_draw(rng.beta(alpha, alpha), center, height, width)
    if spec.area_fraction >= area_cap:
        spec = _spec_for_draw(rng.beta(alpha, alpha), center, height, width)
    if spec.area_fraction >= area_cap:
        side_h = int(np.floor(height * np.sqrt(area_cap)))
        side_w = int(np.floor(width * np.sqrt(area_cap)))
        box = _box_at(center, side_h, side_w, height, width)
        area = (box[2] - box[0]) * (box[3] - box[1])
        spec = MaskSpec(
            center=center,
            box=box,
            area_fraction=area / (height * width),
            draw=spec.draw,
            clamped=True,
        )
    return spec


def apply_mask(image, spec, fill):
    """Fill the mask rectangle with a constant. All other pixels are untouched.

    fill is a scalar or a per-channel vector in the same units as the image.
    Returns a copy; the changed-pixel count is exactly the box area.
    """
    out = np.array(image, copy=True)
    r0, c0, r1, c1 = spec.box
    if r1 <= r0 or c1 <= c0:
        return out
    if out.ndim == 2:
        out[r0:r1, c0:c1] = fill
    elif out.ndim == 3:
        fill = np.asarray(fill, dtype=out.dtype)
        out[r0:r1, c0:c1, :] = np.broadcast_to(fill, (r1 - r0, c1 - c0, out.shape[2]))
    else:
        raise MaskParameterError(f"expected HW or HWC image, got shape {out.shape}")
    return out


def mask_image(image, alpha, rng, mode="saliency", fill=0.0,
               area_cap=DEFAULT_AREA_CAP, smooth_sigma=2.0):
    """Compute placement, draw a mask, and apply it. Returns (masked, spec).

    In saliency mode a degenerate (all-zero) map falls back to the image
    center, so constant images behave like center mode.
    """
    image = np.asarray(image)
    height, width = image.shape[0], image.shape[1]
    center = None
    if mode == "saliency":
        smap = saliency_map(image, smooth_sigma=smooth_sigma)
        if smap.max() <= 0:
            center = (height // 2, width // 2)
        else:
            center = argmax_coords(smap)
    spec = make_mask((height, width), center, alpha, rng, mode=mode, area_cap=area_cap)
    return apply_mask(image, spec, fill), spec
