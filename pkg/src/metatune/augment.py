"""Photometric augmentation driven by one shared magnitude.

Images are float arrays of shape (H, W, 3) with channels in [0, 1].  A call
draws four strengths from the magnitude ``m``::

    brightness, contrast, saturation factors ~ U[1 - m, 1 + m]
    hue rotation (degrees)                   ~ U[-180 m, 180 m]

and applies them in that order, clamping to [0, 1] after every step.
Contrast pivots on mid-gray (0.5), so every step is a per-pixel map and
augmenting a crop gives the same pixels as cropping the augmented image.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np


class Strengths(NamedTuple):
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue_degrees: float = 0.0


IDENTITY = Strengths()


def check_magnitude(magnitude: float) -> float:
    magnitude = float(magnitude)
    if not 0.0 <= magnitude <= 1.0:
        raise ValueError(f"augmentation magnitude must lie in [0, 1], got {magnitude}")
    return magnitude


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=float)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    delta = v - rgb.min(axis=-1)
    safe_v = np.where(v > 0, v, 1.0)
    s = np.where(v > 0, delta / safe_v, 0.0)
    safe_d = np.where(delta > 0, delta, 1.0)
    h = np.where(
        r == v,
        (g - b) / safe_d,
        np.where(g == v, 2.0 + (b - r) / safe_d, 4.0 + (r - g) / safe_d),
    )
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=float)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    sector = np.floor(h6)
    f = h6 - sector
    sector = sector.astype(np.int64) % 6
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(sector, [v, q, p, p, t, v])
    g = np.choose(sector, [t, v, v, q, p, p])
    b = np.choose(sector, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def hue_rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate hue by ``degrees`` (mod 360); saturation and value are kept."""
    img = np.asarray(img, dtype=float)
    if degrees % 360.0 == 0.0:
        return img.copy()
    hsv = rgb_to_hsv(img)
    hsv[..., 0] = (hsv[..., 0] + degrees / 360.0) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return np.array(img, dtype=float)
    return np.clip(np.asarray(img, dtype=float) * factor, 0.0, 1.0)


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return np.array(img, dtype=float)
    return np.clip(0.5 + factor * (np.asarray(img, dtype=float) - 0.5), 0.0, 1.0)


def adjust_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return np.array(img, dtype=float)
    hsv = rgb_to_hsv(img)
    hsv[..., 1] = np.clip(hsv[..., 1] * factor, 0.0, 1.0)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def draw_strengths(magnitude: float, rng: np.random.Generator) -> Strengths:
    """Draw one set of transform strengths; always consumes four uniforms."""
    m = check_magnitude(magnitude)
    u = rng.uniform(-1.0, 1.0, size=4)
    return Strengths(1.0 + m * u[0], 1.0 + m * u[1], 1.0 + m * u[2], 180.0 * m * u[3])


def apply_strengths(pixels: np.ndarray, st: Strengths) -> np.ndarray:
    """Apply fixed strengths to any (..., 3) pixel array."""
    out = adjust_brightness(pixels, st.brightness)
    out = adjust_contrast(out, st.contrast)
    if st.saturation == 1.0 and st.hue_degrees % 360.0 == 0.0:
        return out
    # saturation and hue share one HSV round trip
    hsv = rgb_to_hsv(out)
    if st.saturation != 1.0:
        hsv[..., 1] = np.clip(hsv[..., 1] * st.saturation, 0.0, 1.0)
    if st.hue_degrees % 360.0 != 0.0:
        hsv[..., 0] = (hsv[..., 0] + st.hue_degrees / 360.0) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def apply_photometric(img: np.ndarray, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    """Brightness, contrast, saturation and hue jitter with shared magnitude."""
    st = draw_strengths(magnitude, rng)
    return apply_strengths(img, st)
