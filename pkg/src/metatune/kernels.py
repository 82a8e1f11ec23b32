"""Compiled photometric augmentation fused with crop feature extraction.

Fine-tuning with augmentation recomputes the features of every sampled crop
at every iteration, which is the hot loop of the augmentation search.  The
kernel below follows the numpy reference path operation for operation
(``apply_strengths`` then ``crop_features``); tests compare the two.
"""
from __future__ import annotations

import math

import numba
import numpy as np

from .augment import Strengths
from .synthbench import (FEATURE_DIM, HIST_BINS, MASK_MIN_SPREAD, MOMENT_SCALE, SHAPE_MOMENTS,
                         CropSet)

_P = np.array([p for p, _ in SHAPE_MOMENTS], dtype=np.int64)
_Q = np.array([q for _, q in SHAPE_MOMENTS], dtype=np.int64)
_SCALE = np.array([MOMENT_SCALE.get(p + q, 1.0) for p, q in SHAPE_MOMENTS])
# the fused moment loop below accumulates exactly these terms, in this order
assert SHAPE_MOMENTS == ((0, 0), (2, 0), (0, 2), (2, 2), (4, 0), (0, 4), (0, 3))


@numba.njit(cache=True)
def _clip(x):
    return min(max(x, 0.0), 1.0)


@numba.njit(cache=True)
def _wrap(x):
    # x % 1.0 for x in [-1, 2), the only range that occurs here (|hue| <= 180
    # degrees); exact there, and much cheaper than a floating-point fmod
    if x < 0.0:
        return x + 1.0
    if x >= 1.0:
        return x - 1.0
    return x


@numba.njit(cache=True)
def _augment_pixel(r, g, b, bright, contrast, sat, hue, rotate):
    if bright != 1.0:
        r, g, b = _clip(r * bright), _clip(g * bright), _clip(b * bright)
    if contrast != 1.0:
        r = _clip(0.5 + contrast * (r - 0.5))
        g = _clip(0.5 + contrast * (g - 0.5))
        b = _clip(0.5 + contrast * (b - 0.5))
    if sat == 1.0 and not rotate:
        return r, g, b
    v = max(r, max(g, b))
    delta = v - min(r, min(g, b))
    s = delta / v if v > 0 else 0.0
    if delta > 0:
        if r == v:
            h = (g - b) / delta
        elif g == v:
            h = 2.0 + (b - r) / delta
        else:
            h = 4.0 + (r - g) / delta
        h = _wrap(h / 6.0)
    else:
        h = 0.0
    if sat != 1.0:
        s = _clip(s * sat)
    if rotate:
        h = _wrap(h + hue / 360.0)
    h6 = h * 6.0
    k = int(h6)
    f = h6 - k
    if k == 6:
        k = 0
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    if k == 0:
        r, g, b = v, t, p
    elif k == 1:
        r, g, b = q, v, p
    elif k == 2:
        r, g, b = p, v, t
    elif k == 3:
        r, g, b = p, q, v
    elif k == 4:
        r, g, b = t, p, v
    else:
        r, g, b = v, p, q
    return _clip(r), _clip(g), _clip(b)


@numba.njit(cache=True)
def _features(pixels, offsets, lx, ly, geometry, crop_ids, strengths, out):
    nb = HIST_BINS
    for row in range(crop_ids.shape[0]):
        c = crop_ids[row]
        lo, hi = offsets[c], offsets[c + 1]
        size = hi - lo
        br, co, sa, hu = strengths[row, 0], strengths[row, 1], strengths[row, 2], strengths[row, 3]
        rotate = hu % 360.0 != 0.0
        value = np.empty(size)
        hist = np.zeros(3 * nb)
        vmin = np.inf
        vmax = -np.inf
        for j in range(size):
            i = lo + j
            r, g, b = _augment_pixel(pixels[i, 0], pixels[i, 1], pixels[i, 2], br, co, sa, hu,
                                     rotate)
            hist[min(int(r * nb), nb - 1)] += 1.0
            hist[nb + min(int(g * nb), nb - 1)] += 1.0
            hist[2 * nb + min(int(b * nb), nb - 1)] += 1.0
            v = max(r, max(g, b))
            value[j] = v
            vmin = min(vmin, v)
            vmax = max(vmax, v)
        mask = np.zeros(size)
        area = 0.0
        sx = 0.0
        sy = 0.0
        if vmax - vmin >= MASK_MIN_SPREAD:
            thr = 0.5 * (vmin + vmax)
            for j in range(size):
                if value[j] > thr:
                    mask[j] = 1.0
                    area += 1.0
                    sx += lx[lo + j]
                    sy += ly[lo + j]
        for k in range(3 * nb):
            out[row, k] = hist[k] / size
        base = 3 * nb
        if area >= 3.0:
            xc = sx / area
            yc = sy / area
            acc = np.zeros(7)
            for j in range(size):
                if mask[j] != 0.0:
                    dx = lx[lo + j] - xc
                    dy = ly[lo + j] - yc
                    dx2 = dx * dx
                    dy2 = dy * dy
                    acc[1] += dx2
                    acc[2] += dy2
                    acc[3] += dx2 * dy2
                    acc[4] += dx2 * dx2
                    acc[5] += dy2 * dy2
                    acc[6] += dy2 * dy
            out[row, base] = area / size
            for m in range(1, 7):
                order = _P[m] + _Q[m]
                v = _SCALE[m] * acc[m] / area ** (1.0 + order / 2.0)
                out[row, base + m] = math.copysign(math.log1p(abs(v)), v)
        else:
            for m in range(7):
                out[row, base + m] = 0.0
        out[row, base + 7] = geometry[c, 0]
        out[row, base + 8] = geometry[c, 1]


class AugmentedFeaturizer:
    """Features of augmented crops drawn from a fixed list of images."""

    def __init__(self, crop_sets: list[CropSet]):
        self.first = np.cumsum([0] + [len(c.sizes) for c in crop_sets])
        self.pixels = np.ascontiguousarray(np.concatenate([c.pixels for c in crop_sets]))
        self.lx = np.concatenate([c.lx for c in crop_sets])
        self.ly = np.concatenate([c.ly for c in crop_sets])
        self.geometry = np.ascontiguousarray(np.concatenate([c.geometry for c in crop_sets]))
        sizes = np.concatenate([c.sizes for c in crop_sets])
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    def features(self, image_index, strengths: list[Strengths]) -> np.ndarray:
        """Rows for the crops of ``image_index[k]`` augmented by ``strengths[k]``."""
        ids = [np.arange(self.first[k], self.first[k + 1]) for k in image_index]
        per_crop = [np.tile(np.asarray(st, dtype=float), (len(i), 1)) for i, st in zip(ids, strengths)]
        crop_ids = np.concatenate(ids).astype(np.int64)
        out = np.empty((len(crop_ids), FEATURE_DIM))
        _features(self.pixels, self.offsets, self.lx, self.ly, self.geometry, crop_ids,
                  np.concatenate(per_crop), out)
        return out
