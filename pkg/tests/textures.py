"""Synthetic images for the flow tests; every texture wraps around so np.roll is an exact translation."""

import numpy as np
from scipy import ndimage

DIRECTIONS = ((1, 0), (0, 1), (1, 1))  # right, down, diagonal
MAGNITUDES = (1, 2, 3)


def textures(size=64, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    tex = {
        "noise": ndimage.gaussian_filter(rng.random((size, size)), 1.5, mode="wrap"),
        "checker": (((yy // 8) + (xx // 8)) % 2).astype(float),
        "grating": 0.5 + 0.25 * np.sin(2 * np.pi * xx / 16) + 0.25 * np.sin(2 * np.pi * yy / 16),
        "blobs": ndimage.gaussian_filter((rng.random((size, size)) > 0.97).astype(float), 2, mode="wrap"),
        "coarse": ndimage.gaussian_filter(rng.random((size, size)), 3, mode="wrap"),
    }
    return {k: (t - t.min()) / (t.max() - t.min()) for k, t in tex.items()}


def translations():
    for d in DIRECTIONS:
        for m in MAGNITUDES:
            yield d[0] * m, d[1] * m


def shifted(img, dx, dy):
    return np.roll(img, (dy, dx), axis=(0, 1))
