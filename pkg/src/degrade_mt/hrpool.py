"""Procedurally generated HR image pool.

The desk-scale benchmark needs a few dozen structured grayscale images
(edges, texture, smooth regions) without shipping or downloading a photo
dataset, so we synthesize them. Generation is fully seeded; images land
in [0.03, 0.97] so degradation clamping stays inactive for typical noise.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .degrade import gaussian_blur
from .img import ImagePlane, write_image

_SIZES = (96, 112, 128)


def _coords(size):
    y, x = np.mgrid[0:size, 0:size]
    return y / size, x / size


def _waves(rng, size):
    y, x = _coords(size)
    out = np.zeros((size, size))
    for _ in range(int(rng.integers(3, 6))):
        fy, fx = rng.uniform(2, 14, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fy * y + fx * x) + phase)
    return out


def _mosaic(rng, size):
    out = np.full((size, size), rng.uniform(0.2, 0.8))
    for _ in range(int(rng.integers(8, 16))):
        h = int(rng.integers(size // 8, size // 2))
        w = int(rng.integers(size // 8, size // 2))
        y = int(rng.integers(0, size - h))
        x = int(rng.integers(0, size - w))
        out[y : y + h, x : x + w] = rng.uniform(0, 1)
    return out


def _blobs(rng, size):
    y, x = _coords(size)
    out = np.zeros((size, size))
    for _ in range(int(rng.integers(5, 10))):
        cy, cx = rng.uniform(0, 1, size=2)
        radius = rng.uniform(0.05, 0.25)
        out += rng.uniform(-1, 1) * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * radius**2))
    return out


def _texture(rng, size):
    coarse = rng.uniform(0, 1, (size // 8, size // 8))
    fine = rng.uniform(0, 1, (size, size))
    up = np.kron(coarse, np.ones((8, 8)))
    return 0.7 * up + 0.3 * fine


_GENERATORS = (_waves, _mosaic, _blobs, _texture)


def _normalize(arr):
    lo, hi = arr.min(), arr.max()
    if hi - lo < 1e-9:
        return np.full_like(arr, 0.5)
    return 0.03 + 0.94 * (arr - lo) / (hi - lo)


def generate_hr_pool(count: int = 60, seed: int = 7, sizes=_SIZES):
    """Seeded list of grayscale ImagePlanes mixing the four texture families."""
    planes = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        size = int(sizes[int(rng.integers(len(sizes)))])
        raw = _GENERATORS[i % len(_GENERATORS)](rng, size)
        img = ImagePlane(_normalize(raw))
        # light smoothing keeps block/noise generators from looking like pure noise
        planes.append(gaussian_blur(img, 0.6))
    return planes


def write_hr_pool(directory, count: int = 60, seed: int = 7) -> list:
    """Generate the pool and write it as PNGs; returns the file paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, plane in enumerate(generate_hr_pool(count, seed)):
        path = directory / f"hr_{i:03d}.png"
        write_image(path, plane)
        paths.append(path)
    return paths
