"""Degradation operators and their sequential composition.

All operators map [0,1] images to [0,1] images, are pure given their
arguments, and take explicit seeds where randomness is involved, so a
(image, config, seed) triple always reproduces the same LR output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .img import ImageError, ImagePlane

DEFAULT_ORDER = ("blur", "resize", "noise", "compress")

# ITU-T81 Annex K luminance quantization table (row-major)
_JPEG_LUMA_QTABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class DegradationConfig:
    """One concrete point in degradation-parameter space.

    `order` is a permutation of blur/resize/noise/compress; `repeats=2`
    runs a weakened second pass (half-strength blur and noise, no extra
    resize) after the first.
    """

    blur_sigma: float
    noise_sigma: float
    scale: int = 1
    jpeg_quality: int = 95
    order: tuple = DEFAULT_ORDER
    repeats: int = 1

    def __post_init__(self):
        if self.blur_sigma < 0:
            raise ImageError(f"blur_sigma must be >= 0, got {self.blur_sigma}")
        if not 0.0 <= self.noise_sigma <= 1.0:
            raise ImageError(f"noise_sigma must be in [0,1], got {self.noise_sigma}")
        if int(self.scale) != self.scale or self.scale < 1:
            raise ImageError(f"scale must be an integer >= 1, got {self.scale}")
        if int(self.jpeg_quality) != self.jpeg_quality or not 1 <= self.jpeg_quality <= 100:
            raise ImageError(f"jpeg_quality must be an integer in [1,100], got {self.jpeg_quality}")
        if tuple(sorted(self.order)) != tuple(sorted(DEFAULT_ORDER)):
            raise ImageError(f"order must be a permutation of {DEFAULT_ORDER}, got {self.order}")
        if self.repeats not in (1, 2):
            raise ImageError(f"repeats must be 1 or 2, got {self.repeats}")


def _reflect101_indices(idx: np.ndarray, n: int) -> np.ndarray:
    """Map arbitrary integer indices into [0, n) by reflection without edge repeat."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    m = np.mod(idx, period)
    return np.where(m >= n, period - m, m)


def _blur_array(data: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return data.copy()
    r = math.ceil(3.0 * sigma)
    x = np.arange(-r, r + 1, dtype=np.float64)
    kernel = np.exp(-(x * x) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    out = np.empty_like(data)
    for c in range(data.shape[0]):
        out[c] = _separable_filter(data[c], kernel, r)
    return out


def gaussian_blur(img: ImagePlane, sigma: float) -> ImagePlane:
    """Isotropic Gaussian blur, kernel radius ceil(3*sigma), reflect-101 borders."""
    if sigma < 0:
        raise ImageError(f"sigma must be >= 0, got {sigma}")
    return ImagePlane(_blur_array(img.data, sigma))


def _separable_filter(plane: np.ndarray, kernel: np.ndarray, r: int) -> np.ndarray:
    from numpy.lib.stride_tricks import sliding_window_view

    padded = np.pad(plane, ((0, 0), (r, r)), mode="reflect")
    tmp = sliding_window_view(padded, kernel.size, axis=1) @ kernel
    padded = np.pad(tmp, ((r, r), (0, 0)), mode="reflect")
    return sliding_window_view(padded, kernel.size, axis=0) @ kernel


def _noise_array(data: np.ndarray, sigma: float, seed) -> np.ndarray:
    if sigma == 0:
        return data.copy()
    rng = np.random.default_rng(seed)
    return data + rng.normal(0.0, sigma, data.shape)


def add_gaussian_noise(img: ImagePlane, sigma: float, seed: int) -> ImagePlane:
    """Seeded i.i.d. zero-mean Gaussian noise per sample, clamped to [0,1]."""
    if sigma < 0:
        raise ImageError(f"sigma must be >= 0, got {sigma}")
    return ImagePlane(_noise_array(img.data, sigma, seed))


def _cubic_kernel(x: np.ndarray) -> np.ndarray:
    # Catmull-Rom cubic, a = -0.5
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = 1.5 * ax3 - 2.5 * ax2 + 1.0
    far = -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    return np.where(ax <= 1.0, near, np.where(ax < 2.0, far, 0.0))


@lru_cache(maxsize=256)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-d bicubic resampling matrix (n_out x n_in).

    Downsampling (n_out < n_in) stretches the kernel by the scale factor
    for antialiasing; out-of-range taps fold back by reflect-101.
    """
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    radius = 2.0 * stretch
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        center = (o + 0.5) * scale - 0.5
        lo = int(math.floor(center - radius)) + 1
        taps = np.arange(lo, int(math.floor(center + radius)) + 1)
        w = _cubic_kernel((taps - center) / stretch)
        w /= w.sum()
        np.add.at(mat[o], _reflect101_indices(taps, n_in), w)
    mat.flags.writeable = False
    return mat


def bicubic_resize_array(arr: np.ndarray, scale: int, direction: str) -> np.ndarray:
    """Bicubic resampling on the last two axes of an array (unclamped)."""
    if direction not in ("down", "up"):
        raise ImageError(f"direction must be 'down' or 'up', got {direction!r}")
    if int(scale) != scale or scale < 1:
        raise ImageError(f"scale must be an integer >= 1, got {scale}")
    if scale == 1:
        return arr.copy()
    h, w = arr.shape[-2:]
    if direction == "down":
        if h % scale or w % scale:
            raise ImageError(f"dimensions {h}x{w} not divisible by scale {scale}")
        h_out, w_out = h // scale, w // scale
    else:
        h_out, w_out = h * scale, w * scale
    mat_r = _resize_matrix(h, h_out)
    mat_c = _resize_matrix(w, w_out)
    return np.matmul(mat_r, arr @ mat_c.T)


def resize(img: ImagePlane, scale: int, direction: str) -> ImagePlane:
    """Integer-factor bicubic resize (Catmull-Rom, reflect-101), clamped."""
    return ImagePlane(bicubic_resize_array(img.data, scale, direction))


@lru_cache(maxsize=None)
def _dct8_matrix() -> np.ndarray:
    u, x = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    mat = np.cos((2 * x + 1) * u * np.pi / 16.0)
    mat[0] *= math.sqrt(0.5)
    mat *= 0.5
    mat.flags.writeable = False
    return mat


@lru_cache(maxsize=128)
def _quant_table(quality: int) -> np.ndarray:
    # libjpeg quality scaling rule over the Annex-K luminance table
    if quality < 50:
        s = 5000.0 / quality
    else:
        s = 200.0 - 2.0 * quality
    table = np.floor((_JPEG_LUMA_QTABLE * s + 50.0) / 100.0)
    table = np.maximum(table, 1.0)
    table.flags.writeable = False
    return table


def _jpeg_array(data: np.ndarray, quality: int) -> np.ndarray:
    table = _quant_table(int(quality))
    dct = _dct8_matrix()
    h, w = data.shape[1], data.shape[2]
    pad_h = (-h) % 8
    pad_w = (-w) % 8
    out = np.empty_like(data)
    for c in range(data.shape[0]):
        x = data[c] * 255.0 - 128.0
        if pad_h or pad_w:
            x = np.pad(x, ((0, pad_h), (0, pad_w)), mode="edge")
        hb, wb = x.shape[0] // 8, x.shape[1] // 8
        blocks = x.reshape(hb, 8, wb, 8).transpose(0, 2, 1, 3)
        coef = dct @ blocks @ dct.T
        coef = np.rint(coef / table) * table
        rec = dct.T @ coef @ dct
        rec = rec.transpose(0, 2, 1, 3).reshape(hb * 8, wb * 8)[:h, :w]
        out[c] = (rec + 128.0) / 255.0
    return out


def jpeg_compress(img: ImagePlane, quality: int) -> ImagePlane:
    """Simulated JPEG: per-8x8-block DCT quantization with the luminance table.

    Every channel goes through the luminance table (no chroma subsampling,
    no entropy coding); edges are replication-padded to a block multiple.
    """
    if int(quality) != quality or not 1 <= quality <= 100:
        raise ImageError(f"quality must be an integer in [1,100], got {quality}")
    return ImagePlane(_jpeg_array(img.data, quality))


def _noise_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([int(seed), rep]).generate_state(1)[0])


def apply_chain(img: ImagePlane, cfg: DegradationConfig, seed: int) -> ImagePlane:
    """Run the configured operator sequence; repeat 2 is a weakened second pass.

    Equivalent to composing the public operators (each stage clamps to
    [0,1]) but routed through their array cores to skip per-stage wrapping.
    """
    out = img.data
    for rep in range(cfg.repeats):
        blur_sigma = cfg.blur_sigma if rep == 0 else cfg.blur_sigma / 2.0
        noise_sigma = cfg.noise_sigma if rep == 0 else cfg.noise_sigma / 2.0
        scale = cfg.scale if rep == 0 else 1
        for op in cfg.order:
            if op == "blur":
                out = _blur_array(out, blur_sigma)
            elif op == "resize":
                out = bicubic_resize_array(out, scale, "down")
            elif op == "noise":
                out = _noise_array(out, noise_sigma, _noise_seed(seed, rep))
            else:
                out = _jpeg_array(out, cfg.jpeg_quality)
            np.clip(out, 0.0, 1.0, out=out)
    return ImagePlane(out)
