"""Planar float image container, luma conversion, and PSNR/SSIM metrics.

Pixel domain is [0,1] float64 everywhere; 8-bit files are converted by /255
on read and round(x*255) on write so no quantization happens inside the
math core.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0  # dB reported for (near-)identical images; keeps distance arithmetic finite

# BT.601 full-range luma weights
_LUMA_R, _LUMA_G, _LUMA_B = 0.299, 0.587, 0.114


class ImageError(ValueError):
    """Malformed image data or incompatible shapes."""


class ImagePlane:
    """Immutable planar image: float64 samples in [0,1], shape (channels, h, w).

    Accepts (h, w) or (c, h, w) arrays; values are clamped to [0,1] on
    construction and the backing array is frozen, so every ImagePlane in
    circulation satisfies the range invariant.
    """

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.ndim != 3:
            raise ImageError(f"expected 2-d or 3-d array, got shape {arr.shape}")
        if arr.shape[0] not in (1, 3):
            raise ImageError(f"channels must be 1 or 3, got {arr.shape[0]}")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ImageError(f"degenerate image shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ImageError("image contains non-finite samples")
        arr = np.clip(arr, 0.0, 1.0)
        arr.flags.writeable = False
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def channels(self) -> int:
        return self._data.shape[0]

    @property
    def height(self) -> int:
        return self._data.shape[1]

    @property
    def width(self) -> int:
        return self._data.shape[2]

    @property
    def shape(self):
        return self._data.shape

    @classmethod
    def full(cls, height, width, value, channels=1):
        return cls(np.full((channels, height, width), float(value)))

    @classmethod
    def from_interleaved(cls, arr):
        """Build from an (h, w) or (h, w, c) array (e.g. decoded file data)."""
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            return cls(arr)
        if arr.ndim == 3:
            return cls(np.moveaxis(arr, 2, 0))
        raise ImageError(f"expected (h,w) or (h,w,c), got shape {arr.shape}")

    def to_interleaved(self) -> np.ndarray:
        return np.moveaxis(self._data, 0, 2)

    def __eq__(self, other):
        return isinstance(other, ImagePlane) and np.array_equal(self._data, other._data)

    def __repr__(self):
        return f"ImagePlane(channels={self.channels}, height={self.height}, width={self.width})"


@dataclass(frozen=True)
class MetricReport:
    """Full-reference quality numbers for one image pair (luma domain)."""

    psnr: float
    ssim: float
    mse: float


def to_luma(img: ImagePlane) -> ImagePlane:
    """BT.601 full-range luma; 1-channel images pass through unchanged."""
    if img.channels == 1:
        return img
    r, g, b = img.data
    return ImagePlane(_LUMA_R * r + _LUMA_G * g + _LUMA_B * b)


def _check_same_shape(a: ImagePlane, b: ImagePlane):
    if a.shape != b.shape:
        raise ImageError(f"shape mismatch: {a.shape} vs {b.shape}")


def mse(a: ImagePlane, b: ImagePlane) -> float:
    """Mean squared error over luma samples."""
    _check_same_shape(a, b)
    da = to_luma(a).data
    db = to_luma(b).data
    return float(np.mean((da - db) ** 2, dtype=np.float64))


def psnr(a: ImagePlane, b: ImagePlane) -> float:
    """10*log10(1/MSE) on luma, capped at PSNR_CAP dB."""
    m = mse(a, b)
    if m == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / m))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # separable valid-mode correlation, rows then columns
    tmp = sliding_window_view(plane, kernel.size, axis=1) @ kernel
    return sliding_window_view(tmp, kernel.size, axis=0) @ kernel


def ssim(a: ImagePlane, b: ImagePlane, window: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM with a Gaussian window (no downsampling variant).

    Stats are taken over valid window positions only; constants are
    C1=(0.01)^2, C2=(0.03)^2 for the [0,1] dynamic range.
    """
    _check_same_shape(a, b)
    ya = to_luma(a).data[0]
    yb = to_luma(b).data[0]
    if min(ya.shape) < window:
        raise ImageError(f"image {ya.shape} smaller than {window}x{window} window")
    k = _gaussian_window(window, sigma)
    mu_a = _filter_valid(ya, k)
    mu_b = _filter_valid(yb, k)
    var_a = _filter_valid(ya * ya, k) - mu_a * mu_a
    var_b = _filter_valid(yb * yb, k) - mu_b * mu_b
    cov = _filter_valid(ya * yb, k) - mu_a * mu_b
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def metric_report(a: ImagePlane, b: ImagePlane, window: int = 11, sigma: float = 1.5) -> MetricReport:
    return MetricReport(psnr=psnr(a, b), ssim=ssim(a, b, window, sigma), mse=mse(a, b))


# ---------------------------------------------------------------------------
# File I/O: PNG (via Pillow) and binary PGM/PPM, 8-bit maxval 255.

def read_image(path) -> ImagePlane:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm"):
        return _read_pnm(path)
    if suffix == ".png":
        return _read_png(path)
    raise ImageError(f"unsupported image format: {path.name}")


def write_image(path, img: ImagePlane):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm"):
        _write_pnm(path, img)
    elif suffix == ".png":
        _write_png(path, img)
    else:
        raise ImageError(f"unsupported image format: {path.name}")


def _to_u8(img: ImagePlane) -> np.ndarray:
    return np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)


def _read_png(path) -> ImagePlane:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.float64)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return ImagePlane.from_interleaved(arr / 255.0)


def _write_png(path, img: ImagePlane):
    from PIL import Image

    u8 = _to_u8(img)
    if img.channels == 1:
        Image.fromarray(u8[0], mode="L").save(path)
    else:
        Image.fromarray(np.moveaxis(u8, 0, 2), mode="RGB").save(path)


def _read_pnm(path) -> ImagePlane:
    raw = Path(path).read_bytes()
    m = re.match(rb"(P[56])\s", raw)
    if not m:
        raise ImageError(f"{path}: not a binary PGM/PPM file")
    magic = m.group(1)
    # header tokens: width, height, maxval; '#' comments allowed
    pos = m.end()
    tokens = []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ImageError(f"{path}: only maxval 255 supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    count = width * height * channels
    payload = raw[pos : pos + count]
    if len(payload) != count:
        raise ImageError(f"{path}: expected {count} payload bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    arr = arr.reshape(height, width) if channels == 1 else arr.reshape(height, width, 3)
    return ImagePlane.from_interleaved(arr)


def _write_pnm(path, img: ImagePlane):
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm" and img.channels != 1:
        raise ImageError("PGM requires a 1-channel image")
    if suffix == ".ppm" and img.channels != 3:
        raise ImageError("PPM requires a 3-channel image")
    magic = b"P5" if img.channels == 1 else b"P6"
    u8 = _to_u8(img)
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    payload = np.moveaxis(u8, 0, 2).tobytes() if img.channels == 3 else u8[0].tobytes()
    Path(path).write_bytes(header + payload)
