"""
Patch-wise spatially varying degradation of linear-light images.

Every patch of a :class:`~aberra.psf.PsfGrid` convolves its neighbourhood of
the ground truth with its own R/G/B kernels. The per-patch results are
stitched with separable triangular (bilinear hat) weights anchored at the
patch centres, so each pixel mixes at most 2 x 2 patches and the weights sum
to exactly one. Noise is added after blending; an optional ISP stage then
applies white balance to both images and a Bayer mosaic/demosaic to the
degraded one.

Images are plain ``float64`` arrays of shape (H, W, 3) in linear light.
sRGB encoding happens only in :func:`read_image` / :func:`write_image`.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage, signal

from .errors import GridMismatch, ValidationError

IMAGE_MAGIC = b"IMGF"
BAYER_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")


@dataclass(frozen=True)
class NoiseConfig:
    model: str = "none"
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.model not in ("none", "gaussian"):
            raise ValidationError(f"unknown noise model {self.model!r}")
        if not self.sigma >= 0:
            raise ValidationError("noise sigma must be >= 0")

    @classmethod
    def gaussian(cls, sigma, seed=0):
        return cls("gaussian", float(sigma), int(seed))


@dataclass(frozen=True)
class IspConfig:
    enabled: bool = False
    bayer_pattern: str = "RGGB"
    wb_gain_range: tuple = (1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.wb_gain_range
        if not 0 < lo <= hi:
            raise ValidationError("white-balance range needs 0 < lo <= hi")
        if self.bayer_pattern not in BAYER_PATTERNS:
            raise ValidationError(f"unknown Bayer pattern {self.bayer_pattern!r}")


def as_image(img):
    """Validate and return ``img`` as a float64 (H, W, 3) array."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3 or a.shape[0] == 0 or a.shape[1] == 0:
        raise ValidationError(f"expected an (H, W, 3) image, got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# blending

def hat_coordinates(length, n):
    """Left patch index and blend fraction for every pixel along one axis.

    Patch ``j`` is centred at pixel ``(j + 0.5) * length / n - 0.5``. A pixel
    between centres ``j`` and ``j + 1`` takes ``1 - t`` of patch ``j`` and
    ``t`` of patch ``j + 1``; beyond the outermost centres ``t`` is clamped.
    """
    x = np.arange(length, dtype=np.float64)
    if n == 1:
        return np.zeros(length, dtype=np.intp), np.zeros(length)
    stride = length / n
    pos = (x + 0.5) / stride - 0.5  # in units of patch index
    left = np.clip(np.floor(pos), 0, n - 2).astype(np.intp)
    t = np.clip(pos - left, 0.0, 1.0)
    # dyadic fractions keep every 2-D product (and their sum) exact in float64
    t = np.round(t * 2.0**26) / 2.0**26
    return left, t


def axis_weights(length, n):
    """Dense (n, length) hat weights along one axis."""
    left, t = hat_coordinates(length, n)
    w = np.zeros((n, length))
    idx = np.arange(length)
    w[left, idx] = 1.0 - t
    if n > 1:
        w[left + 1, idx] += t
    return w


def blend_weight_map(height, width, rows, cols):
    """Full (rows, cols, H, W) weight map; sums to one at every pixel."""
    wy = axis_weights(height, rows)
    wx = axis_weights(width, cols)
    return wy[:, None, :, None] * wx[None, :, None, :]


def _support(left, n):
    """Pixel range [start, stop) in which each patch has non-zero weight."""
    if left.size < n:
        raise ValidationError(f"{n} patches do not fit in {left.size} pixels")
    ranges = []
    for j in range(n):
        hit = np.nonzero((left == j) | (left == j - 1))[0]
        ranges.append((int(hit[0]), int(hit[-1]) + 1))
    return ranges


# ---------------------------------------------------------------------------
# convolution

def _is_delta(kernel):
    r = kernel.shape[0] // 2
    return kernel[r, r] == 1.0 and np.count_nonzero(kernel) == 1


def convolve_region(padded, kernel, y0, y1, x0, x1):
    """Convolve the window [y0:y1, x0:x1] of the unpadded image.

    ``padded`` is the image reflect-padded by ``kernel.shape[0] // 2``.
    """
    k = np.asarray(kernel, dtype=np.float64)
    r = k.shape[0] // 2
    if _is_delta(k):
        return padded[y0 + r:y1 + r, x0 + r:x1 + r].copy()
    window = padded[y0:y1 + 2 * r, x0:x1 + 2 * r]
    return signal.fftconvolve(window, k, mode="valid")


def convolve_image(img, kernel):
    """Full-image convolution of every channel with one kernel (reflection padded)."""
    img = as_image(img)
    k = np.asarray(kernel, dtype=np.float64)
    r = k.shape[0] // 2
    out = np.empty_like(img)
    for c in range(3):
        padded = np.pad(img[..., c], r, mode="reflect")
        out[..., c] = convolve_region(padded, k, 0, img.shape[0], 0, img.shape[1])
    return out


def _fit_to_sensor(img, geometry, tolerance):
    h, w = img.shape[:2]
    dh, dw = geometry.sensor_h - h, geometry.sensor_w - w
    tol_h = max(tolerance, int(0.01 * geometry.sensor_h))
    tol_w = max(tolerance, int(0.01 * geometry.sensor_w))
    if not (0 <= dh <= tol_h and 0 <= dw <= tol_w):
        raise GridMismatch(
            f"image is {h}x{w} but the PSF grid covers a {geometry.sensor_h}x{geometry.sensor_w} sensor"
        )
    if dh == 0 and dw == 0:
        return img, None
    pad = ((dh // 2, dh - dh // 2), (dw // 2, dw - dw // 2), (0, 0))
    return np.pad(img, pad, mode="reflect"), (dh // 2, dw // 2, h, w)


def degrade_image(gt, grid, noise=None, threads=None, pad_tolerance=2):
    """Apply the patch-wise blur of ``grid`` to ``gt`` and add noise.

    Parameters
    ----------
    gt : array (H, W, 3)
        Linear-light ground truth matching the grid's sensor size. Images
        smaller by up to ``pad_tolerance`` pixels (or 1 %) are reflect-padded
        for the convolution and cropped back afterwards.
    grid : PsfGrid
    noise : NoiseConfig, optional
        Defaults to no noise.
    threads : int, optional
        Worker threads for the per-patch convolutions. The result does not
        depend on it.

    Raises
    ------
    GridMismatch
        When the image size is incompatible with the grid geometry.
    """
    img, crop = _fit_to_sensor(as_image(gt), grid.geometry, pad_tolerance)
    h, w = img.shape[:2]
    rows, cols = grid.rows, grid.cols
    k = grid.kernel_px
    r = k // 2
    kernels = grid.kernels.astype(np.float64)
    padded = [np.pad(img[..., c], r, mode="reflect") for c in range(3)]

    top, ty = hat_coordinates(h, rows)
    left, tx = hat_coordinates(w, cols)
    ysup, xsup = _support(top, rows), _support(left, cols)

    def patch(ij):
        i, j = ij
        (y0, y1), (x0, x1) = ysup[i], xsup[j]
        return np.stack([convolve_region(padded[c], kernels[i, j, c], y0, y1, x0, x1) for c in range(3)], -1)

    index = [(i, j) for i in range(rows) for j in range(cols)]
    if threads and threads > 1 and len(index) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blurred = dict(zip(index, pool.map(patch, index)))
    else:
        blurred = {ij: patch(ij) for ij in index}

    # horizontal blend inside each patch row, then vertical blend of the rows;
    # written as a + t * (b - a) so equal neighbours pass through unchanged
    strips = []
    for i in range(rows):
        y0, y1 = ysup[i]
        a = np.empty((y1 - y0, w, 3))
        b = np.empty_like(a)
        for j in range(cols):
            x0, _ = xsup[j]
            cols_a = np.nonzero(left == j)[0]
            a[:, cols_a] = blurred[i, j][:, cols_a - x0]
            if j > 0:
                cols_b = np.nonzero(left == j - 1)[0]
                b[:, cols_b] = blurred[i, j][:, cols_b - x0]
        if cols == 1:
            b = a
        strips.append(a + tx[None, :, None] * (b - a))

    out = np.empty((h, w, 3))
    for i in range(max(rows - 1, 1)):
        rows_a = np.nonzero(top == i)[0]
        a = strips[i][rows_a - ysup[i][0]]
        b = strips[i + 1][rows_a - ysup[i + 1][0]] if rows > 1 else a
        out[rows_a] = a + ty[rows_a, None, None] * (b - a)

    if crop is not None:
        oy, ox, hh, ww = crop
        out = out[oy:oy + hh, ox:ox + ww]
    return add_noise(out, noise or NoiseConfig())


# ---------------------------------------------------------------------------
# noise and ISP

def add_noise(img, noise):
    """Add seeded i.i.d. Gaussian noise; the ``none`` model is the identity.

    Philox is counter based, so the field depends only on the seed and the
    pixel index.
    """
    img = np.asarray(img, dtype=np.float64)
    if noise.model == "none" or noise.sigma == 0:
        return img.copy()
    rng = np.random.Generator(np.random.Philox(noise.seed))
    return img + rng.normal(0.0, noise.sigma, size=img.shape)


def wb_gains(isp):
    """R, G, B white-balance gains; green is the anchor channel."""
    lo, hi = isp.wb_gain_range
    rng = np.random.Generator(np.random.Philox(isp.seed))
    r, b = rng.uniform(lo, hi, size=2)
    return np.array([r, 1.0, b])


def bayer_masks(shape, pattern="RGGB"):
    """Boolean (H, W, 3) masks of the sites sampling each channel."""
    h, w = shape
    masks = np.zeros((h, w, 3), dtype=bool)
    for k, ch in enumerate(pattern):
        dy, dx = divmod(k, 2)
        masks[dy::2, dx::2, "RGB".index(ch)] = True
    return masks


_BILINEAR = np.array([[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]])


def mosaic(img, pattern="RGGB"):
    """Single-plane raw image sampled at the Bayer sites."""
    img = as_image(img)
    return (img * bayer_masks(img.shape[:2], pattern)).sum(axis=2)


def demosaic(raw, pattern="RGGB"):
    """Bilinear demosaic: normalised convolution of each sparse channel plane.

    Sampled sites keep their value; missing sites get the weighted mean of the
    neighbouring samples of that channel.
    """
    raw = np.asarray(raw, dtype=np.float64)
    masks = bayer_masks(raw.shape, pattern)
    out = np.empty(raw.shape + (3,))
    for c in range(3):
        m = masks[..., c].astype(np.float64)
        num = ndimage.correlate(raw * m, _BILINEAR, mode="mirror")
        den = ndimage.correlate(m, _BILINEAR, mode="mirror")
        out[..., c] = np.where(masks[..., c], raw, num / den)
    return out


def apply_isp(lq, gt, isp):
    """White balance both images, then mosaic and demosaic ``lq`` only."""
    lq, gt = as_image(lq), as_image(gt)
    if not isp.enabled:
        return lq.copy(), gt.copy()
    g = wb_gains(isp)
    return demosaic(mosaic(lq * g, isp.bayer_pattern), isp.bayer_pattern), gt * g


# ---------------------------------------------------------------------------
# file I/O

def srgb_encode(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_decode(v):
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, np.power((v + 0.055) / 1.055, 2.4))


def read_image(path):
    """Load a PNG (8/16-bit sRGB) or IMGF container as linear float64 RGB."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == IMAGE_MAGIC:
        h, w, c = struct.unpack_from("<III", raw, 4)
        data = np.frombuffer(raw, dtype="<f4", offset=16)
        if data.size != h * w * c:
            raise ValidationError(f"{path}: truncated IMGF payload")
        img = data.reshape(c, h, w).transpose(1, 2, 0).astype(np.float64)
    else:
        arr = cv2.imdecode(np.frombuffer(raw, np.uint8), cv2.IMREAD_UNCHANGED)
        if arr is None:
            raise ValidationError(f"{path}: unreadable image")
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=2)
        arr = cv2.cvtColor(arr[..., :3], cv2.COLOR_BGR2RGB)
        scale = 65535.0 if arr.dtype == np.uint16 else 255.0
        img = srgb_decode(arr / scale)
    return as_image(img)


def write_image(path, img, bit_depth=8):
    """Write ``img`` as sRGB PNG (8 or 16 bit) or, for ``.imgf``, raw float32."""
    path = Path(path)
    img = as_image(img)
    if path.suffix.lower() == ".imgf":
        h, w, c = img.shape
        body = np.ascontiguousarray(img.transpose(2, 0, 1), dtype="<f4").tobytes()
        path.write_bytes(IMAGE_MAGIC + struct.pack("<III", h, w, c) + body)
        return path
    if bit_depth not in (8, 16):
        raise ValidationError("bit_depth must be 8 or 16")
    top = 255 if bit_depth == 8 else 65535
    enc = np.round(srgb_encode(img) * top).astype(np.uint8 if bit_depth == 8 else np.uint16)
    ok, buf = cv2.imencode(".png", cv2.cvtColor(enc, cv2.COLOR_RGB2BGR))
    if not ok:
        raise ValidationError(f"{path}: PNG encoding failed")
    path.write_bytes(buf.tobytes())
    return path

