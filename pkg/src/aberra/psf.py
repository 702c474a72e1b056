"""
Spatially varying RGB point spread functions from dense ray tracing.

A :class:`PsfGrid` holds one R/G/B kernel triplet per sensor patch. Kernels
are geometric: image-plane ray hits are splatted bilinearly onto a pixel grid
at the sensor pitch, centred on the chief ray of the green reference
wavelength so lateral colour survives.

Field positions are normalised sensor coordinates ``(u, v)`` in [-1, 1]
(u along columns, v along rows). The sensor corner maps to the lens half
field of view; the image is inverted, so a patch at +u is fed by light
arriving from -x.
"""

from __future__ import annotations

import csv
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AllRaysVignetted, KernelOverflow, PatchError, ValidationError
from .raytrace import ALIVE, chief_ray_hit, launch, paraxial, pupil_grid, trace_bundle

CHANNELS = ("R", "G", "B")
DEFAULT_WAVELENGTHS = np.arange(400.0, 701.0, 10.0)
DEFAULT_KERNEL_PX = 31
DEFAULT_PUPIL_SAMPLES = 48
OVERFLOW_LIMIT = 0.01

GRID_MAGIC = b"PSFG"
GRID_VERSION = 1


@dataclass(frozen=True)
class SpectralResponse:
    """Camera response: per-channel weights on a uniform wavelength grid.

    ``weights`` has shape (3, n) in R, G, B order; each row sums to 1.
    """

    wavelengths: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.wavelengths, float)
        w = np.asarray(self.weights, float)
        if w.shape != (3, lam.size):
            raise ValidationError(f"weights must have shape (3, {lam.size}), got {w.shape}")
        if np.any(w < 0):
            raise ValidationError("response weights must be non-negative")
        if lam.size > 2 and not np.allclose(np.diff(lam), lam[1] - lam[0]):
            raise ValidationError("response wavelengths must be uniformly spaced")
        sums = w.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValidationError(f"each channel must sum to 1, got {sums}")
        object.__setattr__(self, "wavelengths", lam)
        object.__setattr__(self, "weights", w)

    @classmethod
    def normalized(cls, wavelengths, r, g, b):
        w = np.array([r, g, b], dtype=float)
        return cls(wavelengths, w / w.sum(axis=1, keepdims=True))

    @classmethod
    def default(cls, wavelengths=DEFAULT_WAVELENGTHS):
        """Gaussian responses centred at 610/540/460 nm (sigma 45/40/35 nm)."""
        lam = np.asarray(wavelengths, float)
        g = lambda mu, s: np.exp(-0.5 * ((lam - mu) / s) ** 2)  # noqa: E731
        return cls.normalized(lam, g(610.0, 45.0), g(540.0, 40.0), g(460.0, 35.0))

    @classmethod
    def monochromatic(cls, wavelength):
        return cls(np.array([float(wavelength)]), np.ones((3, 1)))

    @classmethod
    def from_csv(cls, path):
        """Read ``wavelength_nm,r,g,b`` rows; weights are normalised per channel."""
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh)]
        if not rows:
            raise ValidationError(f"{path}: empty response table")
        try:
            lam = [float(r["wavelength_nm"]) for r in rows]
            cols = [[float(r[c]) for r in rows] for c in ("r", "g", "b")]
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"{path}: bad response table ({exc})") from None
        return cls.normalized(lam, *cols)

    @property
    def reference_wavelength(self) -> float:
        """Response-weighted mean wavelength of the green channel."""
        return float(self.weights[1] @ self.wavelengths)


@dataclass
class Psf:
    kernel: np.ndarray
    channel: str
    field_position: tuple

    def __post_init__(self):
        k = self.kernel
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
            raise ValidationError(f"kernel must be square with odd side, got {k.shape}")

    @property
    def support(self) -> int:
        return self.kernel.shape[0]


@dataclass(frozen=True)
class PatchGeometry:
    """Sensor size and the patch tiling in pixels (50 % overlap by default)."""

    sensor_h: int
    sensor_w: int
    patch_h: int
    patch_w: int
    overlap_h: int
    overlap_w: int

    @classmethod
    def for_grid(cls, sensor_h, sensor_w, rows, cols):
        sh, sw = sensor_h / rows, sensor_w / cols
        ph, pw = int(math.ceil(2 * sh)), int(math.ceil(2 * sw))
        return cls(sensor_h, sensor_w, ph, pw, ph - int(math.ceil(sh)), pw - int(math.ceil(sw)))

    def as_tuple(self):
        return (self.sensor_h, self.sensor_w, self.patch_h, self.patch_w, self.overlap_h, self.overlap_w)


def patch_centers(rows, cols):
    """Normalised (u, v) of every patch centre, shape (rows, cols, 2)."""
    u = (2.0 * np.arange(cols) + 1.0 - cols) / cols
    v = (2.0 * np.arange(rows) + 1.0 - rows) / rows
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


@dataclass
class PsfGrid:
    """Per-patch, per-channel kernels, shape (rows, cols, 3, k, k), float32."""

    kernels: np.ndarray
    geometry: PatchGeometry
    lens_id: str = "lens"

    def __post_init__(self):
        k = np.asarray(self.kernels)
        if k.ndim != 5 or k.shape[2] != 3 or k.shape[3] != k.shape[4] or k.shape[3] % 2 == 0:
            raise ValidationError(f"kernels must have shape (rows, cols, 3, k, k) with odd k, got {k.shape}")
        self.kernels = np.ascontiguousarray(k, dtype=np.float32)

    @property
    def rows(self):
        return self.kernels.shape[0]

    @property
    def cols(self):
        return self.kernels.shape[1]

    @property
    def kernel_px(self):
        return self.kernels.shape[3]

    @property
    def field_positions(self):
        return patch_centers(self.rows, self.cols)

    def psf(self, i, j, channel):
        c = CHANNELS.index(channel) if isinstance(channel, str) else channel
        u, v = self.field_positions[i, j]
        return Psf(self.kernels[i, j, c].astype(float), CHANNELS[c], (float(u), float(v)))

    def to_bytes(self):
        lid = self.lens_id.encode("utf-8")
        header = struct.pack(
            "<4sIIII6II", GRID_MAGIC, GRID_VERSION, self.rows, self.cols, self.kernel_px,
            *self.geometry.as_tuple(), len(lid),
        )
        return header + lid + self.kernels.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data):
        head = struct.calcsize("<4sIIII6II")
        if len(data) < head:
            raise ValidationError("truncated PSF grid header")
        magic, version, rows, cols, k, *geo, nlid = struct.unpack_from("<4sIIII6II", data)
        if magic != GRID_MAGIC:
            raise ValidationError(f"bad magic {magic!r}")
        if version != GRID_VERSION:
            raise ValidationError(f"unsupported PSF grid version {version}")
        lens_id = data[head:head + nlid].decode("utf-8")
        body = np.frombuffer(data, dtype="<f4", offset=head + nlid)
        if body.size != rows * cols * 3 * k * k:
            raise ValidationError("PSF grid payload size does not match its header")
        kernels = body.reshape(rows, cols, 3, k, k).astype(np.float32)
        return cls(kernels, PatchGeometry(*geo), lens_id)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# binning

def splat_hits(offsets_px, kernel_px, weights=None):
    """Bilinear splat of (col, row) pixel offsets around the kernel centre.

    Returns ``(kernel, outside)``: the un-normalised kernel and a boolean
    mask of hits lying outside the kernel window.
    """
    offsets_px = np.asarray(offsets_px, float).reshape(-1, 2)
    h = kernel_px // 2
    pos = offsets_px + h
    outside = np.any((pos < -0.5) | (pos > kernel_px - 0.5), axis=1)
    w = np.ones(len(pos)) if weights is None else np.asarray(weights, float)
    i0 = np.floor(pos).astype(np.int64)
    f = pos - i0
    kernel = np.zeros(kernel_px * kernel_px)
    for dc, dr in ((0, 0), (1, 0), (0, 1), (1, 1)):
        c = i0[:, 0] + dc
        r = i0[:, 1] + dr
        wc = f[:, 0] if dc else 1.0 - f[:, 0]
        wr = f[:, 1] if dr else 1.0 - f[:, 1]
        ok = (c >= 0) & (c < kernel_px) & (r >= 0) & (r < kernel_px)
        kernel += np.bincount(r[ok] * kernel_px + c[ok], weights=(w * wc * wr)[ok], minlength=kernel_px ** 2)
    return kernel.reshape(kernel_px, kernel_px), outside


def bin_hits(hits_mm, center_mm, pitch_mm, kernel_px):
    """Unit-sum kernel from image-plane hits (mm) around ``center_mm``.

    Raises
    ------
    KernelOverflow
        When more than 1 % of the hits fall outside the window.
    """
    if kernel_px % 2 == 0:
        raise ValidationError("kernel_px must be odd")
    hits_mm = np.asarray(hits_mm, float).reshape(-1, 2)
    if len(hits_mm) == 0:
        raise AllRaysVignetted("no hits to bin")
    offsets = (hits_mm - np.asarray(center_mm, float)) / pitch_mm
    kernel, outside = splat_hits(offsets, kernel_px)
    frac = outside.mean()
    if frac > OVERFLOW_LIMIT:
        raise KernelOverflow(frac, kernel_px)
    return kernel / kernel.sum()


# ---------------------------------------------------------------------------
# ray-traced kernels

def field_to_direction(lens, field_position):
    """Incident direction feeding the normalised sensor position ``(u, v)``.

    The sensor corner maps to ``half_fov_deg``. Sensor and image-plane axes
    share orientation, so the chief ray lands on the same side as ``(u, v)``
    and kernels are not mirrored; the inversion lives on the object side.
    """
    u, v = map(float, field_position)
    w, h = lens.sensor.width, lens.sensor.height
    x, y = u * w / 2.0, v * h / 2.0
    half_diag = math.hypot(w / 2.0, h / 2.0)
    if math.hypot(x, y) > half_diag * (1 + 1e-12):
        raise ValidationError(f"field position {field_position} lies outside the sensor")
    t = math.tan(math.radians(lens.spec.half_fov_deg)) / half_diag
    d = np.array([x * t, y * t, 1.0])
    return d / np.linalg.norm(d)


def _trace_field(lens, field_position, wavelengths, pupil_samples, px=None):
    px = px or paraxial(lens)
    direction = field_to_direction(lens, field_position)
    grid = pupil_grid(pupil_samples)
    lam = np.asarray(wavelengths, float)
    pupil = np.tile(grid, (lam.size, 1))
    lam_per_ray = np.repeat(lam, len(grid))
    res = trace_bundle(lens, launch(lens, direction, pupil, lam_per_ray, paraxial_summary=px))
    return direction, res, lam_per_ray


def raster_psf(lens, field_position, wavelength, pupil_samples=DEFAULT_PUPIL_SAMPLES,
               kernel_px=DEFAULT_KERNEL_PX):
    """Monochromatic unit-sum kernel centred on the chief ray at ``wavelength``."""
    px = paraxial(lens)
    direction, res, _ = _trace_field(lens, field_position, [wavelength], pupil_samples, px)
    center = chief_ray_hit(lens, direction, wavelength, px)
    hits = res.origins[res.status == ALIVE, :2]
    return bin_hits(hits, center, lens.sensor.pixel_pitch_mm, kernel_px)


def rgb_psf(lens, field_position, response=None, pupil_samples=DEFAULT_PUPIL_SAMPLES,
            kernel_px=DEFAULT_KERNEL_PX, paraxial_summary=None):
    """R, G, B kernels at one field position.

    Each monochromatic kernel is normalised to unit sum, weighted by the
    channel response and summed; the result is renormalised. All three
    channels share the green reference chief ray as their centre.
    """
    response = response or SpectralResponse.default()
    px = paraxial_summary or paraxial(lens)
    lam = response.wavelengths
    direction, res, lam_per_ray = _trace_field(lens, field_position, lam, pupil_samples, px)
    center = chief_ray_hit(lens, direction, response.reference_wavelength, px)
    alive = res.status == ALIVE
    offsets = (res.origins[:, :2] - center) / lens.sensor.pixel_pitch_mm
    band = np.searchsorted(lam, lam_per_ray)

    n = lam.size
    rasters = np.zeros((n, kernel_px * kernel_px))
    out_frac = np.zeros(n)
    for b in range(n):
        sel = alive & (band == b)
        if not sel.any():
            continue
        k, outside = splat_hits(offsets[sel], kernel_px)
        out_frac[b] = outside.mean()
        total = k.sum()
        if total > 0:
            rasters[b] = k.ravel() / total

    kernels = []
    for c, name in enumerate(CHANNELS):
        w = response.weights[c] * (rasters.sum(axis=1) > 0)
        if w.sum() == 0:
            raise AllRaysVignetted(f"channel {name}: no surviving rays at {field_position}")
        frac = float(w @ out_frac / w.sum())
        if frac > OVERFLOW_LIMIT:
            raise KernelOverflow(frac, kernel_px)
        k = (w @ rasters).reshape(kernel_px, kernel_px)
        kernels.append(Psf(k / k.sum(), name, tuple(map(float, field_position))))
    return tuple(kernels)


def build_grid(lens, patch_rows=8, patch_cols=8, response=None, pupil_samples=DEFAULT_PUPIL_SAMPLES,
               kernel_px=DEFAULT_KERNEL_PX, threads=None, escalate=True):
    """Ray-trace one RGB kernel triplet per patch centre.

    On :class:`KernelOverflow` the whole grid is rebuilt once with a kernel
    side of ``2 * kernel_px + 1``. Any other per-patch failure aborts with
    :class:`PatchError` naming the patch index.
    """
    if patch_rows < 1 or patch_cols < 1:
        raise ValidationError("patch_rows and patch_cols must be >= 1")
    response = response or SpectralResponse.default()
    px = paraxial(lens)
    centers = patch_centers(patch_rows, patch_cols)
    index = [(i, j) for i in range(patch_rows) for j in range(patch_cols)]

    def one(ij, k):
        try:
            triplet = rgb_psf(lens, centers[ij], response, pupil_samples, k, px)
        except KernelOverflow:
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the patch index
            raise PatchError(ij, exc) from exc
        return np.stack([p.kernel for p in triplet])

    def run(k):
        if threads == 1:
            results = [one(ij, k) for ij in index]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(lambda ij: one(ij, k), index))
        out = np.stack(results).reshape(patch_rows, patch_cols, 3, k, k)
        return out

    try:
        kernels = run(kernel_px)
    except KernelOverflow:
        if not escalate:
            raise
        kernels = run(2 * kernel_px + 1)
    geometry = PatchGeometry.for_grid(lens.sensor.height, lens.sensor.width, patch_rows, patch_cols)
    return PsfGrid(kernels.astype(np.float32), geometry, lens.lens_id)


# ---------------------------------------------------------------------------
# synthetic grids

def gaussian_kernel(sigma, kernel_px=None):
    """Sampled isotropic Gaussian normalised to unit sum (delta for sigma=0)."""
    if kernel_px is None:
        kernel_px = 2 * int(math.ceil(4 * sigma)) + 1 if sigma > 0 else 1
    h = kernel_px // 2
    if sigma <= 0:
        k = np.zeros((kernel_px, kernel_px))
        k[h, h] = 1.0
        return k
    x = np.arange(-h, h + 1)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def synthetic_grid(sigma_fn, sensor_hw, rows=8, cols=8, kernel_px=31, lens_id="synthetic"):
    """Grid of Gaussian kernels with ``sigma_fn(u, v, channel) -> sigma`` (pixels)."""
    h, w = sensor_hw
    centers = patch_centers(rows, cols)
    kernels = np.zeros((rows, cols, 3, kernel_px, kernel_px))
    for i in range(rows):
        for j in range(cols):
            u, v = centers[i, j]
            for c in range(3):
                kernels[i, j, c] = gaussian_kernel(sigma_fn(u, v, c), kernel_px)
    return PsfGrid(kernels, PatchGeometry.for_grid(h, w, rows, cols), lens_id)


def identity_grid(sensor_hw, rows=1, cols=1, kernel_px=1, lens_id="identity"):
    return synthetic_grid(lambda u, v, c: 0.0, sensor_hw, rows, cols, kernel_px, lens_id)
