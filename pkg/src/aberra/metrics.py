"""
Image-quality metrics and the degradation/uniformity scores built on them.

Full-reference metrics (PSNR, SSIM) and the slanted-edge MTF feed a per-cell
optical image quality score OIQ. A 5 x 3 table of OIQ values (field of view
by colour channel) then gives the spatial and chromatic uniformities and the
optical degradation score ODE. :func:`overall_performance` scores restoration
results from six metric columns, three of which (LPIPS, FID, ClipIQA) are
supplied externally.

Notes
-----
None of the composite scores is clamped; out-of-range inputs flow through
the weighted sums unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .errors import (
    AllRoisFailed,
    EdgeTooSteep,
    ImageTooSmall,
    NoEdgeFound,
    ShapeMismatch,
    ValidationError,
    ZeroMean,
)

PSNR_CAP_DB = 50.0
NYQUIST = 0.5
FOV_COUNT = 5
CHANNEL_COUNT = 3


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _gray(x):
    return x.mean(axis=2) if x.ndim == 3 else x


# ---------------------------------------------------------------------------
# PSNR / SSIM

def psnr(a, b, cap=PSNR_CAP_DB):
    """Peak signal-to-noise ratio for unit peak, saturating at ``cap`` dB.

    Any MSE below 1e-10 (and anything else that would score above the cap)
    returns ``cap``, so a perfect match maxes out the PSNR/50 term exactly.
    """
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return float(cap)
    return min(10.0 * math.log10(1.0 / mse), float(cap))


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range=1.0, win_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean structural similarity over the fully-covered ("valid") windows.

    Colour images are reduced to grey by the channel mean first.

    Raises
    ------
    ShapeMismatch, ImageTooSmall
    """
    a, b = _pair(a, b)
    a, b = _gray(a), _gray(b)
    if min(a.shape) < win_size:
        raise ImageTooSmall(f"SSIM needs at least {win_size} px per side, got {a.shape}")
    if np.array_equal(a, b):
        return 1.0
    w = _gaussian_window(win_size, sigma)

    def filt(x):
        return signal.correlate(x, w, mode="valid", method="direct")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# slanted-edge MTF

@dataclass
class MtfCurve:
    """MTF samples (cycles/pixel) of one slanted-edge measurement."""

    frequency: np.ndarray
    modulation: np.ndarray
    angle_deg: float = 0.0
    vertical: bool = True

    def at(self, f):
        return np.interp(f, self.frequency, self.modulation)

    def mtf50(self, f_max=NYQUIST):
        """First frequency where modulation falls to 0.5; ``f_max`` if it never does below it."""
        f, m = self.frequency, self.modulation
        below = np.nonzero((m < 0.5) & (f <= f_max))[0]
        if below.size == 0:
            return float(f_max)
        i = int(below[0])
        if i == 0:
            return 0.0
        f0, f1, m0, m1 = f[i - 1], f[i], m[i - 1], m[i]
        return float(f0 + (m0 - 0.5) * (f1 - f0) / (m0 - m1))

    def area(self, f_max=NYQUIST):
        """Mean modulation over [0, f_max]."""
        keep = self.frequency < f_max
        f = np.append(self.frequency[keep], f_max)
        m = np.append(self.modulation[keep], self.at(f_max))
        return float(np.trapezoid(m, f) / f_max)


def _row_centroids(img, window=None):
    d = np.diff(img, axis=1)
    d = d * np.sign(d.sum()) if d.sum() != 0 else np.abs(d)
    d = np.clip(d, 0.0, None)
    x = np.arange(d.shape[1]) + 0.5
    if window is not None:
        d = d * window
    s = d.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = (d * x).sum(axis=1) / s
    return c, s


def slanted_edge_mtf(roi, edge_angle_hint=None, oversample=4, min_contrast=1e-3,
                     angle_range=(1.5, 15.5)):
    """Edge-method MTF of a region holding one slanted edge.

    Parameters
    ----------
    roi : 2-D array (colour input is reduced by channel mean)
    edge_angle_hint : float, optional
        Edge tilt in degrees from the nearest axis, signed so that positive
        means the edge moves right (or down) along the scan. When given it
        replaces the fitted slope.
    oversample : int
        ESF bins per pixel.
    min_contrast : float
        Median per-line gradient sum below which no edge is reported.
    angle_range : (float, float)
        Accepted edge tilt in degrees.

    Returns
    -------
    MtfCurve
        Normalised to exactly 1 at DC.

    Raises
    ------
    NoEdgeFound, EdgeTooSteep
    """
    img = _gray(np.asarray(roi, dtype=np.float64))
    if img.ndim != 2 or min(img.shape) < 4:
        raise NoEdgeFound(f"ROI of shape {img.shape} is too small")
    gx = np.abs(np.diff(img, axis=1)).sum()
    gy = np.abs(np.diff(img, axis=0)).sum()
    vertical = gx >= gy
    if not vertical:
        img = img.T
    h, w = img.shape

    c, s = _row_centroids(img)
    if not np.median(s) > min_contrast:
        raise NoEdgeFound("gradient energy below threshold")
    rows = np.arange(h, dtype=np.float64)
    ok = np.isfinite(c) & (s > 0.5 * np.median(s))
    if ok.sum() < 3:
        raise NoEdgeFound("too few lines cross the edge")
    slope, offset = np.polyfit(rows[ok], c[ok], 1)
    # second pass with a window around the first fit to shed stray gradients
    xs = np.arange(w - 1) + 0.5
    half = max(4.0, 0.25 * w)
    win = (np.abs(xs[None, :] - (slope * rows[:, None] + offset)) <= half).astype(float)
    c, s = _row_centroids(img, win)
    ok = np.isfinite(c) & (s > 0.5 * np.median(s))
    if ok.sum() >= 3:
        slope, offset = np.polyfit(rows[ok], c[ok], 1)
    if edge_angle_hint is not None:
        slope = math.tan(math.radians(edge_angle_hint))
        offset = float(np.mean(c[ok] - slope * rows[ok]))
    angle = math.degrees(math.atan(slope))
    if not angle_range[0] <= abs(angle) <= angle_range[1]:
        raise EdgeTooSteep(f"edge tilt {angle:.2f} deg outside {angle_range}")

    # signed distance of every pixel centre from the edge, along its normal
    cos_t = math.cos(math.atan(slope))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dist = (xx - (slope * yy + offset)) * cos_t
    # keep the band where every line contributes, so all bins are well fed
    span = math.floor(min(offset + slope * r for r in (0.0, h - 1.0)) * cos_t)
    span = min(span, math.floor((w - max(offset + slope * r for r in (0.0, h - 1.0))) * cos_t))
    if span < 4:
        raise NoEdgeFound("edge too close to the ROI border")
    nb = 2 * span * oversample
    idx = np.floor((dist + span) * oversample).astype(np.intp)
    keep = (idx >= 0) & (idx < nb)
    counts = np.bincount(idx[keep], minlength=nb)
    sums = np.bincount(idx[keep], weights=img[keep], minlength=nb)
    filled = counts > 0
    centres = np.arange(nb)
    esf = np.interp(centres, centres[filled], sums[filled] / counts[filled])

    # central difference, then undo its sinc(2 f d) response below
    lsf = np.zeros(nb)
    lsf[1:-1] = 0.5 * (esf[2:] - esf[:-2])
    if lsf.sum() < 0:
        lsf = -lsf
    lsf *= np.hanning(nb)
    spec = np.abs(np.fft.rfft(lsf))
    if spec[0] <= 0:
        raise NoEdgeFound("edge spread function is flat")
    freq = np.fft.rfftfreq(nb, d=1.0 / oversample)
    mod = spec / spec[0]
    corr = np.sinc(2.0 * freq / oversample)
    valid = freq <= 0.5 * oversample / 2.0  # stay clear of the correction's zero
    mod = np.where(valid, mod / np.where(valid, corr, 1.0), 0.0)
    mod[0] = 1.0
    return MtfCurve(freq[valid], mod[valid], angle, bool(vertical))


# ---------------------------------------------------------------------------
# OIQE

def edge_score(curve):
    """(normalised MTF50 + mean MTF up to Nyquist) / 2 for one curve."""
    mtf50 = min(curve.mtf50() / NYQUIST, 1.0)
    return 0.5 * (mtf50 + curve.area())


def _crop(img, box):
    y0, y1, x0, x1 = box
    return img[y0:y1, x0:x1]


def oiqe(degraded, reference, roi_set, return_failures=False, **mtf_kw):
    """MTF-based optical quality on [0, 1].

    Each ROI scores ``edge_score(degraded) / edge_score(reference)`` clamped to
    [0, 1]; the result is the mean over ROIs that could be measured.

    Parameters
    ----------
    degraded, reference : arrays of equal shape (2-D or colour)
    roi_set : iterable of (y0, y1, x0, x1)
    return_failures : bool
        Also return a list of ``(box, exception)`` for skipped ROIs.

    Raises
    ------
    AllRoisFailed
        When no ROI yields a measurement.
    """
    degraded, reference = _pair(degraded, reference)
    scores, failures = [], []
    for box in roi_set:
        try:
            ref = edge_score(slanted_edge_mtf(_crop(reference, box), **mtf_kw))
            deg = edge_score(slanted_edge_mtf(_crop(degraded, box), **mtf_kw))
        except (NoEdgeFound, EdgeTooSteep) as exc:
            failures.append((tuple(box), exc))
            continue
        scores.append(min(max(deg / ref, 0.0), 1.0))
    if not scores:
        raise AllRoisFailed(f"none of {len(failures)} ROIs could be measured")
    value = math.fsum(scores) / len(scores)
    return (value, failures) if return_failures else value


# ---------------------------------------------------------------------------
# composite scores

@dataclass(frozen=True)
class OiqWeights:
    alpha: float = 0.4
    beta: float = 0.3
    gamma: float = 0.3


@dataclass(frozen=True)
class OdeWeights:
    oiq: float = 0.7
    spatial: float = 0.3
    chromatic: float = 0.01
    sigma: float = 5.0


def oiq(psnr_v, ssim_v, oiqe_v, weights=OiqWeights()):
    """Weighted blend of PSNR/50, (SSIM - 0.5)/0.5 and OIQE; not clamped."""
    return (weights.alpha * psnr_v / 50.0
            + weights.beta * (ssim_v - 0.5) / 0.5
            + weights.gamma * oiqe_v)


def cv(values):
    """Coefficient of variation with the population standard deviation.

    Raises
    ------
    ZeroMean
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValidationError("cv of an empty set")
    mean = math.fsum(v) / v.size
    if mean == 0:
        raise ZeroMean("coefficient of variation is undefined for zero mean")
    if np.all(v == v[0]):
        return 0.0  # the rounded mean can differ from v[0] in the last bit
    var = math.fsum((v - mean) ** 2) / v.size
    return math.sqrt(var) / mean


def uniformity(cv_value, sigma=5.0):
    return math.exp(-sigma * cv_value)


@dataclass(frozen=True)
class SubOiqTable:
    """OIQ per (field of view, channel); shape (5, 3)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (FOV_COUNT, CHANNEL_COUNT):
            raise ValidationError(f"sub-OIQ table must be 5x3, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("sub-OIQ table has non-finite entries")
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, k):
        return cls(np.full((FOV_COUNT, CHANNEL_COUNT), float(k)))

    def fov_means(self):
        return np.array([math.fsum(r) / CHANNEL_COUNT for r in self.values])

    def channel_means(self):
        return np.array([math.fsum(c) / FOV_COUNT for c in self.values.T])


@dataclass
class OdeReport:
    oiq: float
    u_s: float
    u_c: float
    ode: float
    cv_s: float
    cv_c: float
    sub_table: SubOiqTable
    weights_used: OdeWeights = field(default_factory=OdeWeights)

    def check(self, tol=0.0):
        """Recompute the derived fields from the stored ones."""
        w = self.weights_used
        return (abs(self.u_s - uniformity(self.cv_s, w.sigma)) <= tol
                and abs(self.u_c - uniformity(self.cv_c, w.sigma)) <= tol
                and abs(self.ode - (w.oiq * self.oiq + w.spatial * self.u_s + w.chromatic * self.u_c)) <= tol)

    def to_dict(self):
        return {
            "oiq": self.oiq,
            "u_s": self.u_s,
            "u_c": self.u_c,
            "ode": self.ode,
            "cv_s": self.cv_s,
            "cv_c": self.cv_c,
            "sub_oiq": self.sub_table.values.tolist(),
            "weights": {
                "lambda_oiq": self.weights_used.oiq,
                "lambda_s": self.weights_used.spatial,
                "lambda_c": self.weights_used.chromatic,
                "sigma": self.weights_used.sigma,
            },
        }

    @classmethod
    def from_dict(cls, d):
        w = d.get("weights", {})
        weights = OdeWeights(w.get("lambda_oiq", 0.7), w.get("lambda_s", 0.3),
                             w.get("lambda_c", 0.01), w.get("sigma", 5.0))
        return cls(d["oiq"], d["u_s"], d["u_c"], d["ode"], d["cv_s"], d["cv_c"],
                   SubOiqTable(np.array(d["sub_oiq"])), weights)


def ode(sub, weights=OdeWeights()):
    """Optical degradation score from a 5 x 3 sub-OIQ table."""
    if not isinstance(sub, SubOiqTable):
        sub = SubOiqTable(sub)
    mean_oiq = math.fsum(sub.values.ravel()) / sub.values.size
    cv_s = cv(sub.fov_means())
    cv_c = cv(sub.channel_means())
    u_s = uniformity(cv_s, weights.sigma)
    u_c = uniformity(cv_c, weights.sigma)
    value = weights.oiq * mean_oiq + weights.spatial * u_s + weights.chromatic * u_c
    return OdeReport(mean_oiq, u_s, u_c, value, cv_s, cv_c, sub, weights)


@dataclass(frozen=True)
class ExternalScores:
    """Perceptual scores computed elsewhere and passed in as numbers."""

    lpips: float
    fid: float
    clipiqa: float

    def __post_init__(self):
        if min(self.lpips, self.fid, self.clipiqa) < 0:
            raise ValidationError("external scores must be non-negative")
        if self.clipiqa > 1:
            raise ValidationError("clipiqa must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(float(d["lpips"]), float(d["fid"]), float(d["clipiqa"]))
        except KeyError as exc:
            raise ValidationError(f"external scores missing {exc.args[0]!r}") from None


def overall_performance(psnr_v, ssim_v, lpips, fid, oiqe_v, clipiqa):
    """Six-metric overall score; applied verbatim (FID above 100 goes negative)."""
    return (0.4 * psnr_v / 50.0
            + 0.3 * (ssim_v - 0.5) / 0.5
            + 0.4 * (1.0 - lpips) / 0.4
            + 0.3 * oiqe_v
            + 0.1 * (100.0 - fid) / 100.0
            + 0.1 * clipiqa)


def sub_oiq_cell(degraded, reference, box, **mtf_kw):
    """psnr, ssim, oiqe and OIQ of one single-channel ROI."""
    d, r = _crop(degraded, box), _crop(reference, box)
    p, s = psnr(d, r), ssim(d, r)
    e = oiqe(degraded, reference, [box], **mtf_kw)
    return {"psnr": p, "ssim": s, "oiqe": e, "oiq": oiq(p, s, e)}

