"""
Sequential ray tracing through a ``LensPrescription``.

The work is done by :func:`trace_bundle`, which pushes arrays of rays through
every surface at once. :func:`intersect`, :func:`refract` and :func:`trace`
are single-ray wrappers with the exception semantics of the scalar API.
Objects are at infinity, so a field is a direction of incidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    AfocalSystem,
    AllRaysVignetted,
    MissSurface,
    NoConvergence,
    TotalInternalReflection,
    ValidationError,
)
from .lens import D_LINE, _sag, _sag_derivative, refractive_index

NEWTON_TOL = 1e-10
NEWTON_MAXITER = 50
APERTURE_RTOL = 1e-9

ALIVE, VIGNETTED, MISSED, TIR, NO_CONVERGENCE = range(5)
NOTES = {VIGNETTED: "vignetted", MISSED: "missed", TIR: "TIR", NO_CONVERGENCE: "no_convergence"}


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    wavelength: float = D_LINE
    alive: bool = True
    path_note: Optional[str] = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.direction = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-12:
            raise ValidationError("ray direction must be unit length")
        if not self.alive and self.path_note is None:
            raise ValidationError("dead rays need a path_note")


@dataclass
class RayBundle:
    """Arrays describing N rays; ``status`` holds one of the module codes."""

    origins: np.ndarray
    directions: np.ndarray
    wavelengths: np.ndarray
    status: np.ndarray = None

    def __post_init__(self):
        n = len(self.origins)
        self.wavelengths = np.broadcast_to(np.asarray(self.wavelengths, float), (n,)).copy()
        if self.status is None:
            self.status = np.zeros(n, dtype=np.int8)

    @property
    def alive(self):
        return self.status == ALIVE

    def __len__(self):
        return len(self.origins)


# ---------------------------------------------------------------------------
# surface interaction

def _intersect_soa(ox, oy, oz, dx, dy, dz, surface, vertex_z):
    """Component-wise intersection kernel.

    Returns ``(t, x, y, z, nx, ny, nz, status)`` where (nx, ny, nz) is the
    unit normal oriented against the ray; status is ALIVE, MISSED,
    VIGNETTED or NO_CONVERGENCE per ray.
    """
    c, k = surface.curvature, surface.conic
    coeffs = surface.asphere_coeffs
    alpha = surface.alpha
    oz = oz - vertex_z
    status = np.zeros(ox.shape, dtype=np.int8)

    # seed: ray against the base conic c*rho - 2z + c(1+k) z^2 = 0
    ck = c * (1.0 + k)
    a = c * (dx * dx + dy * dy) + ck * dz * dz
    b = 2.0 * (c * (ox * dx + oy * dy) - dz + ck * oz * dz)
    cc = c * (ox * ox + oy * oy) - 2.0 * oz + ck * oz * oz
    with np.errstate(invalid="ignore", divide="ignore"):
        disc = b * b - 4.0 * a * cc
        q = -0.5 * (b + np.copysign(np.sqrt(np.maximum(disc, 0.0)), b))
        t = cc / q
    bad = (disc < 0) | (q == 0) | ~np.isfinite(t)
    if bad.any():
        status[bad] = MISSED
        t = np.where(bad, 0.0, t)

    if any(coeffs):
        active = ~bad
        for _ in range(NEWTON_MAXITER + 1):
            x = ox + t * dx
            y = oy + t * dy
            z = oz + t * dz
            rho = x * x + y * y
            out = active & (alpha * rho > 1.0)
            status[out] = MISSED
            active &= ~out
            r = np.where(active, rho, 0.0)
            f = z - _sag(c, alpha, coeffs, r)
            active &= ~(np.abs(f) < NEWTON_TOL)
            if not active.any():
                break
            fp = dz - _sag_derivative(c, alpha, coeffs, r) * 2.0 * (x * dx + y * dy)
            with np.errstate(invalid="ignore", divide="ignore"):
                t = t - np.where(active, f / fp, 0.0)
        status[active] = NO_CONVERGENCE

    x = ox + t * dx
    y = oy + t * dy
    z = oz + t * dz + vertex_z
    rho = x * x + y * y
    limit = surface.semi_aperture ** 2 * (1.0 + APERTURE_RTOL)
    status[(status == ALIVE) & (rho > limit)] = VIGNETTED
    r = np.where(status == ALIVE, rho, 0.0)
    hp = _sag_derivative(c, alpha, coeffs, r)
    nx = 2.0 * x * hp
    ny = 2.0 * y * hp
    inv = 1.0 / np.sqrt(nx * nx + ny * ny + 1.0)
    nx = nx * inv
    ny = ny * inv
    nz = -inv
    # orient against the incoming ray
    flip = np.where(nx * dx + ny * dy + nz * dz > 0, -1.0, 1.0)
    return t, x, y, z, nx * flip, ny * flip, nz * flip, status


def _refract_soa(dx, dy, dz, nx, ny, nz, n1, n2):
    eta = n1 / n2
    cosi = -(nx * dx + ny * dy + nz * dz)
    sin2t = eta * eta * (1.0 - cosi * cosi)
    tir = sin2t > 1.0
    cost = np.sqrt(np.maximum(1.0 - sin2t, 0.0))
    g = eta * cosi - cost
    tx = eta * dx + g * nx
    ty = eta * dy + g * ny
    tz = eta * dz + g * nz
    inv = 1.0 / np.sqrt(tx * tx + ty * ty + tz * tz)
    return tx * inv, ty * inv, tz * inv, tir


def _intersect_arrays(o, d, surface, vertex_z):
    _, x, y, z, nx, ny, nz, status = _intersect_soa(
        o[:, 0], o[:, 1], o[:, 2], d[:, 0], d[:, 1], d[:, 2], surface, vertex_z
    )
    return np.stack([x, y, z], axis=1), np.stack([nx, ny, nz], axis=1), status


def _refract_arrays(d, nrm, n1, n2):
    tx, ty, tz, tir = _refract_soa(d[:, 0], d[:, 1], d[:, 2], nrm[:, 0], nrm[:, 1], nrm[:, 2], n1, n2)
    return np.stack([tx, ty, tz], axis=1), tir


def intersect(ray, surface, vertex_z):
    """Intersection point and normal (pointing against the ray).

    Raises
    ------
    MissSurface
        The ray misses the surface or lands beyond its semi-aperture; the
        ray is marked dead with ``path_note="vignetted"``.
    NoConvergence
        Newton iteration did not reach 1e-10 mm in 50 steps.
    """
    p, nrm, status = _intersect_arrays(ray.origin[None], ray.direction[None], surface, vertex_z)
    s = status[0]
    if s == NO_CONVERGENCE:
        raise NoConvergence("Newton intersection did not converge in 50 steps")
    if s != ALIVE:
        ray.alive = False
        ray.path_note = "vignetted"
        raise MissSurface(NOTES[s])
    return p[0], nrm[0]


def refract(direction, normal, n1, n2):
    """Vector Snell's law; ``normal`` points against ``direction``.

    Raises
    ------
    TotalInternalReflection
        When ``sin^2(theta_t) > 1``.
    """
    d = np.asarray(direction, float)[None]
    nrm = np.asarray(normal, float)[None]
    out, tir = _refract_arrays(d, nrm, np.array([float(n1)]), np.array([float(n2)]))
    if tir[0]:
        raise TotalInternalReflection(f"n1={n1}, n2={n2}")
    return out[0]


# ---------------------------------------------------------------------------
# whole-system tracing

def trace_bundle(lens, bundle, to_image=True, record=False):
    """Trace a :class:`RayBundle` through every surface of ``lens``.

    Dead rays keep the position where they died and their failure code.
    With ``to_image`` the survivors are propagated to the image plane.
    ``record=True`` also returns the list of per-surface
    ``(points, directions, status)`` snapshots for diagnostics.
    """
    o = np.array(bundle.origins, dtype=float)
    d = np.array(bundle.directions, dtype=float)
    lam_all = bundle.wavelengths
    status = bundle.status.copy()
    history = []
    vz = lens.vertex_z

    idx = np.flatnonzero(status == ALIVE)
    ox, oy, oz = (o[idx, i].copy() for i in range(3))
    dx, dy, dz = (d[idx, i].copy() for i in range(3))
    lam = lam_all[idx]

    def flush(sel):
        # write the rays at local positions ``sel`` back into the output arrays
        g = idx[sel]
        o[g, 0], o[g, 1], o[g, 2] = ox[sel], oy[sel], oz[sel]
        d[g, 0], d[g, 1], d[g, 2] = dx[sel], dy[sel], dz[sel]

    for i, surface in enumerate(lens.surfaces):
        if idx.size == 0:
            break
        _, x, y, z, nx, ny, nz, st = _intersect_soa(ox, oy, oz, dx, dy, dz, surface, vz[i])
        n1 = np.broadcast_to(lens.index_before(i, lam), idx.shape)
        n2 = np.broadcast_to(lens.index_after(i, lam), idx.shape)
        tx, ty, tz, tir = _refract_soa(dx, dy, dz, nx, ny, nz, n1, n2)
        st[(st == ALIVE) & tir] = TIR
        dead = st != ALIVE
        if dead.any():
            flush(dead)
            status[idx[dead]] = st[dead]
            keep = ~dead
            idx = idx[keep]
            lam = lam[keep]
            ox, oy, oz = x[keep], y[keep], z[keep]
            dx, dy, dz = tx[keep], ty[keep], tz[keep]
        else:
            ox, oy, oz, dx, dy, dz = x, y, z, tx, ty, tz
        if record:
            flush(slice(None))
            history.append((o.copy(), d.copy(), status.copy()))

    if to_image and idx.size:
        t = (lens.image_z - oz) / dz
        ox, oy, oz = ox + t * dx, oy + t * dy, oz + t * dz
    flush(slice(None))
    out = RayBundle(o, d, lam_all, status)
    return (out, history) if record else out


def trace(lens, ray):
    """Trace one ray to the image plane; failures leave it dead with a note."""
    b = RayBundle(ray.origin[None], ray.direction[None], np.array([ray.wavelength]))
    res = trace_bundle(lens, b)
    s = int(res.status[0])
    return Ray(
        origin=res.origins[0],
        direction=res.directions[0],
        wavelength=ray.wavelength,
        alive=s == ALIVE,
        path_note=None if s == ALIVE else NOTES[s],
    )


# ---------------------------------------------------------------------------
# paraxial optics

@dataclass(frozen=True)
class ParaxialSummary:
    efl: float
    bfd: float
    entrance_pupil_diameter: float
    entrance_pupil_z: float
    working_f_number: float


def _ynu(lens, y, nu, upto=None, wavelength=D_LINE):
    """Paraxial y-nu trace; stops at the vertex of surface ``upto`` (before refracting)."""
    n_surf = len(lens.surfaces) if upto is None else upto
    for i in range(n_surf):
        s = lens.surfaces[i]
        n1 = lens.index_before(i, wavelength)
        n2 = lens.index_after(i, wavelength)
        nu = nu - y * (n2 - n1) * s.curvature
        if i < n_surf - 1 or upto is not None:
            y = y + s.thickness / n2 * nu
    return y, nu


def paraxial(lens, wavelength=D_LINE):
    """First-order properties from a y-nu sweep (d-line by default).

    Raises
    ------
    AfocalSystem
        When the net power is below 1e-9 / mm.
    """
    y_last, nu = _ynu(lens, 1.0, 0.0, wavelength=wavelength)
    power = -nu
    if abs(power) < 1e-9:
        raise AfocalSystem(f"net power {power:.3g} /mm")
    efl = 1.0 / power
    bfd = -y_last / nu
    a, _ = _ynu(lens, 1.0, 0.0, upto=lens.stop_index, wavelength=wavelength)
    b, _ = _ynu(lens, 0.0, 1.0, upto=lens.stop_index, wavelength=wavelength)
    if abs(a) < 1e-12:
        raise ValidationError("stop is imaged to infinity in object space")
    z_ep = b / a
    epd = 2.0 * lens.surfaces[lens.stop_index].semi_aperture / abs(a)
    return ParaxialSummary(efl, bfd, epd, z_ep, efl / epd)


def stop_scale(lens):
    """Paraxial height ratio stop/entrance pupil (the ``A`` matrix term)."""
    a, _ = _ynu(lens, 1.0, 0.0, upto=lens.stop_index)
    return a


def fit_stop_to_f_number(lens, f_number=None):
    """Return ``lens`` with the stop semi-aperture set so efl/EPD == f_number."""
    f_number = lens.spec.f_number if f_number is None else f_number
    px = paraxial(lens)
    semi = abs(stop_scale(lens)) * abs(px.efl) / f_number / 2.0
    surfaces = list(lens.surfaces)
    from dataclasses import replace

    surfaces[lens.stop_index] = replace(surfaces[lens.stop_index], semi_aperture=semi)
    return lens.with_surfaces(surfaces)


def refocus(lens):
    """Return ``lens`` with the last thickness set to the paraxial BFD."""
    from dataclasses import replace

    bfd = paraxial(lens).bfd
    surfaces = list(lens.surfaces)
    surfaces[-1] = replace(surfaces[-1], thickness=bfd)
    return lens.with_surfaces(surfaces)


# ---------------------------------------------------------------------------
# launching rays from the entrance pupil

def field_direction(tan_x, tan_y):
    """Unit propagation direction for a field given by its angle tangents."""
    v = np.array([tan_x, tan_y, 1.0], dtype=float)
    return v / np.linalg.norm(v)


def pupil_grid(samples):
    """Normalised pupil coordinates of a square grid clipped to the unit disk.

    Cell-centred so the grid is symmetric under 90 degree rotations and
    mirror images.
    """
    u = (np.arange(samples) + 0.5) / samples * 2.0 - 1.0
    px, py = np.meshgrid(u, u)
    keep = px * px + py * py <= 1.0
    return np.stack([px[keep], py[keep]], axis=1)


def launch(lens, direction, pupil_xy, wavelengths, pupil_fraction=1.0, paraxial_summary=None):
    """Bundle of collimated rays crossing the entrance pupil at ``pupil_xy``.

    ``pupil_xy`` are normalised pupil coordinates (unit disk); ``wavelengths``
    broadcasts against them. Rays start upstream of the first surface.
    """
    px = paraxial_summary or paraxial(lens)
    r_ep = 0.5 * px.entrance_pupil_diameter * pupil_fraction
    pupil_xy = np.atleast_2d(np.asarray(pupil_xy, float))
    n = len(pupil_xy)
    direction = np.asarray(direction, float)
    first = lens.surfaces[0]
    reach = first.semi_aperture
    lead = abs(_sag(first.curvature, min(first.alpha, 1.0 / reach ** 2), first.asphere_coeffs, reach ** 2))
    z0 = min(px.entrance_pupil_z, 0.0) - lead - 1.0
    pts = np.empty((n, 3))
    pts[:, 0] = pupil_xy[:, 0] * r_ep
    pts[:, 1] = pupil_xy[:, 1] * r_ep
    pts[:, 2] = px.entrance_pupil_z
    s = (z0 - px.entrance_pupil_z) / direction[2]
    origins = pts + s * direction
    dirs = np.broadcast_to(direction, (n, 3)).copy()
    lam = np.broadcast_to(np.asarray(wavelengths, float), (n,)).copy()
    return RayBundle(origins, dirs, lam)


def chief_ray_hit(lens, direction, wavelength=D_LINE, paraxial_summary=None):
    """Image-plane (x, y) of the ray through the entrance pupil centre."""
    b = launch(lens, direction, [[0.0, 0.0]], wavelength, paraxial_summary=paraxial_summary)
    res = trace_bundle(lens, b)
    if res.status[0] != ALIVE:
        raise AllRaysVignetted(f"chief ray failed: {NOTES[int(res.status[0])]}")
    return res.origins[0, :2].copy()


# ---------------------------------------------------------------------------
# spot diagrams

@dataclass
class SpotDiagram:
    field_angle: float
    wavelength: float
    hits: np.ndarray
    centroid: tuple = field(default=(0.0, 0.0))
    rms_radius: float = 0.0

    @classmethod
    def from_hits(cls, hits, field_angle=0.0, wavelength=D_LINE):
        hits = np.asarray(hits, float).reshape(-1, 2)
        if len(hits) == 0:
            raise AllRaysVignetted("no surviving rays")
        n = len(hits)
        cx = math.fsum(hits[:, 0]) / n
        cy = math.fsum(hits[:, 1]) / n
        r2 = (hits[:, 0] - cx) ** 2 + (hits[:, 1] - cy) ** 2
        rms = math.sqrt(math.fsum(r2) / n)
        return cls(field_angle, wavelength, hits, (cx, cy), rms)


def spot_diagram(lens, field_angle, wavelength=D_LINE, pupil_samples=32, pupil_fraction=1.0):
    """Image-plane spot for a field angle (degrees, in the y-z plane).

    Raises
    ------
    AllRaysVignetted
        If no ray reaches the image plane.
    """
    if pupil_samples < 16:
        raise ValidationError("pupil_samples must be >= 16")
    th = math.radians(field_angle)
    direction = np.array([0.0, math.sin(th), math.cos(th)])
    b = launch(lens, direction, pupil_grid(pupil_samples), wavelength, pupil_fraction)
    res = trace_bundle(lens, b)
    return SpotDiagram.from_hits(res.origins[res.alive, :2], field_angle, wavelength)


def trace_rows(lens, field_angle, wavelength=D_LINE, pupil_samples=32):
    """Per-ray image-plane records ``(x, y, wavelength, alive, note)`` for CSV export."""
    th = math.radians(field_angle)
    direction = np.array([0.0, math.sin(th), math.cos(th)])
    b = launch(lens, direction, pupil_grid(pupil_samples), wavelength)
    res = trace_bundle(lens, b)
    rows = []
    for (x, y, _), lam, s in zip(res.origins, res.wavelengths, res.status):
        rows.append((x, y, lam, s == ALIVE, NOTES.get(int(s), "")))
    return rows
