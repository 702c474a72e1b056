"""
Lens prescriptions, surface sag geometry and the ``.lens.json`` format.

Conventions
-----------
* lengths in millimetres, wavelengths in nanometres, angles in degrees in
  files and radians internally;
* light travels towards +z; a positive curvature puts the centre of
  curvature on the +z side of the vertex;
* ``Surface.material`` is the medium *after* the surface; the medium before
  the first surface is air;
* the last surface's thickness is the back focal distance to the image plane.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, ParseError, RangeError, ValidationError

D_LINE = 587.6
F_LINE = 486.1
C_LINE = 656.3
WAVELENGTH_BAND = (380.0, 780.0)

HALF_FOV_GRID = (20.0, 30.0, 40.0)
F_NUMBER_GRID = (2.0, 3.0, 4.0)
PIECE_RANGE = (1, 6)
APERTURE_POSITIONS = ("front", "middle", "rear")
MAX_ASPHERE_TERMS = 7  # a4 .. a16

AIR = "air"


@dataclass(frozen=True)
class Material:
    """Glass described by its d-line index and Abbe number.

    ``vd = inf`` gives a dispersion-free medium.
    """

    name: str
    nd: float
    vd: float

    def __post_init__(self):
        if not (math.isfinite(self.nd) and self.nd > 1.0):
            raise ValidationError(f"material {self.name!r}: nd must be > 1, got {self.nd}")
        if math.isnan(self.vd) or self.vd <= 0:
            raise ValidationError(f"material {self.name!r}: vd must be > 0, got {self.vd}")

    @property
    def cauchy_b(self) -> float:
        """Coefficient B (nm^2) of the two-term Cauchy fit."""
        if math.isinf(self.vd):
            return 0.0
        return (self.nd - 1.0) / (self.vd * (F_LINE ** -2 - C_LINE ** -2))

    @property
    def cauchy_a(self) -> float:
        return self.nd - self.cauchy_b / D_LINE ** 2


def refractive_index(material, wavelength):
    """Refractive index of ``material`` at ``wavelength`` (nm).

    Uses ``n = A + B / lambda**2`` with A, B fixed by ``nd`` at 587.6 nm and
    ``vd = (nd - 1) / (nF - nC)``. ``material`` may be ``None`` or ``"air"``
    for vacuum/air (n = 1). Accepts scalars or arrays.
    """
    lam = np.asarray(wavelength, dtype=float)
    lo, hi = WAVELENGTH_BAND
    if np.any(lam < lo) or np.any(lam > hi) or np.any(~np.isfinite(lam)):
        raise RangeError(f"wavelength outside [{lo}, {hi}] nm: {wavelength}")
    if material is None or material == AIR:
        out = np.ones_like(lam)
    else:
        # written relative to the d-line so that n(587.6) == nd exactly
        out = material.nd + material.cauchy_b * (lam ** -2 - D_LINE ** -2)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Surface:
    """One refracting (or dummy) surface.

    Parameters
    ----------
    curvature : float
        Vertex curvature c = 1/R in 1/mm.
    conic : float
        Conic constant k.
    asphere_coeffs : tuple of float
        Polynomial coefficients a4, a6, ... multiplying rho**2, rho**3, ...
        where rho = x**2 + y**2.
    thickness : float
        Axial distance to the next surface (or to the image plane).
    material : str
        Name of the medium after this surface, ``"air"`` or a key of
        ``LensPrescription.materials``.
    semi_aperture : float
        Clear semi-diameter in mm.
    """

    curvature: float = 0.0
    conic: float = 0.0
    asphere_coeffs: tuple = ()
    thickness: float = 0.0
    material: str = AIR
    semi_aperture: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "asphere_coeffs", tuple(float(a) for a in self.asphere_coeffs))
        for name in ("curvature", "conic", "thickness", "semi_aperture"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValidationError(f"surface {name} must be finite, got {v}")
        if not all(math.isfinite(a) for a in self.asphere_coeffs):
            raise ValidationError("asphere coefficients must be finite")
        if len(self.asphere_coeffs) > MAX_ASPHERE_TERMS:
            raise ValidationError(
                f"at most {MAX_ASPHERE_TERMS} asphere terms (a4..a16), got {len(self.asphere_coeffs)}"
            )
        if self.semi_aperture <= 0:
            raise ValidationError(f"semi_aperture must be > 0, got {self.semi_aperture}")
        if self.alpha * self.semi_aperture ** 2 > 1.0:
            raise ValidationError(
                "sag is not real over the clear aperture: "
                f"(1+k)c^2 * semi_aperture^2 = {self.alpha * self.semi_aperture ** 2:.6g} > 1"
            )

    @property
    def alpha(self) -> float:
        return (1.0 + self.conic) * self.curvature ** 2

    @property
    def is_spherical(self) -> bool:
        return self.conic == 0.0 and not any(self.asphere_coeffs)


def _check_rho(surface, rho):
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise DomainError("rho must be >= 0")
    if np.any(surface.alpha * rho > 1.0):
        raise DomainError(f"sag undefined: (1+k)c^2 * rho > 1 for rho={rho.max():.6g}")
    return rho


def _sag(c, alpha, coeffs, rho):
    # no domain checks; rho may be an array
    h = c * rho / (1.0 + np.sqrt(1.0 - alpha * rho))
    if coeffs:
        poly = 0.0
        for a in reversed(coeffs):
            poly = (poly + a) * rho
        h = h + poly * rho
    return h


def _sag_derivative(c, alpha, coeffs, rho):
    s = np.sqrt(1.0 - alpha * rho)
    # d/drho [c rho / (1 + s)] simplifies to c / (2 s)
    d = c / (2.0 * s)
    if coeffs:
        poly = 0.0
        for i in range(len(coeffs) - 1, -1, -1):
            poly = poly * rho + (i + 2) * coeffs[i]
        d = d + poly * rho
    return d


def sag(surface, rho):
    """Surface height h(rho) in mm, with rho = r**2 in mm^2.

    ``h = c rho / (1 + sqrt(1 - (1+k) c^2 rho)) + sum_i a_{2i} rho^i``.

    Raises
    ------
    DomainError
        If ``(1+k) c^2 rho > 1``.
    """
    rho = _check_rho(surface, rho)
    h = _sag(surface.curvature, surface.alpha, surface.asphere_coeffs, rho)
    return float(h) if np.ndim(h) == 0 else h


def sag_derivative(surface, rho):
    """Analytic dh/drho.

    The surface normal at (x, y) is ``normalize(-2x h', -2y h', 1)``.
    """
    rho = _check_rho(surface, rho)
    d = _sag_derivative(surface.curvature, surface.alpha, surface.asphere_coeffs, rho)
    if np.ndim(d) == 0:
        return float(d)
    return np.broadcast_to(d, rho.shape).copy()


@dataclass(frozen=True)
class DesignSpec:
    piece_count: int
    half_fov_deg: float
    f_number: float
    aperture_position: str

    def validate(self, check_grid=True):
        if self.aperture_position not in APERTURE_POSITIONS:
            raise ValidationError(
                f"aperture_position must be one of {APERTURE_POSITIONS}, got {self.aperture_position!r}"
            )
        if not (0 < self.half_fov_deg < 90):
            raise ValidationError(f"half_fov_deg must be in (0, 90), got {self.half_fov_deg}")
        if not self.f_number > 0:
            raise ValidationError(f"f_number must be > 0, got {self.f_number}")
        if self.piece_count < 1:
            raise ValidationError(f"piece_count must be >= 1, got {self.piece_count}")
        if not check_grid:
            return self
        lo, hi = PIECE_RANGE
        if not lo <= self.piece_count <= hi:
            raise ValidationError(f"piece_count must be in [{lo}, {hi}], got {self.piece_count}")
        if self.half_fov_deg not in HALF_FOV_GRID:
            raise ValidationError(f"half_fov_deg must be one of {HALF_FOV_GRID}, got {self.half_fov_deg}")
        if self.f_number not in F_NUMBER_GRID:
            raise ValidationError(f"f_number must be one of {F_NUMBER_GRID}, got {self.f_number}")
        if self.aperture_position == "middle" and self.piece_count < 2:
            raise ValidationError("a middle aperture needs at least two pieces")
        return self


@dataclass(frozen=True)
class SensorConfig:
    pixel_pitch_um: float
    width: int
    height: int

    def __post_init__(self):
        if not (math.isfinite(self.pixel_pitch_um) and self.pixel_pitch_um > 0):
            raise ValidationError(f"pixel_pitch_um must be > 0, got {self.pixel_pitch_um}")
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"sensor resolution must be positive, got {self.width}x{self.height}")

    @property
    def pixel_pitch_mm(self) -> float:
        return self.pixel_pitch_um * 1e-3


@dataclass(frozen=True)
class LensPrescription:
    surfaces: tuple
    stop_index: int
    spec: DesignSpec
    sensor: SensorConfig
    materials: dict = field(default_factory=dict)
    lens_id: str = "lens"

    def __post_init__(self):
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        object.__setattr__(self, "materials", dict(self.materials))

    def validate(self, check_spec=True):
        """Check every structural invariant; returns ``self``."""
        if not self.surfaces:
            raise ValidationError("prescription has no surfaces")
        if not 0 <= self.stop_index < len(self.surfaces):
            raise ValidationError(
                f"stop_index {self.stop_index} out of range for {len(self.surfaces)} surfaces"
            )
        for i, s in enumerate(self.surfaces):
            if s.material != AIR and s.material not in self.materials:
                raise ValidationError(f"surface {i}: unknown material {s.material!r}")
        refracting = [i for i in range(len(self.surfaces)) if self.medium_index_differs(i)]
        if not refracting:
            raise ValidationError("prescription needs at least one refracting surface")
        if self.surfaces[-1].material != AIR:
            raise ValidationError("the image space (after the last surface) must be air")
        if self.surfaces[-1].thickness <= 0:
            raise ValidationError("last thickness (back focal distance) must be > 0")
        self.spec.validate(check_grid=check_spec)
        return self

    def medium_before(self, i):
        return AIR if i == 0 else self.surfaces[i - 1].material

    def medium_index_differs(self, i):
        a, b = self.medium_before(i), self.surfaces[i].material
        if a == b:
            return False
        ma, mb = self.material(a), self.material(b)
        if ma is None or mb is None:
            return True
        return (ma.nd, ma.vd) != (mb.nd, mb.vd)

    def material(self, name):
        return None if name is None or name == AIR else self.materials[name]

    def index_after(self, i, wavelength):
        return refractive_index(self.material(self.surfaces[i].material), wavelength)

    def index_before(self, i, wavelength):
        return refractive_index(self.material(self.medium_before(i)), wavelength)

    @property
    def vertex_z(self):
        """z of each surface vertex; the first surface sits at z = 0."""
        z = np.concatenate([[0.0], np.cumsum([s.thickness for s in self.surfaces])])
        return z[:-1]

    @property
    def image_z(self) -> float:
        return float(sum(s.thickness for s in self.surfaces))

    def with_surfaces(self, surfaces):
        return replace(self, surfaces=tuple(surfaces))


# ---------------------------------------------------------------------------
# file format

def _num(obj, key, path, kind=float):
    if key not in obj:
        raise ParseError("missing field", field=f"{path}.{key}" if path else key)
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"expected a number, got {v!r}", field=f"{path}.{key}" if path else key)
    if kind is int:
        if float(v) != int(v):
            raise ParseError(f"expected an integer, got {v!r}", field=f"{path}.{key}")
        return int(v)
    return float(v)


def lens_from_dict(data, lens_id="lens", check_spec=True):
    """Build and validate a prescription from the decoded JSON object."""
    if not isinstance(data, dict):
        raise ParseError("top level must be an object")
    for key in ("spec", "sensor", "stop_index", "surfaces"):
        if key not in data:
            raise ParseError("missing field", field=key)
    sp = data["spec"]
    if not isinstance(sp, dict):
        raise ParseError("expected an object", field="spec")
    position = sp.get("aperture_position")
    if not isinstance(position, str):
        raise ParseError("expected a string", field="spec.aperture_position")
    spec = DesignSpec(
        piece_count=_num(sp, "pieces", "spec", int),
        half_fov_deg=_num(sp, "half_fov_deg", "spec"),
        f_number=_num(sp, "f_number", "spec"),
        aperture_position=position,
    )
    se = data["sensor"]
    if not isinstance(se, dict):
        raise ParseError("expected an object", field="sensor")
    sensor = SensorConfig(
        pixel_pitch_um=_num(se, "pixel_pitch_um", "sensor"),
        width=_num(se, "width", "sensor", int),
        height=_num(se, "height", "sensor", int),
    )
    materials = {}
    for name, m in (data.get("materials") or {}).items():
        path = f"materials.{name}"
        if not isinstance(m, dict):
            raise ParseError("expected an object", field=path)
        # vd: null marks a dispersion-free medium
        vd = math.inf if m.get("vd", 0) is None else _num(m, "vd", path)
        materials[name] = Material(name, _num(m, "nd", path), vd)
    if not isinstance(data["surfaces"], list):
        raise ParseError("expected a list", field="surfaces")
    surfaces = []
    for i, s in enumerate(data["surfaces"]):
        path = f"surfaces[{i}]"
        if not isinstance(s, dict):
            raise ParseError("expected an object", field=path)
        coeffs = s.get("a", [])
        if not isinstance(coeffs, list) or not all(
            isinstance(a, (int, float)) and not isinstance(a, bool) for a in coeffs
        ):
            raise ParseError("expected a list of numbers", field=f"{path}.a")
        material = s.get("material", AIR)
        if not isinstance(material, str):
            raise ParseError("expected a string", field=f"{path}.material")
        try:
            surfaces.append(
                Surface(
                    curvature=_num(s, "c", path),
                    conic=_num(s, "k", path) if "k" in s else 0.0,
                    asphere_coeffs=tuple(coeffs),
                    thickness=_num(s, "t", path),
                    material=material,
                    semi_aperture=_num(s, "semi_aperture", path),
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from None
    stop = _num(data, "stop_index", "", int)
    lens = LensPrescription(tuple(surfaces), stop, spec, sensor, materials, lens_id)
    return lens.validate(check_spec=check_spec)


def lens_to_dict(lens):
    return {
        "spec": {
            "pieces": lens.spec.piece_count,
            "half_fov_deg": lens.spec.half_fov_deg,
            "f_number": lens.spec.f_number,
            "aperture_position": lens.spec.aperture_position,
        },
        "sensor": {
            "pixel_pitch_um": lens.sensor.pixel_pitch_um,
            "width": lens.sensor.width,
            "height": lens.sensor.height,
        },
        "stop_index": lens.stop_index,
        "surfaces": [
            {
                "c": s.curvature,
                "k": s.conic,
                "a": list(s.asphere_coeffs),
                "t": s.thickness,
                "material": s.material,
                "semi_aperture": s.semi_aperture,
            }
            for s in lens.surfaces
        ],
        "materials": {
            name: {"nd": m.nd, "vd": None if math.isinf(m.vd) else m.vd}
            for name, m in sorted(lens.materials.items())
        },
    }


def parse_lens(text, lens_id="lens", check_spec=True):
    """Parse ``.lens.json`` content (str or bytes) into a validated prescription.

    Raises
    ------
    ParseError
        Malformed JSON (with line number) or a missing/mistyped field.
    ValidationError
        A prescription invariant does not hold.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not UTF-8: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from None
    return lens_from_dict(data, lens_id=lens_id, check_spec=check_spec)


def serialize_lens(lens) -> bytes:
    """Canonical UTF-8 text: sorted keys, two-space indent, trailing newline."""
    text = json.dumps(lens_to_dict(lens), indent=2, sort_keys=True, allow_nan=False)
    return (text + "\n").encode("utf-8")


def load_lens(path, check_spec=True):
    path = Path(path)
    lens_id = path.name
    for suffix in (".lens.json", ".json"):
        if lens_id.endswith(suffix):
            lens_id = lens_id[: -len(suffix)]
            break
    return parse_lens(path.read_bytes(), lens_id=lens_id, check_spec=check_spec)


def save_lens(lens, path):
    Path(path).write_bytes(serialize_lens(lens))


def edge_thickness(lens, i, aperture=None):
    """Axial gap between surfaces i and i+1 measured at ``aperture``.

    Defaults to the larger of the two semi-apertures. Returns ``-inf`` when
    either sag is undefined there.
    """
    a, b = lens.surfaces[i], lens.surfaces[i + 1]
    r = max(a.semi_aperture, b.semi_aperture) if aperture is None else aperture
    rho = r * r
    if a.alpha * rho > 1.0 or b.alpha * rho > 1.0:
        return -math.inf
    return a.thickness + sag(b, rho) - sag(a, rho)


def spherical(c, t, material=AIR, semi_aperture=1.0):
    """Shorthand for a spherical surface."""
    return Surface(curvature=c, thickness=t, material=material, semi_aperture=semi_aperture)


def make_lens(surfaces: Sequence[Surface], stop_index=0, materials=None, spec=None,
              sensor=None, lens_id="lens", check_spec=True):
    """Convenience constructor with permissive defaults for tests and demos."""
    spec = spec or DesignSpec(1, 20.0, 4.0, "front")
    sensor = sensor or SensorConfig(5.0, 256, 256)
    mats = {}
    for m in materials or ():
        mats[m.name] = m
    return LensPrescription(tuple(surfaces), stop_index, spec, sensor, mats, lens_id).validate(
        check_spec=check_spec
    )
