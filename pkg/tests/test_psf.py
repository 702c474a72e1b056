import math
from dataclasses import replace

import numpy as np
import pytest

from aberra.errors import KernelOverflow, PatchError, ValidationError
from aberra.lens import Material, Surface, make_lens, DesignSpec, SensorConfig
from aberra.psf import (
    SpectralResponse,
    PsfGrid,
    bin_hits,
    build_grid,
    field_to_direction,
    gaussian_kernel,
    patch_centers,
    raster_psf,
    rgb_psf,
    splat_hits,
    synthetic_grid,
)
from aberra.raytrace import chief_ray_hit, paraxial

FAST = dict(pupil_samples=24)


def centroid(k):
    y, x = np.mgrid[: k.shape[0], : k.shape[1]]
    return (k * x).sum() / k.sum(), (k * y).sum() / k.sum()


def second_moment(k):
    cx, cy = centroid(k)
    y, x = np.mgrid[: k.shape[0], : k.shape[1]]
    return math.sqrt((k * ((x - cx) ** 2 + (y - cy) ** 2)).sum() / k.sum())


# ---------------------------------------------------------------------------
# binning

def test_all_hits_at_one_point_is_delta():
    hits = np.full((500, 2), 0.25)
    k = bin_hits(hits, (0.25, 0.25), 0.01, 7)
    expected = np.zeros((7, 7))
    expected[3, 3] = 1.0
    assert np.array_equal(k, expected)


def test_two_clusters_one_pixel_apart():
    pitch = 0.005
    hits = np.array([[pitch, 0.0]] * 50 + [[-pitch, 0.0]] * 50)
    k = bin_hits(hits, (0.0, 0.0), pitch, 5)
    assert k[2, 3] == pytest.approx(0.5, abs=1e-15)
    assert k[2, 1] == pytest.approx(0.5, abs=1e-15)
    assert k.sum() == pytest.approx(1.0)
    assert np.count_nonzero(k) == 2


def test_bilinear_splat_conserves_weight():
    rng = np.random.default_rng(0)
    offsets = rng.uniform(-3, 3, size=(1000, 2))
    k, outside = splat_hits(offsets, 9)
    assert not outside.any()
    assert k.sum() == pytest.approx(1000.0)
    # first moment of the splat equals the mean offset (bilinear splatting is exact for linears)
    cx, cy = centroid(k)
    assert cx - 4 == pytest.approx(offsets[:, 0].mean(), abs=1e-12)
    assert cy - 4 == pytest.approx(offsets[:, 1].mean(), abs=1e-12)


def test_kernel_overflow():
    hits = np.array([[0.0, 0.0]] * 90 + [[1.0, 0.0]] * 10)
    with pytest.raises(KernelOverflow) as exc:
        bin_hits(hits, (0, 0), 0.01, 11)
    assert exc.value.fraction == pytest.approx(0.1)


# ---------------------------------------------------------------------------
# spectral response

def test_default_response_normalised():
    r = SpectralResponse.default()
    assert r.wavelengths[0] == 400 and r.wavelengths[-1] == 700 and r.wavelengths.size == 31
    np.testing.assert_allclose(r.weights.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(r.weights >= 0)
    peaks = r.wavelengths[np.argmax(r.weights, axis=1)]
    assert list(peaks) == [610, 540, 460]


def test_response_from_csv(tmp_path):
    p = tmp_path / "resp.csv"
    p.write_text("wavelength_nm,r,g,b\n500,0,1,3\n600,2,1,1\n")
    r = SpectralResponse.from_csv(p)
    np.testing.assert_allclose(r.weights, [[0, 1], [0.5, 0.5], [0.75, 0.25]])


def test_response_rejects_negative():
    with pytest.raises(ValidationError):
        SpectralResponse([500.0, 510.0], [[1, 0], [0.5, 0.5], [-0.1, 1.1]])


# ---------------------------------------------------------------------------
# traced kernels

def test_raster_kernel_contract(singlet):
    k = raster_psf(singlet, (0.5, -0.3), 550.0, kernel_px=31, **FAST)
    assert k.shape == (31, 31)
    assert np.all(k >= 0)
    assert abs(k.sum() - 1) < 1e-6


def test_field_outside_sensor_rejected(singlet):
    with pytest.raises(ValidationError):
        field_to_direction(singlet, (1.0, 1.0001))


def test_corner_field_is_half_fov(singlet):
    d = field_to_direction(singlet, (1.0, 1.0))
    assert math.degrees(math.acos(d[2])) == pytest.approx(singlet.spec.half_fov_deg, abs=1e-12)


def dispersion_free(lens):
    mats = {n: Material(n, m.nd, math.inf) for n, m in lens.materials.items()}
    return replace(lens, materials=mats)


def test_dispersion_free_channels_identical(singlet):
    r, g, b = rgb_psf(dispersion_free(singlet), (0.7, 0.2), **FAST)
    assert np.max(np.abs(r.kernel - g.kernel)) < 1e-9
    assert np.max(np.abs(b.kernel - g.kernel)) < 1e-9


def test_single_wavelength_response_equals_raster(singlet):
    resp = SpectralResponse.monochromatic(550.0)
    trip = rgb_psf(singlet, (-0.4, 0.6), resp, **FAST)
    mono = raster_psf(singlet, (-0.4, 0.6), 550.0, **FAST)
    for p in trip:
        np.testing.assert_allclose(p.kernel, mono, atol=1e-15)


def test_chief_ray_lands_on_patch_side(singlet):
    d = field_to_direction(singlet, (0.0, 0.9))
    assert chief_ray_hit(singlet, d)[1] > 0


@pytest.mark.parametrize("name", ["singlet", "triplet"])
def test_lateral_colour_sign(name, request):
    lens = request.getfixturevalue(name)
    field = (0.0, 0.9)
    d = field_to_direction(lens, field)
    # oracle: real chief-ray heights per channel peak relative to green
    y = {lam: chief_ray_hit(lens, d, lam)[1] for lam in (610.0, 540.0, 460.0)}
    r, g, b = rgb_psf(lens, field, pupil_samples=48, kernel_px=63)
    dr = centroid(r.kernel)[1] - centroid(g.kernel)[1]
    db = centroid(b.kernel)[1] - centroid(g.kernel)[1]
    assert dr * db < 0
    assert np.sign(dr) == np.sign(y[610.0] - y[540.0])
    assert np.sign(db) == np.sign(y[460.0] - y[540.0])


def test_paraxial_focal_length_colour(singlet):
    # crown singlet: shorter focal length in blue
    assert paraxial(singlet, 460.0).efl < paraxial(singlet, 540.0).efl < paraxial(singlet, 610.0).efl


# ---------------------------------------------------------------------------
# grids

def test_one_by_one_grid(singlet):
    g = build_grid(singlet, 1, 1, **FAST)
    assert g.kernels.shape[:3] == (1, 1, 3)
    assert g.psf(0, 0, "G").field_position == (0.0, 0.0)


def test_symmetric_grid_rotation(singlet):
    g = build_grid(singlet, 3, 3, **FAST)
    k = g.kernels.astype(float)
    # 180 degrees
    assert np.max(np.abs(k[0, 0] - k[2, 2][:, ::-1, ::-1])) < 1e-6
    # 90 degree multiples on a square sensor
    for quarter in range(1, 4):
        rot = np.rot90(k, quarter, axes=(0, 1))  # rotate the patch layout
        rot = np.rot90(rot, quarter, axes=(3, 4))  # and each kernel the same way
        assert np.max(np.abs(rot - k)) < 1e-6


def test_grid_invariants(triplet):
    g = build_grid(triplet, 3, 3, **FAST)
    k = g.kernels.astype(float)
    assert np.all(k >= 0)
    np.testing.assert_allclose(k.sum(axis=(3, 4)), 1.0, atol=1e-6)
    assert g.geometry.sensor_h == triplet.sensor.height


def test_one_by_one_equals_centre_of_three_by_three(triplet):
    g1 = build_grid(triplet, 1, 1, **FAST)
    g3 = build_grid(triplet, 3, 3, **FAST)
    assert np.array_equal(g1.kernels[0, 0], g3.kernels[1, 1])


def test_dispersion_ordering_consistent(singlet):
    signs = set()
    for field in [(0.0, 0.0), (0.3, 0.0), (0.0, -0.6), (0.5, 0.5)]:
        r, g, b = (second_moment(p.kernel) for p in rgb_psf(singlet, field, pupil_samples=32, kernel_px=63))
        if b >= g >= r:
            signs.add("blue-widest")
        elif r >= g >= b:
            signs.add("red-widest")
        else:
            signs.add("unordered")
    assert len(signs) == 1 and "unordered" not in signs


def test_grid_round_trip_bit_identical(tmp_path, singlet):
    g = build_grid(singlet, 2, 3, **FAST)
    path = tmp_path / "g.psfg"
    g.save(path)
    back = PsfGrid.load(path)
    assert back.kernels.tobytes() == g.kernels.tobytes()
    assert back.geometry == g.geometry
    assert back.lens_id == "singlet"
    raw = path.read_bytes()
    assert raw[:4] == b"PSFG"


def test_grid_file_rejects_bad_magic(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"NOPE" + bytes(100))
    with pytest.raises(ValidationError):
        PsfGrid.load(p)


def test_overflow_escalates_once(singlet):
    g = build_grid(singlet, 2, 2, kernel_px=7, **FAST)
    assert g.kernel_px == 15
    with pytest.raises(KernelOverflow):
        build_grid(singlet, 2, 2, kernel_px=3, **FAST)
    with pytest.raises(KernelOverflow):
        build_grid(singlet, 2, 2, kernel_px=7, escalate=False, **FAST)


def test_failed_patch_reports_index(singlet):
    # a small field stop 30 mm behind the lens passes the axis but blocks the corners
    s0, s1 = singlet.surfaces
    stop = Surface(0.0, 0.0, (), s1.thickness - 30.0, "air", 2.0)
    lens = singlet.with_surfaces([s0, replace(s1, thickness=30.0), stop])
    with pytest.raises(PatchError) as exc:
        build_grid(lens, 3, 3, threads=1, **FAST)
    assert exc.value.index == (0, 0)


def test_patch_centres_symmetric():
    c = patch_centers(3, 5)
    np.testing.assert_array_equal(c[0, 0], -c[2, 4])
    assert tuple(c[1, 2]) == (0.0, 0.0)


def test_gaussian_kernel_and_synthetic_grid():
    k = gaussian_kernel(1.5, 15)
    assert k.sum() == pytest.approx(1)
    assert second_moment(k) == pytest.approx(1.5 * math.sqrt(2), rel=1e-3)
    g = synthetic_grid(lambda u, v, c: 1.0 + u * u, (64, 64), 2, 2, 11)
    assert g.kernels.shape == (2, 2, 3, 11, 11)
