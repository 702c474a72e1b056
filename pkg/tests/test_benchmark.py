import math
import random
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aberra.benchmark import (
    BenchmarkManifest,
    CheckerTarget,
    LensScore,
    dumps,
    evaluate_grid,
    evaluate_lens,
    generate_dataset,
    lens_for_image,
    load_manifest,
    render_checker,
    save_json,
    stratify,
)
from aberra.degrade import IspConfig, NoiseConfig, read_image, write_image
from aberra.errors import DatasetError, GridMismatch, TooFewLenses, ValidationError
from aberra.lens import Material, save_lens
from aberra.metrics import SubOiqTable, ode, slanted_edge_mtf
from aberra.psf import identity_grid, patch_centers, synthetic_grid

SMALL = CheckerTarget(square_px=32, resolution=(256, 256))


def score(lens_id, value):
    return LensScore(lens_id, ode(SubOiqTable.constant((value - 0.31) / 0.7)), file=f"{lens_id}.lens.json")


# ---------------------------------------------------------------------------
# target

@pytest.mark.parametrize("tilt", [0.0, 1.9, 15.1])
def test_tilt_outside_range_rejected(tilt):
    with pytest.raises(ValidationError):
        CheckerTarget(tilt_deg=tilt)


@pytest.mark.parametrize("target", [CheckerTarget(), SMALL, CheckerTarget(square_px=40, tilt_deg=12, resolution=(400, 640))])
def test_checker_mean_and_determinism(target):
    a = render_checker(target)
    assert abs(a.mean() - 0.5) <= 0.01
    assert a.min() >= 0 and a.max() <= 1
    assert render_checker(target).tobytes() == a.tobytes()


def test_roi_boxes_hold_one_measurable_edge():
    t = CheckerTarget()
    img = render_checker(t)[..., 0]
    boxes = t.roi_boxes
    assert len(set(boxes)) == 5
    centre = np.array([511.5, 511.5])
    dist = []
    for (y0, y1, x0, x1) in boxes:
        assert 0 <= y0 < y1 <= 1024 and 0 <= x0 < x1 <= 1024
        curve = slanted_edge_mtf(img[y0:y1, x0:x1])
        assert curve.vertical and abs(abs(curve.angle_deg) - 5.0) < 0.1
        dist.append(np.hypot((y0 + y1) / 2 - centre[0], (x0 + x1) / 2 - centre[1]))
    assert dist == sorted(dist)


def test_target_round_trip():
    t = CheckerTarget(square_px=48, tilt_deg=7.5, resolution=(512, 768))
    assert CheckerTarget.from_dict(t.to_dict()) == replace(t, roi_px=t.roi_size)
    with pytest.raises(ValidationError):
        CheckerTarget.from_dict({"colour": "red"})


# ---------------------------------------------------------------------------
# evaluation

def test_identity_grid_scores_maximum(singlet):
    s = evaluate_lens(singlet, grid=identity_grid((256, 256), 4, 4))
    r = s.ode_report
    assert r.oiq == pytest.approx(1.0, abs=1e-12)
    assert r.u_s == 1.0 and r.u_c == 1.0
    assert r.ode == pytest.approx(1.01, abs=1e-6)
    assert s.rms_radius_d_line > 0
    assert len(s.cells) == 15


def test_target_must_match_grid():
    with pytest.raises(GridMismatch):
        evaluate_grid(identity_grid((128, 128)), SMALL)


def radial(gradient, base=0.6):
    return lambda u, v, c: base + gradient * (u * u + v * v)


def test_spatial_uniformity_falls_with_radial_gradient():
    u_s = [evaluate_grid(synthetic_grid(radial(g), (256, 256), 4, 4, 31), SMALL)[0].u_s for g in (0.5, 1.0, 2.0)]
    assert u_s[0] < 1
    assert u_s[0] > u_s[1] > u_s[2]


def test_radial_grid_less_uniform_than_uniform_grid():
    fn = radial(1.5)
    mean_sigma = float(np.mean([fn(u, v, 0) for u, v in patch_centers(4, 4).reshape(-1, 2)]))
    radial_report = evaluate_grid(synthetic_grid(fn, (256, 256), 4, 4, 31), SMALL)[0]
    uniform_report = evaluate_grid(synthetic_grid(lambda u, v, c: mean_sigma, (256, 256), 4, 4, 31), SMALL)[0]
    assert radial_report.u_s < uniform_report.u_s


def test_ode_decreases_with_uniform_blur():
    odes = [evaluate_grid(synthetic_grid(lambda u, v, c, s=s: s, (256, 256), 2, 2, 31), SMALL)[0]
            for s in (0.5, 1.0, 2.0, 4.0)]
    assert all(a.ode > b.ode for a, b in zip(odes, odes[1:]))
    assert all(a.oiq > b.oiq for a, b in zip(odes, odes[1:]))


def test_dispersion_free_lens_has_uniform_channels(singlet):
    flat = replace(singlet, materials={n: Material(n, m.nd, math.inf) for n, m in singlet.materials.items()})
    s = evaluate_lens(flat, patch_rows=4, patch_cols=4, pupil_samples=24)
    assert s.ode_report.u_c == pytest.approx(1.0, abs=1e-6)


def test_lens_score_round_trip(singlet):
    s = evaluate_lens(singlet, grid=identity_grid((256, 256)))
    back = LensScore.from_dict(s.to_dict())
    assert dumps(back.to_dict()) == dumps(s.to_dict())


# ---------------------------------------------------------------------------
# stratification

def test_ten_lenses_five_levels():
    scores = [score(f"lens{i:02d}", 1.0 - 0.05 * i) for i in range(10)]
    m = stratify(scores)
    levels = m.levels()
    assert [len(levels[k]) for k in range(1, 6)] == [2] * 5
    assert levels[1] == ["lens00", "lens01"] and levels[5] == ["lens08", "lens09"]
    assert all(hi >= lo for hi, lo in m.level_bounds)
    assert all(a[1] >= b[0] for a, b in zip(m.level_bounds, m.level_bounds[1:]))


def test_equal_odes_break_ties_by_id():
    scores = [score(name, 0.8) for name in ["d", "b", "e", "a", "c"]]
    assert [row["lens_id"] for row in stratify(scores).lenses] == ["a", "b", "c", "d", "e"]


def test_shuffled_input_same_manifest():
    scores = [score(f"l{i}", v) for i, v in enumerate(np.random.default_rng(4).random(13))]
    a = dumps(stratify(scores).to_dict())
    random.Random(1).shuffle(scores)
    assert dumps(stratify(scores).to_dict()) == a


def test_too_few_lenses():
    with pytest.raises(TooFewLenses):
        stratify([score("a", 1.0)] * 4)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.3, 1.0), min_size=5, max_size=40), st.integers(1, 5))
def test_stratify_partition(values, levels):
    scores = [score(f"x{i:03d}", v) for i, v in enumerate(values)]
    m = stratify(scores, levels)
    ids = [r["lens_id"] for r in m.lenses]
    assert sorted(ids) == sorted(s.lens_id for s in scores)
    sizes = [len(v) for v in m.levels().values()]
    assert len(sizes) == levels and max(sizes) - min(sizes) <= 1
    # level order follows ODE
    ode_of = {s.lens_id: s.ode_report.ode for s in scores}
    for lvl in range(1, levels):
        assert min(ode_of[i] for i in m.levels()[lvl]) >= max(ode_of[i] for i in m.levels()[lvl + 1])


def test_manifest_json_round_trip(tmp_path):
    m = stratify([score(f"l{i}", 0.5 + 0.01 * i) for i in range(6)], 3)
    p = save_json(m, tmp_path / "m.json")
    assert dumps(load_manifest(p).to_dict()) == p.read_text()
    assert '"schema_version": 1' in p.read_text()


# ---------------------------------------------------------------------------
# datasets

@pytest.fixture
def library(tmp_path, singlet, triplet):
    root = tmp_path / "lenses"
    root.mkdir()
    rows = []
    for name, lens in [("a_singlet", singlet), ("b_triplet", triplet), ("c_singlet", singlet)]:
        save_lens(replace(lens, lens_id=name), root / f"{name}.lens.json")
        rows.append({"lens_id": name, "file": f"{name}.lens.json", "level": 1})
    return root, BenchmarkManifest(rows, [[1.0, 0.0]], [])


@pytest.fixture
def gt_dir(tmp_path, natural):
    d = tmp_path / "gt"
    d.mkdir()
    write_image(d / "one.png", natural[:64, :64])
    write_image(d / "two.png", natural[64:112, 100:180])
    return d


FAST_GRID = dict(patch_rows=2, patch_cols=2, pupil_samples=16)


def test_dataset_cardinality_and_reproducibility(tmp_path, library, gt_dir):
    root, manifest = library
    noise = NoiseConfig.gaussian(0.01)
    isp = IspConfig(True, "RGGB", (0.9, 1.1))
    m1 = generate_dataset(manifest, gt_dir, tmp_path / "o1", noise, isp, seed=3, lens_root=root, **FAST_GRID)
    m2 = generate_dataset(manifest, gt_dir, tmp_path / "o2", noise, isp, seed=3, lens_root=root, threads=3, **FAST_GRID)
    assert len(m1.dataset) == 6
    assert len(list((tmp_path / "o1" / "lq").iterdir())) == 6
    assert dumps(m1.to_dict()) == dumps(m2.to_dict())
    for row in m1.dataset:
        assert (tmp_path / "o1" / row["lq"]).read_bytes() == (tmp_path / "o2" / row["lq"]).read_bytes()
        assert read_image(tmp_path / "o1" / row["lq"]).shape == read_image(tmp_path / "o1" / row["gt"]).shape
    assert len({r["seed"] for r in m1.dataset}) == 6
    m3 = generate_dataset(manifest, gt_dir, tmp_path / "o3", noise, isp, seed=4, lens_root=root, **FAST_GRID)
    assert (tmp_path / "o3" / m3.dataset[0]["lq"]).read_bytes() != (tmp_path / "o1" / m1.dataset[0]["lq"]).read_bytes()


def test_dataset_error_is_tagged(tmp_path, library, gt_dir):
    root, manifest = library
    manifest.lenses.append({"lens_id": "ghost", "file": "missing.lens.json", "level": 1})
    with pytest.raises(DatasetError) as exc:
        generate_dataset(manifest, gt_dir, tmp_path / "o", lens_root=root, **FAST_GRID)
    assert exc.value.lens_id == "ghost"


def test_lens_for_image_keeps_diagonal(triplet):
    small = lens_for_image(triplet, (48, 80))
    d0 = triplet.sensor.pixel_pitch_mm * math.hypot(1024, 1024)
    d1 = small.sensor.pixel_pitch_mm * math.hypot(48, 80)
    assert d1 == pytest.approx(d0, rel=1e-12)
    assert (small.sensor.height, small.sensor.width) == (48, 80)


def test_library_scale_row_count(tmp_path, singlet):
    # 26 images x 120 lenses -> 3120 pairs, on tiny images to keep it quick
    root = tmp_path / "lib"
    root.mkdir()
    save_lens(singlet, root / "s.lens.json")
    rows = [{"lens_id": f"L{i:03d}", "file": "s.lens.json", "level": 1 + i % 5} for i in range(120)]
    gts = tmp_path / "gts"
    gts.mkdir()
    rng = np.random.default_rng(0)
    for i in range(26):
        write_image(gts / f"g{i:02d}.imgf", rng.random((12, 12, 3)))
    m = generate_dataset(BenchmarkManifest(rows, [], []), gts, tmp_path / "out", lens_root=root,
                         patch_rows=1, patch_cols=1, pupil_samples=16, kernel_px=3)
    assert len(m.dataset) == 3120
    assert {r["lens_id"] for r in m.dataset} == {r["lens_id"] for r in rows}
