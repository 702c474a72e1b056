import csv
import json
import shutil

import numpy as np
import pytest

from aberra.benchmark import CheckerTarget, LensScore, dumps, render_checker, scores_document
from aberra.cli import main
from aberra.degrade import write_image
from aberra.lens import load_lens
from aberra.metrics import SubOiqTable, ode
from aberra.psf import PsfGrid

from conftest import FIXTURES

SINGLET = str(FIXTURES / "singlet.lens.json")
FAST = ["--grid", "2x2", "--pupil-samples", "16"]


def run(*argv):
    return main([str(a) for a in argv])


def test_help_and_usage_errors(capsys):
    assert run("--help") == 0
    assert "COMMAND" in capsys.readouterr().out
    assert run("ode", "--help") == 0
    capsys.readouterr()
    assert run("bogus") == 1
    assert "invalid choice" in capsys.readouterr().err
    assert run("ode", "--lens", SINGLET) == 1  # --out missing
    err = capsys.readouterr().err
    assert "--out" in err and "usage: aberra ode" in err
    assert run("ode", "--lens", SINGLET, "--out", "x", "--bogus-flag") == 1
    assert run("psf", "--lens", SINGLET, "--grid", "3by3", "--out", "x") == 1
    assert run() == 1


def test_bad_inputs_are_user_errors(tmp_path, capsys):
    assert run("trace", "--lens", tmp_path / "missing.lens.json", "--out", tmp_path / "t.csv") == 1
    bad = tmp_path / "bad.lens.json"
    bad.write_text("{not json")
    assert run("trace", "--lens", bad, "--out", tmp_path / "t.csv") == 1
    assert "ParseError" in capsys.readouterr().err
    assert not (tmp_path / "t.csv").exists()


def test_threads_env(monkeypatch):
    from aberra.cli import thread_count

    monkeypatch.setenv("ABERRA_THREADS", "3")
    assert thread_count(None) == 3
    assert thread_count(2) == 2
    monkeypatch.setenv("ABERRA_THREADS", "many")
    with pytest.raises(Exception):
        thread_count(None)
    monkeypatch.setenv("ABERRA_THREADS", "0")
    assert run("sample", "--scores", "x", "--out", "y") == 1


def test_off_grid_lens_needs_escape_hatch(tmp_path, capsys):
    d = json.loads((FIXTURES / "singlet.lens.json").read_text())
    d["spec"]["half_fov_deg"] = 25.0
    lens = tmp_path / "odd.lens.json"
    lens.write_text(json.dumps(d))
    out = tmp_path / "t.csv"
    assert run("trace", "--lens", lens, "--out", out) == 1
    assert "ValidationError" in capsys.readouterr().err
    assert run("trace", "--lens", lens, "--out", out, "--no-spec-check") == 0


def test_trace(tmp_path):
    out = tmp_path / "fan.csv"
    assert run("trace", "--lens", SINGLET, "--field", 10, "--wavelength", 486.1, "--pupil-samples", 16, "--out", out) == 0
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == ["x_mm", "y_mm", "wavelength_nm", "alive", "note"]
    assert len(rows) > 100
    assert {r["wavelength_nm"] for r in rows} == {"486.1"}
    assert all(r["alive"] in ("0", "1") for r in rows)


def test_ode_example(tmp_path):
    """The documented invocation yields a valid scores document."""
    out = tmp_path / "s.json"
    assert run("ode", "--lens", SINGLET, "--out", out) == 0
    doc = json.loads(out.read_text())
    assert doc["schema_version"] == 1
    (score,) = doc["scores"]
    rep = score["ode_report"]
    assert score["lens_id"] == "singlet"
    assert 0.0 < rep["ode"] <= 1.01
    assert len(rep["sub_oiq"]) == 5 and all(len(r) == 3 for r in rep["sub_oiq"])
    assert len(score["cells"]) == 15
    assert out.read_text() == dumps(doc)  # canonical form


def test_ode_byte_identical_across_runs_and_threads(tmp_path):
    outs = []
    for i, threads in enumerate((1, 1, 4)):
        out = tmp_path / f"s{i}.json"
        assert run("ode", "--lens", SINGLET, "--out", out, "--threads", threads, "--seed", 7) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_psf_then_degrade(tmp_path):
    grid_file = tmp_path / "g.psfg"
    assert run("psf", "--lens", SINGLET, "--grid", "2x3", "--kernel-px", 15, "--pupil-samples", 16,
               "--out", grid_file) == 0
    grid = PsfGrid.load(grid_file)
    assert grid.kernels.shape[:3] == (2, 3, 3)
    gt = tmp_path / "gt"
    gt.mkdir()
    rng = np.random.default_rng(0)
    write_image(gt / "a.png", rng.random((256, 256, 3)))
    write_image(gt / "b.png", rng.random((256, 256, 3)))
    outs = []
    for k in range(2):
        out = tmp_path / f"out{k}"
        assert run("degrade", "--gt", gt, "--psf", grid_file, "--noise-sigma", 0.01, "--isp", "--wb", "1.5,2.0",
                   "--seed", 3, "--out", out, "--threads", 1 + 3 * k) == 0
        outs.append(out)
    for name in ("lq/a.png", "lq/b.png", "gt/a.png", "gt/b.png"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    # mismatched sensor size
    write_image(gt / "c.png", rng.random((100, 100, 3)))
    assert run("degrade", "--gt", gt / "c.png", "--psf", grid_file, "--out", tmp_path / "x") == 1


def test_metrics(tmp_path):
    target = CheckerTarget(square_px=32, resolution=(256, 256))
    ref = render_checker(target)
    from scipy.ndimage import gaussian_filter

    deg = np.stack([gaussian_filter(ref[..., c], 1.0, mode="reflect") for c in range(3)], axis=-1)
    (tmp_path / "ref").mkdir()
    (tmp_path / "deg").mkdir()
    write_image(tmp_path / "ref" / "x.imgf", ref)
    write_image(tmp_path / "deg" / "x.imgf", deg)
    ext = tmp_path / "ext.json"
    ext.write_text(json.dumps({"lpips": 0.2, "fid": 30.0, "clipiqa": 0.5}))
    out, plot = tmp_path / "r.json", tmp_path / "mtf.csv"
    assert run("metrics", "--degraded", tmp_path / "deg", "--reference", tmp_path / "ref",
               "--external-scores", ext, "--plot-data", plot, "--out", out) == 0
    doc = json.loads(out.read_text())
    (pair,) = doc["pairs"]
    assert pair["degraded"] == "x.imgf"
    assert 20 < pair["psnr"] < 50 and 0 < pair["ssim"] < 1
    assert 0.3 < pair["oiqe"] < 0.5
    assert "op" in pair and "ode_report" in doc
    rows = list(csv.DictReader(plot.open()))
    assert list(rows[0]) == ["image", "fov", "channel", "frequency", "modulation"]
    assert float(rows[0]["modulation"]) == pytest.approx(1.0)
    # identical images: perfect scores
    assert run("metrics", "--degraded", tmp_path / "ref" / "x.imgf", "--reference", tmp_path / "ref" / "x.imgf",
               "--out", out) == 0
    doc = json.loads(out.read_text())
    assert doc["pairs"][0]["psnr"] == 50.0
    assert doc["ode_report"]["ode"] == pytest.approx(1.01, abs=1e-9)


def _fake_scores(tmp_path, n=6):
    lens_dir = tmp_path / "lenses"
    lens_dir.mkdir()
    scores = []
    for i in range(n):
        f = lens_dir / f"l{i}.lens.json"
        shutil.copy(SINGLET, f)
        scores.append(LensScore(f"l{i}", ode(SubOiqTable.constant(0.3 + 0.1 * i)), file=f.as_posix()))
    path = tmp_path / "scores.json"
    path.write_text(dumps(scores_document(scores)))
    return path


def test_sample_and_dataset_deterministic(tmp_path):
    scores = _fake_scores(tmp_path)
    manifest = tmp_path / "m.json"
    assert run("sample", "--scores", scores, "--levels", 3, "--out", manifest) == 0
    m = json.loads(manifest.read_text())
    assert [r["level"] for r in m["lenses"]] == [1, 1, 2, 2, 3, 3]
    assert m["lenses"][0]["lens_id"] == "l5"
    assert run("sample", "--scores", scores, "--levels", 7, "--out", manifest.with_suffix(".x")) == 1

    gt = tmp_path / "gt"
    gt.mkdir()
    rng = np.random.default_rng(1)
    for k in range(2):
        write_image(gt / f"g{k}.png", rng.random((64, 80, 3)))
    docs = []
    for k, threads in enumerate((1, 1, 4)):
        out = tmp_path / f"ds{k}"
        assert run("dataset", "--manifest", manifest, "--gt", gt, "--out", out, "--noise-sigma", 0.02,
                   "--seed", 5, "--threads", threads, *FAST) == 0
        docs.append(out)
    ref = (docs[0] / "manifest.json").read_bytes()
    rows = json.loads(ref)["dataset"]
    assert len(rows) == 12
    for other in docs[1:]:
        assert (other / "manifest.json").read_bytes() == ref
        for r in rows:
            assert (other / r["lq"]).read_bytes() == (docs[0] / r["lq"]).read_bytes()
    out = tmp_path / "ds_other_seed"
    assert run("dataset", "--manifest", manifest, "--gt", gt, "--out", out, "--noise-sigma", 0.02,
               "--seed", 6, *FAST) == 0
    assert (out / rows[0]["lq"]).read_bytes() != (docs[0] / rows[0]["lq"]).read_bytes()


def test_design(tmp_path):
    vars_ = tmp_path / "vars.json"
    vars_.write_text(json.dumps({"variables": [
        {"surface": 0, "kind": "curvature", "lo": 0.0, "hi": 0.05},
        {"surface": 1, "kind": "curvature", "lo": -0.05, "hi": 0.05},
    ]}))
    merit = tmp_path / "merit.json"
    merit.write_text(json.dumps({"field_weights": [[0.0, 1.0], [1.0, 1.0]], "pupil_samples": 8}))
    outs = []
    for k, threads in enumerate((1, 3)):
        out, trace = tmp_path / f"d{k}.lens.json", tmp_path / f"t{k}.csv"
        assert run("design", "--start", SINGLET, "--vars", vars_, "--merit", merit, "--budget", 60,
                   "--seed", 2, "--threads", threads, "--out", out, "--trace", trace) == 0
        outs.append((out.read_bytes(), trace.read_bytes()))
    assert outs[0] == outs[1]
    lines = outs[0][1].decode().splitlines()
    assert lines[0] == "eval,merit,best_merit,phase" and len(lines) == 61
    best = [float(l.split(",")[2]) for l in lines[1:]]
    assert best == sorted(best, reverse=True)
    load_lens(tmp_path / "d0.lens.json")
    bad = tmp_path / "badvars.json"
    bad.write_text(json.dumps({"variables": []}))
    assert run("design", "--start", SINGLET, "--vars", bad, "--out", tmp_path / "z.json") == 1
