"""
Lens scoring by checkerboard imaging, severity levels and LQ/GT datasets.

:func:`evaluate_lens` renders a tilted checkerboard at the sensor
resolution, degrades it with the lens's PSF grid and measures a sub-OIQ for
each of five field positions and three channels on one slanted edge per
field. The resulting table gives the lens its ODE. :func:`stratify` sorts a
lens library into equal-count severity levels (level 1 = mildest) and
:func:`generate_dataset` degrades ground-truth images with every lens.

All JSON written here uses sorted keys and shortest round-trip floats, so
repeated runs give byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .degrade import IspConfig, NoiseConfig, apply_isp, degrade_image, read_image, write_image
from .errors import AberraError, AllRoisFailed, DatasetError, GridMismatch, TooFewLenses, ValidationError
from .lens import D_LINE, SensorConfig, load_lens
from .metrics import OdeReport, OdeWeights, SubOiqTable, ode, sub_oiq_cell
from .psf import build_grid
from .raytrace import spot_diagram

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FOV_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)
IMAGE_SUFFIXES = (".png", ".imgf")


# ---------------------------------------------------------------------------
# checkerboard target

@dataclass(frozen=True)
class CheckerTarget:
    """Tilted checkerboard with one edge ROI per field position.

    ROIs sit on the midpoints of near-vertical edges, centred as close as
    possible to the point ``fraction * half diagonal`` from the image centre
    towards the lower-right corner, and lie wholly inside the image.
    """

    square_px: int = 64
    tilt_deg: float = 5.0
    resolution: tuple = (1024, 1024)
    fov_fractions: tuple = FOV_FRACTIONS
    roi_px: int | None = None

    def __post_init__(self):
        if not 2.0 <= self.tilt_deg <= 15.0:
            raise ValidationError(f"checker tilt must lie in [2, 15] degrees, got {self.tilt_deg}")
        if len(self.fov_fractions) != 5 or not all(0.0 <= f <= 1.0 for f in self.fov_fractions):
            raise ValidationError("need 5 field fractions in [0, 1]")
        if self.square_px < 16:
            raise ValidationError("square_px must be >= 16")
        h, w = self.resolution
        if min(h, w) < 2 * self.square_px:
            raise ValidationError("target must span at least two squares")
        object.__setattr__(self, "resolution", (int(h), int(w)))
        object.__setattr__(self, "fov_fractions", tuple(float(f) for f in self.fov_fractions))

    @classmethod
    def for_lens(cls, lens, **kw):
        """Target at the lens's sensor resolution (64 px squares per 1024 px, at least 32)."""
        h, w = lens.sensor.height, lens.sensor.width
        kw.setdefault("square_px", max(32, int(round(64 * min(h, w) / 1024))))
        return cls(resolution=(h, w), **kw)

    @classmethod
    def from_dict(cls, d, resolution=None):
        known = {"square_px", "tilt_deg", "resolution", "fov_fractions", "roi_px"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown target keys: {sorted(unknown)}")
        d = dict(d)
        if resolution is not None:
            d.setdefault("resolution", resolution)
        if "resolution" in d:
            d["resolution"] = tuple(d["resolution"])
        if "fov_fractions" in d:
            d["fov_fractions"] = tuple(d["fov_fractions"])
        return cls(**d)

    def to_dict(self):
        return {
            "square_px": self.square_px,
            "tilt_deg": self.tilt_deg,
            "resolution": list(self.resolution),
            "fov_fractions": list(self.fov_fractions),
            "roi_px": self.roi_size,
        }

    @property
    def roi_size(self):
        return self.roi_px or int(2 * round(0.375 * self.square_px))

    def _to_image(self, a, b):
        """Checker-frame (a, b) to image (x, y) about the image centre."""
        t = math.radians(self.tilt_deg)
        h, w = self.resolution
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        return cx + a * math.cos(t) - b * math.sin(t), cy + a * math.sin(t) + b * math.cos(t)

    @property
    def roi_boxes(self):
        """(y0, y1, x0, x1) per field fraction; distinct and inside the image."""
        h, w = self.resolution
        s, r = self.square_px, self.roi_size
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        n = int(math.ceil(math.hypot(h, w) / s)) + 1
        cands = []
        for m in range(-n, n + 1):
            for k in range(-n, n):
                x, y = self._to_image(m * s, (k + 0.5) * s)
                x0, y0 = int(round(x - r / 2.0)), int(round(y - r / 2.0))
                if x0 >= 0 and y0 >= 0 and x0 + r <= w and y0 + r <= h:
                    cands.append((x, y, (y0, y0 + r, x0, x0 + r)))
        if len(cands) < len(self.fov_fractions):
            raise ValidationError("target too small for five edge ROIs")
        used, boxes = set(), []
        hx, hy = w / 2.0, h / 2.0
        for f in self.fov_fractions:
            px, py = cx + f * hx, cy + f * hy
            order = sorted(cands, key=lambda c: ((c[0] - px) ** 2 + (c[1] - py) ** 2, c[2]))
            box = next(c[2] for c in order if c[2] not in used)
            used.add(box)
            boxes.append(box)
        return tuple(boxes)


def render_checker(target, supersample=4):
    """Binary checkerboard in [0, 1], box-filtered over ``supersample``^2 points per pixel."""
    h, w = target.resolution
    t = math.radians(target.tilt_deg)
    s = float(target.square_px)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    ys = np.arange(h, dtype=np.float64)[:, None] - cy
    xs = np.arange(w, dtype=np.float64)[None, :] - cx
    acc = np.zeros((h, w))
    for dy in offs:
        for dx in offs:
            x, y = xs + dx, ys + dy
            a = x * math.cos(t) + y * math.sin(t)
            b = -x * math.sin(t) + y * math.cos(t)
            acc += (np.floor(a / s) + np.floor(b / s)) % 2
    img = acc / supersample**2
    return np.repeat(img[..., None], 3, axis=2)


def render_edge(shape, angle_deg, profile, supersample=1):
    """Single straight edge through the centre, ``angle_deg`` off vertical.

    ``profile(d)`` maps signed distance from the edge (pixels, positive to
    the right) to intensity; with ``supersample > 1`` each pixel averages a
    regular grid of point samples.
    """
    h, w = shape
    t = math.radians(angle_deg)
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    acc = np.zeros((h, w))
    for dy in offs:
        for dx in offs:
            d = ((xx + dx - w / 2.0) - math.tan(t) * (yy + dy - h / 2.0)) * math.cos(t)
            acc += profile(d)
    return acc / supersample**2


# ---------------------------------------------------------------------------
# scoring

@dataclass
class LensScore:
    lens_id: str
    ode_report: OdeReport
    rms_radius_d_line: float | None = None
    grid_sha256: str = ""
    cells: list = field(default_factory=list)
    file: str = ""

    def to_dict(self):
        return {
            "lens_id": self.lens_id,
            "file": self.file,
            "ode_report": self.ode_report.to_dict(),
            "rms_radius_d_line": self.rms_radius_d_line,
            "grid_sha256": self.grid_sha256,
            "cells": self.cells,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["lens_id"], OdeReport.from_dict(d["ode_report"]), d.get("rms_radius_d_line"),
                   d.get("grid_sha256", ""), d.get("cells", []), d.get("file", ""))


def grid_digest(grid):
    return hashlib.sha256(grid.to_bytes()).hexdigest()


def evaluate_grid(grid, target=None, weights=OdeWeights(), threads=None):
    """Sub-OIQ table and ODE for a PSF grid imaging ``target``.

    A cell whose ROI cannot be measured takes the mean of the measured
    cells of the same field position; a field with no measurable cell
    aborts the evaluation.

    Returns
    -------
    (OdeReport, list of dict)
        The report and one metric row per (fov, channel) cell.
    """
    geo = grid.geometry
    if target is None:
        target = CheckerTarget(resolution=(geo.sensor_h, geo.sensor_w),
                               square_px=max(32, int(round(64 * min(geo.sensor_h, geo.sensor_w) / 1024))))
    if tuple(target.resolution) != (geo.sensor_h, geo.sensor_w):
        raise GridMismatch(f"target {target.resolution} does not match sensor {(geo.sensor_h, geo.sensor_w)}")
    reference = render_checker(target)
    degraded = degrade_image(reference, grid, threads=threads)
    return score_images(degraded, reference, target, weights)


def score_images(degraded, reference, target, weights=OdeWeights()):
    """ODE report of a degraded rendering of ``target`` against the sharp one.

    Same cell fallback as :func:`evaluate_grid`.
    """
    table = np.full((5, 3), np.nan)
    cells = []
    for k, box in enumerate(target.roi_boxes):
        for c in range(3):
            row = {"fov": k, "channel": "RGB"[c], "roi": list(box)}
            try:
                m = sub_oiq_cell(degraded[..., c], reference[..., c], box)
            except AberraError as exc:
                row["error"] = f"{type(exc).__name__}: {exc}"
            else:
                row.update(m)
                table[k, c] = m["oiq"]
            cells.append(row)
        if np.all(np.isnan(table[k])):
            raise AllRoisFailed(f"no measurable cell at field fraction {target.fov_fractions[k]}")
        table[k] = np.where(np.isnan(table[k]), np.nanmean(table[k]), table[k])
    return ode(SubOiqTable(table), weights), cells


def evaluate_lens(lens, target=None, grid=None, patch_rows=8, patch_cols=8, threads=None,
                  weights=OdeWeights(), **grid_kw):
    """Full lens evaluation: PSF grid, degraded checkerboard, ODE report.

    ``grid`` may be passed to skip the PSF computation; it must cover the
    lens's sensor.
    """
    if grid is None:
        grid = build_grid(lens, patch_rows, patch_cols, threads=threads, **grid_kw)
    if target is None:
        target = CheckerTarget.for_lens(lens)
    report, cells = evaluate_grid(grid, target, weights, threads)
    try:
        rms = spot_diagram(lens, lens.spec.half_fov_deg, D_LINE).rms_radius
    except AberraError:
        rms = None
    return LensScore(lens.lens_id, report, rms, grid_digest(grid), cells)


# ---------------------------------------------------------------------------
# manifests

@dataclass
class BenchmarkManifest:
    lenses: list = field(default_factory=list)  # {lens_id, file, score, level}
    level_bounds: list = field(default_factory=list)  # [ode_max, ode_min] per level
    dataset: list = field(default_factory=list)  # {gt, lq, lens_id, seed}

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "lenses": self.lenses,
            "level_bounds": self.level_bounds,
            "dataset": self.dataset,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported manifest schema {d.get('schema_version')!r}")
        return cls(list(d["lenses"]), list(d["level_bounds"]), list(d.get("dataset", [])))

    def levels(self):
        out = {}
        for row in self.lenses:
            out.setdefault(row["level"], []).append(row["lens_id"])
        return out


def dumps(obj):
    """Canonical JSON: sorted keys, 2-space indent, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def save_json(obj, path):
    path = Path(path)
    path.write_text(dumps(obj.to_dict() if hasattr(obj, "to_dict") else obj))
    return path


def load_manifest(path):
    return BenchmarkManifest.from_dict(json.loads(Path(path).read_text()))


def scores_document(scores):
    return {"schema_version": SCHEMA_VERSION,
            "scores": [s.to_dict() for s in sorted(scores, key=lambda s: s.lens_id)]}


def load_scores(path):
    d = json.loads(Path(path).read_text())
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(f"unsupported scores schema {d.get('schema_version')!r}")
    return [LensScore.from_dict(s) for s in d["scores"]]


def stratify(scores, levels=5):
    """Equal-count ODE levels; level 1 holds the highest ODE (mildest).

    Lenses are ordered by descending ODE, ties by ``lens_id``; the first
    ``n % levels`` levels take one extra lens.

    Raises
    ------
    TooFewLenses
    """
    scores = list(scores)
    if levels < 1:
        raise ValidationError("levels must be >= 1")
    if len(scores) < levels:
        raise TooFewLenses(f"{len(scores)} lenses cannot fill {levels} levels")
    ids = [s.lens_id for s in scores]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate lens ids")
    ordered = sorted(scores, key=lambda s: (-s.ode_report.ode, s.lens_id))
    base, extra = divmod(len(ordered), levels)
    rows, bounds, start = [], [], 0
    for lvl in range(levels):
        size = base + (1 if lvl < extra else 0)
        group = ordered[start:start + size]
        start += size
        bounds.append([group[0].ode_report.ode, group[-1].ode_report.ode])
        for s in group:
            rows.append({"lens_id": s.lens_id, "file": s.file, "level": lvl + 1, "score": s.to_dict()})
    return BenchmarkManifest(rows, bounds, [])


# ---------------------------------------------------------------------------
# datasets

def lens_for_image(lens, shape):
    """``lens`` re-gridded to an image of ``shape`` keeping the physical sensor diagonal."""
    h, w = shape
    s = lens.sensor
    if (h, w) == (s.height, s.width):
        return lens
    pitch = s.pixel_pitch_um * math.hypot(s.width, s.height) / math.hypot(w, h)
    return replace(lens, sensor=SensorConfig(pitch, w, h))


def pair_seed(seed, gt_index, lens_index):
    """Independent 63-bit seed per (gt, lens) pair."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(gt_index), int(lens_index)))
    return int(ss.generate_state(1, np.uint64)[0]) >> 1


def list_images(gt_dir):
    files = sorted(p for p in Path(gt_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValidationError(f"no ground-truth images in {gt_dir}")
    return files


def generate_dataset(manifest, gt_dir, out_dir, noise=NoiseConfig(), isp=IspConfig(), seed=0,
                     lens_root=None, patch_rows=8, patch_cols=8, threads=None, bit_depth=8, **grid_kw):
    """Degrade every GT image with every manifest lens and record the pairs.

    Parameters
    ----------
    manifest : BenchmarkManifest
        Lens rows; ``file`` paths are resolved against ``lens_root``.
    noise, isp : NoiseConfig, IspConfig
        Their ``seed`` fields are replaced by a per-pair seed derived from
        ``seed``, the image index and the lens index.

    Returns
    -------
    BenchmarkManifest
        A copy of ``manifest`` with its dataset rows filled.

    Raises
    ------
    DatasetError
        Tagged with the failing (gt, lens_id).
    """
    gt_files = list_images(gt_dir)
    out_dir = Path(out_dir)
    (out_dir / "lq").mkdir(parents=True, exist_ok=True)
    if isp.enabled:
        (out_dir / "gt").mkdir(parents=True, exist_ok=True)
    root = Path(lens_root) if lens_root is not None else Path(".")
    lens_rows = sorted(manifest.lenses, key=lambda r: r["lens_id"])
    lenses = {}
    for r in lens_rows:
        try:
            lenses[r["lens_id"]] = replace(load_lens(root / r["file"], check_spec=False), lens_id=r["lens_id"])
        except Exception as exc:  # noqa: BLE001 - tagged and re-raised
            raise DatasetError(None, r["lens_id"], exc) from exc

    images = {p: read_image(p) for p in gt_files}
    grids = {}

    def grid_for(lens_id, shape):
        key = (lens_id, shape)
        if key not in grids:
            grids[key] = build_grid(lens_for_image(lenses[lens_id], shape), patch_rows, patch_cols, **grid_kw)
        return grids[key]

    # grids first (each once, in a fixed order), then the independent pairs
    for p in gt_files:
        for r in lens_rows:
            try:
                grid_for(r["lens_id"], images[p].shape[:2])
            except Exception as exc:  # noqa: BLE001
                raise DatasetError(p.name, r["lens_id"], exc) from exc

    jobs = [(gi, p, li, r["lens_id"]) for gi, p in enumerate(gt_files) for li, r in enumerate(lens_rows)]

    def run(job):
        gi, p, li, lens_id = job
        s = pair_seed(seed, gi, li)
        name = f"{p.stem}__{lens_id}.png"
        try:
            gt = images[p]
            lq = degrade_image(gt, grid_for(lens_id, gt.shape[:2]), replace(noise, seed=s))
            lq, gt_out = apply_isp(lq, gt, replace(isp, seed=s))
            write_image(out_dir / "lq" / name, lq, bit_depth)
            gt_rel = p.name
            if isp.enabled:
                write_image(out_dir / "gt" / name, gt_out, bit_depth)
                gt_rel = f"gt/{name}"
        except Exception as exc:  # noqa: BLE001
            raise DatasetError(p.name, lens_id, exc) from exc
        return {"gt": gt_rel, "lq": f"lq/{name}", "lens_id": lens_id, "seed": s}

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run, jobs))
    else:
        rows = [run(j) for j in jobs]
    log.info("wrote %d degraded images to %s", len(rows), out_dir)
    return BenchmarkManifest(list(manifest.lenses), list(manifest.level_bounds), rows)
