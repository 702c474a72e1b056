"""
Command-line entry point.

``aberra <subcommand> [options]``; run ``aberra <subcommand> --help`` for
the flags of each. Exit status is 0 on success, 1 for user errors (bad
flags, unreadable or invalid inputs, optical failures of a given lens) and
2 for internal errors. Diagnostics go to standard error; results go to the
``--out`` paths only.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .autodesign import DesignVariables, MeritConfig, optimize
from .benchmark import (
    CheckerTarget,
    dumps,
    evaluate_lens,
    generate_dataset,
    list_images,
    load_manifest,
    load_scores,
    pair_seed,
    save_json,
    score_images,
    scores_document,
    stratify,
)
from .degrade import IspConfig, NoiseConfig, apply_isp, degrade_image, read_image, write_image
from .errors import AberraError, AllRoisFailed, NoEdgeFound, EdgeTooSteep, ValidationError
from .lens import load_lens, save_lens
from .metrics import ExternalScores, overall_performance, psnr, slanted_edge_mtf, ssim
from .psf import PsfGrid, SpectralResponse, build_grid
from .raytrace import trace_rows

log = logging.getLogger("aberra")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().rstrip()}")


# ---------------------------------------------------------------------------
# helpers

def thread_count(flag):
    """``--threads`` wins, then ``ABERRA_THREADS``, then the CPU count."""
    if flag is not None:
        n = flag
    elif os.environ.get("ABERRA_THREADS"):
        try:
            n = int(os.environ["ABERRA_THREADS"])
        except ValueError:
            raise UsageError(f"ABERRA_THREADS must be an integer, got {os.environ['ABERRA_THREADS']!r}") from None
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def parse_grid(text):
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected RxC, got {text!r}") from None
    if r < 1 or c < 1:
        raise argparse.ArgumentTypeError("grid dimensions must be >= 1")
    return r, c


def parse_range(text):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo,hi, got {text!r}") from None
    return lo, hi


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def image_files(path):
    path = Path(path)
    return list_images(path) if path.is_dir() else [path]


def lens_files(path):
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.lens.json"))
        if not files:
            raise ValidationError(f"no *.lens.json files in {path}")
        return files
    return [path]


def write_text(path, text):
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def csv_text(header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    return "\n".join(lines) + "\n"


def noise_and_isp(args):
    noise = NoiseConfig.gaussian(args.noise_sigma) if args.noise_sigma > 0 else NoiseConfig()
    isp = IspConfig(enabled=args.isp, bayer_pattern=args.bayer, wb_gain_range=args.wb)
    return noise, isp


# ---------------------------------------------------------------------------
# subcommands

def cmd_trace(args):
    lens = load_lens(args.lens, check_spec=args.spec_check)
    rows = trace_rows(lens, args.field, args.wavelength, args.pupil_samples)
    rows = [(float(x), float(y), float(lam), int(ok), note) for x, y, lam, ok, note in rows]
    write_text(args.out, csv_text(("x_mm", "y_mm", "wavelength_nm", "alive", "note"), rows))


def cmd_psf(args):
    lens = load_lens(args.lens, check_spec=args.spec_check)
    response = SpectralResponse.from_csv(args.response) if args.response else None
    rows, cols = args.grid
    grid = build_grid(lens, rows, cols, response, args.pupil_samples, args.kernel_px, threads=args.threads)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    grid.save(args.out)


def cmd_degrade(args):
    grid = PsfGrid.load(args.psf)
    noise, isp = noise_and_isp(args)
    out = Path(args.out)
    (out / "lq").mkdir(parents=True, exist_ok=True)
    if isp.enabled:
        (out / "gt").mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(image_files(args.gt)):
        s = pair_seed(args.seed, i, 0)
        gt = read_image(p)
        lq = degrade_image(gt, grid, replace(noise, seed=s), threads=args.threads)
        lq, gt_out = apply_isp(lq, gt, replace(isp, seed=s))
        name = p.stem + ".png"
        write_image(out / "lq" / name, lq, args.bit_depth)
        if isp.enabled:
            write_image(out / "gt" / name, gt_out, args.bit_depth)


def _external(args):
    if not args.external_scores:
        return None
    d = read_json(args.external_scores)
    if {"lpips", "fid", "clipiqa"} <= set(d):
        return {None: ExternalScores.from_dict(d)}
    return {k: ExternalScores.from_dict(v) for k, v in d.items()}


def cmd_metrics(args):
    degraded, reference = image_files(args.degraded), image_files(args.reference)
    if Path(args.degraded).is_dir():
        by_name = {p.name: p for p in reference}
        missing = [p.name for p in degraded if p.name not in by_name]
        if missing:
            raise ValidationError(f"no reference for {missing[:3]}")
        pairs = [(p, by_name[p.name]) for p in degraded]
    else:
        if len(reference) != 1:
            raise ValidationError("a single degraded image needs a single reference image")
        pairs = [(degraded[0], reference[0])]
    target_cfg = read_json(args.target) if args.target else {}
    external = _external(args)

    rows, tables, plot = [], [], []
    for dp, rp in pairs:
        d, r = read_image(dp), read_image(rp)
        row = {"degraded": dp.name, "reference": rp.name, "psnr": psnr(d, r), "ssim": ssim(d, r)}
        target = CheckerTarget.from_dict(target_cfg, resolution=d.shape[:2]) if target_cfg else \
            CheckerTarget(resolution=d.shape[:2], square_px=max(32, int(round(64 * min(d.shape[:2]) / 1024))))
        try:
            report, cells = score_images(d, r, target)
        except AllRoisFailed as exc:
            row["error"] = f"AllRoisFailed: {exc}"
            row["oiqe"] = None
        else:
            row["ode_report"] = report.to_dict()
            row["cells"] = cells
            measured = [c["oiqe"] for c in cells if "oiqe" in c]
            row["oiqe"] = float(np.mean(measured))
            tables.append(report.sub_table.values)
            if args.plot_data:
                for c in cells:
                    y0, y1, x0, x1 = c["roi"]
                    try:
                        curve = slanted_edge_mtf(d[y0:y1, x0:x1, "RGB".index(c["channel"])])
                    except (NoEdgeFound, EdgeTooSteep):
                        continue
                    plot += [(dp.name, c["fov"], c["channel"], float(f), float(m))
                             for f, m in zip(curve.frequency, curve.modulation)]
        if external is not None and row["oiqe"] is not None:
            ext = external.get(dp.name, external.get(None))
            if ext is None:
                raise ValidationError(f"no external scores for {dp.name}")
            row["op"] = overall_performance(row["psnr"], row["ssim"], ext.lpips, ext.fid, row["oiqe"], ext.clipiqa)
        rows.append(row)

    doc = {"pairs": rows}
    if tables:
        from .metrics import SubOiqTable, ode

        doc["ode_report"] = ode(SubOiqTable(np.mean(tables, axis=0))).to_dict()
    write_text(args.out, dumps(doc))
    if args.plot_data:
        write_text(args.plot_data, csv_text(("image", "fov", "channel", "frequency", "modulation"), plot))


def cmd_ode(args):
    files = lens_files(args.lens)
    target_cfg = read_json(args.target) if args.target else None
    rows, cols = args.grid
    scores = []
    for f in files:
        lens = load_lens(f, check_spec=args.spec_check)
        target = CheckerTarget.from_dict(target_cfg, resolution=(lens.sensor.height, lens.sensor.width)) \
            if target_cfg else None
        score = evaluate_lens(lens, target, patch_rows=rows, patch_cols=cols, threads=args.threads,
                              pupil_samples=args.pupil_samples)
        score.file = f.as_posix()
        log.info("%s: ODE %.4f", lens.lens_id, score.ode_report.ode)
        scores.append(score)
    write_text(args.out, dumps(scores_document(scores)))


def cmd_sample(args):
    manifest = stratify(load_scores(args.scores), args.levels)
    write_text(args.out, dumps(manifest.to_dict()))


def cmd_dataset(args):
    manifest = load_manifest(args.manifest)
    noise, isp = noise_and_isp(args)
    rows, cols = args.grid
    out = generate_dataset(manifest, args.gt, args.out, noise, isp, args.seed, args.lens_root, rows, cols,
                           threads=args.threads, bit_depth=args.bit_depth, pupil_samples=args.pupil_samples)
    save_json(out, Path(args.out) / "manifest.json")


def cmd_design(args):
    lens = load_lens(args.start, check_spec=args.spec_check)
    variables = DesignVariables.from_dict(read_json(args.vars)) if args.vars else DesignVariables.around(lens)
    cfg = MeritConfig.from_dict(read_json(args.merit)) if args.merit else MeritConfig()
    result = optimize(lens, variables, cfg, args.budget, seed=args.seed, threads=args.threads)
    log.info("merit %.6g -> %.6g (%s)", result.start_merit, result.merit, result.status)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_lens(result.lens, args.out)
    if args.trace:
        result.write_trace(args.trace)


# ---------------------------------------------------------------------------
# parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $ABERRA_THREADS or the CPU count)")
    common.add_argument("--seed", type=int, default=0, help="base random seed (default 0)")
    common.add_argument("--no-spec-check", dest="spec_check", action="store_false",
                        help="accept lenses whose spec lies off the design grid")
    common.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"))

    degr = argparse.ArgumentParser(add_help=False)
    degr.add_argument("--noise-sigma", type=float, default=0.0, help="Gaussian read-noise sigma (linear units)")
    degr.add_argument("--isp", action="store_true", help="apply the mosaic/white-balance/demosaic stage")
    degr.add_argument("--wb", type=parse_range, default=(1.0, 1.0), metavar="LO,HI",
                      help="white-balance gain range for R and B")
    degr.add_argument("--bayer", default="RGGB", choices=("RGGB", "BGGR", "GRBG", "GBRG"))
    degr.add_argument("--bit-depth", type=int, default=8, choices=(8, 16))

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--grid", type=parse_grid, default=(8, 8), metavar="RxC", help="patch grid (default 8x8)")
    grid.add_argument("--pupil-samples", type=int, default=48)

    p = _Parser(prog="aberra", description="Optical degradation toolkit.")
    p.add_argument("--version", action="version", version=f"aberra {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("trace", parents=[common], help="trace a ray fan to the image plane")
    s.add_argument("--lens", required=True)
    s.add_argument("--field", type=float, default=0.0, help="field angle in degrees")
    s.add_argument("--wavelength", type=float, default=587.6)
    s.add_argument("--pupil-samples", type=int, default=32)
    s.add_argument("--out", required=True, help="CSV output")
    s.set_defaults(func=cmd_trace)

    s = sub.add_parser("psf", parents=[common], help="compute a PSF grid")
    s.add_argument("--lens", required=True)
    s.add_argument("--grid", type=parse_grid, default=(8, 8), metavar="RxC")
    s.add_argument("--kernel-px", type=int, default=31)
    s.add_argument("--pupil-samples", type=int, default=48)
    s.add_argument("--response", help="CSV with wavelength_nm,r,g,b")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_psf)

    s = sub.add_parser("degrade", parents=[common, degr], help="degrade images with a PSF grid")
    s.add_argument("--gt", required=True, help="image or directory")
    s.add_argument("--psf", required=True, help="PSF grid file")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("metrics", parents=[common], help="PSNR, SSIM, OIQE and ODE of image pairs")
    s.add_argument("--degraded", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--external-scores", help="JSON {lpips, fid, clipiqa}, one object or one per image name")
    s.add_argument("--target", help="checkerboard target JSON")
    s.add_argument("--plot-data", help="CSV of measured MTF curves")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("ode", parents=[common, grid], help="score lenses by ODE")
    s.add_argument("--lens", required=True, help="lens file or directory of *.lens.json")
    s.add_argument("--target", help="checkerboard target JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ode)

    s = sub.add_parser("sample", parents=[common], help="stratify scored lenses into levels")
    s.add_argument("--scores", required=True)
    s.add_argument("--levels", type=int, default=5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("dataset", parents=[common, degr, grid], help="build an LQ/GT dataset")
    s.add_argument("--manifest", required=True)
    s.add_argument("--gt", required=True, help="directory of ground-truth images")
    s.add_argument("--lens-root", default=None, help="directory the manifest lens paths are relative to")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("design", parents=[common], help="optimise a lens")
    s.add_argument("--start", required=True)
    s.add_argument("--vars", help="design variables JSON (default: all curvatures, +-30%%)")
    s.add_argument("--merit", help="merit configuration JSON")
    s.add_argument("--budget", type=int, default=2000)
    s.add_argument("--out", required=True)
    s.add_argument("--trace", help="CSV of eval,merit,best_merit,phase")
    s.set_defaults(func=cmd_design)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.threads = thread_count(args.threads)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (AberraError, OSError) as exc:
        print(f"aberra {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"aberra {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
