"""
Desk-scale automatic lens design.

A ray-traced merit (weighted RMS spot size over field points and
wavelengths, an EFL target, an edge-thickness floor and a dead-ray penalty)
is minimised by simulated annealing with periodic finite-difference ADAM
descent phases. This is a deliberately small stand-in for a full hybrid
global optimiser: no genetic search, no glass substitution, no tolerancing.

Every evaluated candidate stays inside the variable box, and with a fixed
seed the search is deterministic whatever the thread count, since parallel
work is limited to the gradient batch whose results are consumed in order.
"""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import AberraError, ValidationError
from .lens import (
    APERTURE_POSITIONS,
    D_LINE,
    F_NUMBER_GRID,
    HALF_FOV_GRID,
    MAX_ASPHERE_TERMS,
    PIECE_RANGE,
    DesignSpec,
    edge_thickness,
)
from .raytrace import ALIVE, field_direction, launch, paraxial, pupil_grid, trace_bundle

KINDS = ("curvature", "thickness", "conic", "asphere")


# ---------------------------------------------------------------------------
# variables

@dataclass(frozen=True)
class Variable:
    surface: int
    kind: str
    lo: float
    hi: float
    index: int = 0  # asphere term: 0 -> a4, 1 -> a6, ...

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown variable kind {self.kind!r}")
        if not (math.isfinite(self.lo) and math.isfinite(self.hi) and self.lo < self.hi):
            raise ValidationError(f"bounds must be finite with lo < hi, got [{self.lo}, {self.hi}]")
        if self.kind == "asphere" and not 0 <= self.index < MAX_ASPHERE_TERMS:
            raise ValidationError(f"asphere index {self.index} out of range")

    def get(self, lens):
        s = lens.surfaces[self.surface]
        if self.kind == "asphere":
            return s.asphere_coeffs[self.index] if self.index < len(s.asphere_coeffs) else 0.0
        return getattr(s, self.kind)

    def set(self, surface, value):
        if self.kind == "asphere":
            coeffs = list(surface.asphere_coeffs) + [0.0] * (self.index + 1 - len(surface.asphere_coeffs))
            coeffs[self.index] = value
            return replace(surface, asphere_coeffs=tuple(coeffs))
        return replace(surface, **{self.kind: value})


@dataclass(frozen=True)
class DesignVariables:
    """Free parameters with box bounds and a flat vector view."""

    variables: tuple

    def __post_init__(self):
        v = tuple(self.variables)
        if not v:
            raise ValidationError("at least one free variable is required")
        keys = [(x.surface, x.kind, x.index) for x in v]
        if len(set(keys)) != len(keys):
            raise ValidationError("duplicate design variable")
        object.__setattr__(self, "variables", v)

    def __len__(self):
        return len(self.variables)

    @property
    def lower(self):
        return np.array([v.lo for v in self.variables])

    @property
    def upper(self):
        return np.array([v.hi for v in self.variables])

    def values(self, lens):
        return np.array([v.get(lens) for v in self.variables], dtype=np.float64)

    def apply(self, lens, x):
        """Lens with the variables set to ``x`` (validated by the surface constructor)."""
        x = np.asarray(x, dtype=np.float64)
        if np.any(x < self.lower) or np.any(x > self.upper):
            raise ValidationError("design vector outside its bounds")
        surfaces = list(lens.surfaces)
        for var, value in zip(self.variables, x):
            surfaces[var.surface] = var.set(surfaces[var.surface], float(value))
        return lens.with_surfaces(surfaces)

    def check(self, lens):
        for v in self.variables:
            if not 0 <= v.surface < len(lens.surfaces):
                raise ValidationError(f"variable refers to missing surface {v.surface}")
        x = self.values(lens)
        if np.any(x < self.lower) or np.any(x > self.upper):
            raise ValidationError("start lens lies outside the variable bounds")

    @classmethod
    def around(cls, lens, curvature=True, thickness=(), conic=(), asphere_terms=0, rel=0.3,
               curvature_floor=0.005, conic_range=2.0, asphere_scale=1e-5):
        """Boxes centred on the current values.

        Curvatures move by ``rel`` of their magnitude (at least
        ``curvature_floor``); ``thickness`` lists surfaces whose thickness is
        free, also by ``rel``; ``conic`` lists surfaces with a free conic;
        ``asphere_terms`` frees that many polynomial terms on those same
        surfaces.
        """
        out = []
        for i, s in enumerate(lens.surfaces):
            if curvature and s.curvature != 0.0:
                d = max(abs(s.curvature) * rel, curvature_floor)
                out.append(Variable(i, "curvature", s.curvature - d, s.curvature + d))
        for i in thickness:
            t = lens.surfaces[i].thickness
            out.append(Variable(i, "thickness", t * (1 - rel), t * (1 + rel)))
        for i in conic:
            k = lens.surfaces[i].conic
            out.append(Variable(i, "conic", k - conic_range, k + conic_range))
            for j in range(asphere_terms):
                a = Variable(i, "asphere", -1.0, 1.0, j).get(lens)
                scale = asphere_scale / 10.0 ** (2 * j)
                out.append(Variable(i, "asphere", a - scale, a + scale, j))
        return cls(tuple(out))

    def to_dict(self):
        return {"variables": [
            {"surface": v.surface, "kind": v.kind, "lo": v.lo, "hi": v.hi, **({"index": v.index} if v.kind == "asphere" else {})}
            for v in self.variables
        ]}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(tuple(Variable(int(v["surface"]), v["kind"], float(v["lo"]), float(v["hi"]), int(v.get("index", 0)))
                             for v in d["variables"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"bad variable description: {exc}") from None


# ---------------------------------------------------------------------------
# merit

@dataclass(frozen=True)
class MeritConfig:
    """Weights of the merit terms.

    ``field_weights`` pairs a field fraction of the lens half FoV with its
    weight. Spot sizes are in mm, so the RMS^2 terms are mm^2.
    """

    field_weights: tuple = ((0.0, 1.0), (0.7, 1.0), (1.0, 1.0))
    target_efl: float | None = None
    efl_weight: float = 1e-4
    min_edge_thickness: float = 0.3
    edge_weight: float = 1.0
    ray_failure_penalty: float = 1.0
    wavelengths: tuple = (486.1, D_LINE, 656.3)
    pupil_samples: int = 12

    def __post_init__(self):
        if any(w < 0 for _, w in self.field_weights) or self.efl_weight < 0 or self.edge_weight < 0:
            raise ValidationError("merit weights must be >= 0")
        if self.ray_failure_penalty < 0:
            raise ValidationError("ray failure penalty must be >= 0")
        if not self.min_edge_thickness > 0:
            raise ValidationError("min_edge_thickness must be > 0")
        if not self.wavelengths:
            raise ValidationError("need at least one wavelength")
        object.__setattr__(self, "field_weights", tuple((float(f), float(w)) for f, w in self.field_weights))
        object.__setattr__(self, "wavelengths", tuple(float(x) for x in self.wavelengths))

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown merit keys: {sorted(unknown)}")
        d = dict(d)
        if "field_weights" in d:
            d["field_weights"] = tuple(tuple(p) for p in d["field_weights"])
        if "wavelengths" in d:
            d["wavelengths"] = tuple(d["wavelengths"])
        return cls(**d)


@dataclass
class MeritTerms:
    spot: float = 0.0
    efl: float = 0.0
    edge: float = 0.0
    failure: float = 0.0

    @property
    def total(self):
        return self.spot + self.efl + self.edge + self.failure


def merit_terms(lens, cfg):
    """Individual merit contributions; failures turn into penalties, never errors."""
    terms = MeritTerms()
    try:
        px = paraxial(lens)
    except AberraError:
        terms.failure = cfg.ray_failure_penalty
        return terms
    if cfg.target_efl is not None:
        terms.efl = cfg.efl_weight * (px.efl - cfg.target_efl) ** 2
    for i in range(len(lens.surfaces) - 1):
        e = edge_thickness(lens, i)
        if e < cfg.min_edge_thickness:
            gap = cfg.min_edge_thickness - e if math.isfinite(e) else 1e3
            terms.edge += cfg.edge_weight * gap * gap

    grid = pupil_grid(cfg.pupil_samples)
    lam = np.asarray(cfg.wavelengths)
    pupil = np.tile(grid, (lam.size, 1))
    lam_rays = np.repeat(lam, len(grid))
    dead = total = 0
    hfov = math.radians(lens.spec.half_fov_deg)
    for frac, w in cfg.field_weights:
        try:
            res = trace_bundle(lens, launch(lens, field_direction(0.0, math.tan(frac * hfov)), pupil, lam_rays,
                                            paraxial_summary=px))
        except AberraError:
            dead += len(lam_rays)
            total += len(lam_rays)
            continue
        alive = res.status == ALIVE
        dead += int((~alive).sum())
        total += alive.size
        if w == 0:
            continue
        rms2 = []
        for wl in lam:
            sel = alive & (lam_rays == wl)
            if sel.sum() < 2:
                continue
            xy = res.origins[sel, :2]
            rms2.append(float(np.mean(np.sum((xy - xy.mean(axis=0)) ** 2, axis=1))))
        if rms2:
            terms.spot += w * math.fsum(rms2) / len(rms2)
    terms.failure = cfg.ray_failure_penalty * dead / max(total, 1)
    return terms


def merit(lens, cfg):
    """Non-negative scalar merit of ``lens`` (lower is better)."""
    return merit_terms(lens, cfg).total


# ---------------------------------------------------------------------------
# optimiser

@dataclass(frozen=True)
class Schedule:
    """Search settings.

    ``t0`` defaults to the start merit. Proposals move every variable by a
    Gaussian step of ``step_scale`` times its box width. After every
    ``adam_every`` accepted annealing moves an ADAM phase of ``adam_steps``
    central-difference gradient steps runs from the current point.
    """

    t0: float | None = None
    cooling: float = 0.995
    step_scale: float = 0.02
    adam_every: int = 20
    adam_steps: int = 10
    lr: float = 1e-2
    fd_step: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999

    @classmethod
    def frozen(cls):
        """Zero temperature, zero step: the identity schedule."""
        return cls(t0=0.0, step_scale=0.0, adam_every=0, lr=0.0)


@dataclass
class OptimizeResult:
    lens: object
    merit: float
    start_merit: float
    trace: list = field(default_factory=list)  # rows: eval, merit, best_merit, phase
    status: str = "improved"

    def write_trace(self, path):
        lines = ["eval,merit,best_merit,phase"]
        lines += [f"{r['eval']},{r['merit']!r},{r['best_merit']!r},{r['phase']}" for r in self.trace]
        Path(path).write_text("\n".join(lines) + "\n")
        return Path(path)


class _Budget(Exception):
    pass


def optimize(lens0, variables, cfg, budget, seed=0, schedule=None, threads=None):
    """Anneal, with periodic FD-ADAM descent, within ``budget`` merit evaluations.

    Returns
    -------
    OptimizeResult
        The best lens seen (``lens0`` itself when nothing beat it, in which
        case ``status`` is ``"no_improvement"``) and the per-evaluation trace.
    """
    if budget < 1:
        raise ValidationError("budget must be >= 1 evaluation")
    sched = schedule or Schedule()
    variables.check(lens0)
    lo, hi = variables.lower, variables.upper
    width = hi - lo
    rng = np.random.Generator(np.random.Philox(seed))
    trace = []
    state = {"best_x": None, "best": math.inf}
    pool = ThreadPoolExecutor(max_workers=threads) if threads and threads > 1 else None

    def score(x):
        try:
            return merit(variables.apply(lens0, x), cfg)
        except AberraError:
            return cfg.ray_failure_penalty + 1.0

    def record(x, m, phase):
        if m < state["best"]:
            state["best"], state["best_x"] = m, x.copy()
        trace.append({"eval": len(trace), "merit": m, "best_merit": state["best"], "phase": phase})

    def evaluate(x, phase):
        if len(trace) >= budget:
            raise _Budget
        m = score(x)
        record(x, m, phase)
        return m

    def evaluate_batch(points, phase):
        room = budget - len(trace)
        if room <= 0:
            raise _Budget
        todo = points[:room]
        vals = list(pool.map(score, todo)) if pool else [score(p) for p in todo]
        for p, m in zip(todo, vals):
            record(p, m, phase)
        if len(todo) < len(points):
            raise _Budget
        return vals

    def gradient(x):
        h = np.maximum(sched.fd_step * width, 1e-15)
        pts = []
        for i in range(len(x)):
            up, dn = x.copy(), x.copy()
            up[i] = min(x[i] + h[i], hi[i])
            dn[i] = max(x[i] - h[i], lo[i])
            pts += [up, dn]
        vals = evaluate_batch(pts, "adam")
        g = np.empty(len(x))
        for i in range(len(x)):
            span = pts[2 * i][i] - pts[2 * i + 1][i]
            g[i] = (vals[2 * i] - vals[2 * i + 1]) / span if span > 0 else 0.0
        return g

    def adam(x, fx):
        m1 = np.zeros_like(x)
        m2 = np.zeros_like(x)
        for k in range(1, sched.adam_steps + 1):
            g = gradient(x)
            m1 = sched.beta1 * m1 + (1 - sched.beta1) * g
            m2 = sched.beta2 * m2 + (1 - sched.beta2) * g * g
            mh = m1 / (1 - sched.beta1**k)
            vh = m2 / (1 - sched.beta2**k)
            step = sched.lr * width * mh / (np.sqrt(vh) + 1e-12)
            x = np.clip(x - step, lo, hi)
            fx = evaluate(x, "adam")
        return x, fx

    x = variables.values(lens0)
    try:
        fx = evaluate(x, "start")
        start = fx
        temp = fx if sched.t0 is None else sched.t0
        accepted = 0
        while True:
            y = np.clip(x + sched.step_scale * width * rng.standard_normal(len(x)), lo, hi)
            u = rng.random()
            fy = evaluate(y, "anneal")
            delta = fy - fx
            if delta <= 0 or (temp > 0 and u < math.exp(-delta / temp)):
                x, fx = y, fy
                accepted += 1
                if sched.adam_every and accepted % sched.adam_every == 0:
                    x, fx = adam(x, fx)
            temp *= sched.cooling
    except _Budget:
        pass
    finally:
        if pool:
            pool.shutdown()

    if state["best"] < start:
        best_lens = variables.apply(lens0, state["best_x"])
        return OptimizeResult(best_lens, state["best"], start, trace, "improved")
    return OptimizeResult(lens0, start, start, trace, "no_improvement")


# ---------------------------------------------------------------------------
# design specification grid

def aperture_positions(pieces):
    return ("front", "rear") if pieces == 1 else APERTURE_POSITIONS


def enumerate_specs():
    """Every (pieces, half FoV, F-number, aperture position) of the design grid."""
    out = []
    pieces = range(PIECE_RANGE[0], PIECE_RANGE[1] + 1)
    for p, hfov, fno in itertools.product(pieces, HALF_FOV_GRID, F_NUMBER_GRID):
        for pos in aperture_positions(p):
            out.append(DesignSpec(p, float(hfov), float(fno), pos).validate())
    return out


def load_json_config(path, cls):
    return cls.from_dict(json.loads(Path(path).read_text()))
