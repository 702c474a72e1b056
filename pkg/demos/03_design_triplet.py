"""
Re-optimizing a detuned Cooke triplet.

Each curvature is knocked 10% off its design value, then annealing with
finite-difference ADAM phases pulls the merit back down. Freeing conics
afterwards can only help, since the optimizer keeps the best point seen.

    python demos/03_design_triplet.py [out_dir]
"""
import sys
from dataclasses import replace
from pathlib import Path

from aberra.autodesign import DesignVariables, MeritConfig, merit_terms, optimize
from aberra.lens import load_lens, save_lens
from aberra.raytrace import paraxial

ROOT = Path(__file__).resolve().parent.parent
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

design = load_lens(ROOT / "fixtures" / "cooke_triplet.lens.json")
surfaces, j = list(design.surfaces), 0
for i, s in enumerate(surfaces):
    if s.curvature:
        surfaces[i] = replace(s, curvature=s.curvature * (1.1 if j % 2 == 0 else 0.9))
        j += 1
start = design.with_surfaces(surfaces)

cfg = MeritConfig(target_efl=paraxial(design).efl)
print("design   ", merit_terms(design, cfg))
print("detuned  ", merit_terms(start, cfg))

run = optimize(start, DesignVariables.around(start), cfg, budget=2000, seed=0)
print(f"spherical pass: {run.start_merit:.4g} -> {run.merit:.4g} in {len(run.trace)} evaluations")
run.write_trace(out / "design_trace.csv")

freed = DesignVariables.around(run.lens, conic=range(len(start.surfaces) - 1), asphere_terms=1)
run2 = optimize(run.lens, freed, cfg, budget=600, seed=1)
print(f"conic/asphere pass: {run2.start_merit:.4g} -> {run2.merit:.4g} ({run2.status})")
print("final    ", merit_terms(run2.lens, cfg))
save_lens(run2.lens, out / "triplet_reoptimized.lens.json")
