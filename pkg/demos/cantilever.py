"""Optimize the graded lattice in a uniformly loaded cantilever, then check it on a fine grid.

Uses the trained model in artifacts/model_fixed.json when present (see the README for
the two commands that build it). Without one, a rough model is trained here on a few
hundred coarse cell solves; expect the fine-grid check to disagree more then.

    python3 demos/cantilever.py [--iterations 60]
"""
import argparse
from pathlib import Path

import numpy as np

from gmcopt.dataset import generate_dataset
from gmcopt.geometry import CompositeTdf, write_pgm
from gmcopt.optimize import OptimizationConfig, run_optimization
from gmcopt.surrogate import load_model, train
from gmcopt.verify import rasterize_gmc, verify_design

ap = argparse.ArgumentParser()
ap.add_argument("--iterations", type=int, default=60)
ap.add_argument("--out", default="demo_out")
args = ap.parse_args()
out = Path(args.out)
out.mkdir(exist_ok=True)

cached = Path("artifacts/model_fixed.json")
if cached.exists():
    model = load_model(cached)
else:
    print("no cached model; training a rough one (about a minute)")
    model = train(generate_dataset(300, seed=0, fraction=0.3, resolution=32), seed=0, accept=None, max_iter=150)

cfg = OptimizationConfig(load="uniform", max_iter=args.iterations)


def show(row):
    if row["iteration"] % 10 == 0:
        print(f"  it {row['iteration']:3d}  compliance {row['compliance']:9.2f}  stretch bound {row['g1']:+.3f}  angle bound {row['g2']:+.3f}")


rep = run_optimization(cfg, model, callback=show)
print(f"compliance {rep.initial_compliance:.1f} -> {rep.final_compliance:.1f} after {rep.iterations} iterations ({rep.wall_time_s:.0f} s)")

space, d = cfg.space(), np.array(rep.design)
before = rasterize_gmc(CompositeTdf(space.mapping(space.initial()), cfg.h, cfg.fraction), (800, 400), space.bounds_xy)
after = rasterize_gmc(CompositeTdf(space.mapping(d), cfg.h, cfg.fraction), (800, 400), space.bounds_xy)
write_pgm(out / "lattice_initial.pgm", before.density)
write_pgm(out / "lattice_optimized.pgm", after.density)
print(f"wrote {out}/lattice_initial.pgm and {out}/lattice_optimized.pgm")

# the fine solve resolves every bar: ~640k unknowns, about 20 s and 1.3 GB
check = verify_design(space, d, model)
print(f"homogenized {check['homogenized_compliance']:.1f}, fine grid {check['fine_compliance']:.1f} ({check['relative_deviation']:.1%} apart)")
