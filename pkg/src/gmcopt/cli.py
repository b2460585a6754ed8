"""Command-line entry point: gen-data, train, optimize, verify, report.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 acceptance failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_ACCEPT = 0, 1, 2, 3

log = logging.getLogger("gmcopt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path, section):
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    merged = dict(doc.get("material", {}))
    merged.update(doc.get(section, {}))
    return {k.replace("-", "_"): v for k, v in merged.items()}


def _effective(args, defaults: dict, section: str):
    """Defaults < config file < explicitly given flags."""
    cfg = dict(defaults)
    cfg.update(_load_config(getattr(args, "config", None), section))
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _positive(kind):
    def conv(s):
        v = kind(s)
        if v <= 0:
            raise argparse.ArgumentTypeError("must be positive")
        return v

    return conv


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

GEN_DEFAULTS = {"count": 4000, "seed": 0, "zeta": "0.3", "resolution": 64, "workers": 1, "out": "dataset.csv", "nu": 0.3, "indicator": "smooth"}


def cmd_gen_data(args):
    from .cell import Material
    from .dataset import DatasetAbort, generate_dataset

    cfg = _effective(args, GEN_DEFAULTS, "gen-data")
    if int(cfg["count"]) < 1:
        raise UsageError("--count must be at least 1")
    zeta = str(cfg["zeta"])
    if zeta not in ("variable", "solid"):
        try:
            zeta = float(zeta)
        except ValueError as exc:
            raise UsageError("--zeta must be a number, 'variable' or 'solid'") from exc
    t0 = time.perf_counter()

    def progress(i, n, nfail):
        if i % max(1, n // 20) == 0 or i == n:
            print(f"  {i}/{n} samples, {nfail} failed, {time.perf_counter() - t0:.0f} s", file=sys.stderr)

    try:
        ds = generate_dataset(
            int(cfg["count"]),
            seed=int(cfg["seed"]),
            fraction=zeta,
            resolution=int(cfg["resolution"]),
            material=Material(nu=float(cfg["nu"])),
            indicator=cfg["indicator"],
            workers=int(cfg["workers"]),
            progress=progress,
        )
    except DatasetAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    ds.header["config"] = {k: v for k, v in cfg.items() if k not in ("workers", "out")}
    ds.save(cfg["out"])
    nfail = len(ds.header["failures"])
    print(f"wrote {len(ds)} records to {cfg['out']} ({nfail} failures)")
    return EXIT_OK


TRAIN_DEFAULTS = {"data": None, "seed": 0, "accept": 0.005, "max_iter": 1000, "patience": 50, "out": "model.json"}


def cmd_train(args):
    from .dataset import load_dataset
    from .surrogate import TrainingFailure, train

    cfg = _effective(args, TRAIN_DEFAULTS, "train")
    if not cfg["data"] or not Path(cfg["data"]).is_file():
        raise UsageError("--data must name an existing dataset file")
    ds = load_dataset(cfg["data"])

    def progress(name, lg):
        print(f"  {name}: {lg.iterations} iterations, best at {lg.best_iteration}", file=sys.stderr)

    status = EXIT_OK
    try:
        model = train(ds, seed=int(cfg["seed"]), accept=float(cfg["accept"]), max_iter=int(cfg["max_iter"]), patience=int(cfg["patience"]), progress=progress)
    except TrainingFailure as exc:
        model = exc.model
        status = EXIT_ACCEPT
    model.meta["config"] = {k: v for k, v in cfg.items() if k != "out"}
    model.save(cfg["out"])
    print(f"{'network':8s} {'val nRMSE':>10s} {'iters':>6s} {'time s':>8s}")
    for name, m in model.meta["networks"].items():
        flag = "" if m["val_nrmse"] <= float(cfg["accept"]) else "  FAIL"
        print(f"{name:8s} {m['val_nrmse']:10.4%} {m['iterations']:6d} {m['wall_time_s']:8.1f}{flag}")
    if status:
        print(f"error: validation RMSE above {float(cfg['accept']):.2%}; model written to {cfg['out']} for inspection", file=sys.stderr)
    return status


OPT_DEFAULTS = {
    "model": None,
    "load": "uniform",
    "nx": 100,
    "ny": 50,
    "h": 0.1,
    "fraction": 0.3,
    "vbar": 0.3,
    "variable": False,
    "zones": 200,
    "max_iter": 200,
    "tol": 1e-4,
    "p": 16,
    "constraint_mode": "explicit",
    "move": 0.1,
    "snapshot_every": 0,
    "out_dir": "run",
}


def _model(path):
    from .surrogate import SurrogateError, load_model

    if not path or not Path(path).is_file():
        raise UsageError(f"model file not found: {path}")
    try:
        return load_model(path)
    except (SurrogateError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot load model {path}: {exc}") from exc


def cmd_optimize(args):
    from .macro import write_macro_vtk
    from .optimize import OptimizationAbort, OptimizationConfig, evaluate, run_optimization

    cfg = _effective(args, OPT_DEFAULTS, "optimize")
    model = _model(cfg["model"])
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    names = {f.name for f in fields(OptimizationConfig)}
    oc = OptimizationConfig(**{k: v for k, v in cfg.items() if k in names and k != "out_dir"}, out_dir=str(out))

    def cb(row):
        if row["iteration"] % 10 == 0:
            print(f"  it {row['iteration']:4d}  C={row['compliance']:.6g}  g1={row['g1']:.3g}  g2={row['g2']:.3g}  Vf={row['volume_fraction']:.4f}", file=sys.stderr)

    try:
        rep = run_optimization(oc, model, callback=cb)
        status = EXIT_OK
    except OptimizationAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        rep, status = exc.report, EXIT_NUMERIC
    rep.config.update({"model": cfg["model"], "model_meta": model.meta.get("dataset")})
    rep.save(out / "report.json")
    space = oc.space()
    ev = evaluate(space, np.array(rep.design), model, oc.zones, with_grad=False)
    write_macro_vtk(out / "macro_final.vtk", space.problem, ev.solution)
    print(f"compliance {rep.initial_compliance:.6g} -> {rep.final_compliance:.6g} in {rep.iterations} iterations ({rep.wall_time_s:.1f} s)")
    return status


VERIFY_DEFAULTS = {"suite": "design", "run": None, "model": None, "grid": "800x400", "h": None, "indicator": "smooth", "out": None, "n": None, "resolution": 64, "tolerance": None}


def cmd_verify(args):
    from .geometry import write_pgm
    from .optimize import config_from_report, load_report
    from .verify import rasterize_gmc, rotational_symmetry_suite, scale_invariance_suite, verify_design

    cfg = _effective(args, VERIFY_DEFAULTS, "verify")
    suite = cfg["suite"]
    if suite == "symmetry":
        model = _model(cfg["model"])
        rep = rotational_symmetry_suite(model, n=int(cfg["n"] or 100), fraction=float(model.fraction or 0.3), r=int(cfg["resolution"]))
        tol = float(cfg["tolerance"] or 0.01)
        print(f"{'entry':6s} {'RMSE':>9s}")
        for k, v in rep["rmse"].items():
            print(f"{k:6s} {v:9.4%}")
        ok = rep["max_rmse"] <= tol
    elif suite == "scale-invariance":
        rep = scale_invariance_suite(n=int(cfg["n"] or 20), r=int(cfg["resolution"]))
        print(f"max tensor rel. error {rep['max_tensor_rel_error']:.3e}, max corrector rel. error {rep['max_corrector_rel_error']:.3e}")
        ok = rep["max_tensor_rel_error"] <= 1e-9 and rep["max_corrector_rel_error"] <= 1e-8
    elif suite == "design":
        if not cfg["run"] or not Path(cfg["run"]).exists():
            raise UsageError("--run must name an optimization report or run directory")
        rp = Path(cfg["run"])
        rp = rp / "report.json" if rp.is_dir() else rp
        report = load_report(rp)
        oc = config_from_report(report)
        model = _model(cfg["model"] or report.config.get("model"))
        grid = tuple(int(v) for v in str(cfg["grid"]).lower().split("x"))
        h = float(cfg["h"] or oc.h)
        rep = verify_design(oc.space(), np.array(report.design), model, h=h, grid=grid, indicator=cfg["indicator"])
        print(f"homogenized {rep['homogenized_compliance']:.6g}  fine {rep['fine_compliance']:.6g}  deviation {rep['relative_deviation']:.3%}")
        for w in rep["warnings"]:
            print(f"warning: {w}", file=sys.stderr)
        ok = rep["relative_deviation"] <= float(cfg["tolerance"] or 0.02)
        if cfg["out"]:
            from .geometry import CompositeTdf

            space = oc.space()
            d = np.array(report.design)
            tdf = CompositeTdf(space.mapping(d), h, space.fraction_field(d) if space.variable else space.fraction)
            fm = rasterize_gmc(tdf, grid, space.bounds_xy, cfg["indicator"])
            write_pgm(Path(cfg["out"]).with_suffix(".pgm"), fm.density)
    else:
        raise UsageError(f"unknown suite {suite!r}")
    rep["config"] = cfg
    rep["version"] = __version__
    if cfg["out"]:
        Path(cfg["out"]).write_text(json.dumps(rep, indent=1, sort_keys=True, default=float))
    return EXIT_OK if ok else EXIT_ACCEPT


REPORT_DEFAULTS = {"run": None, "model": None, "zones": "2,8,32,128,5000", "repeats": 3, "direct_zones": 128, "direct": True, "out": None}


def cmd_report(args):
    from .optimize import config_from_report, load_report
    from .surrogate import DirectModel
    from .timing import iteration_timing

    cfg = _effective(args, REPORT_DEFAULTS, "report")
    rp = Path(cfg["run"]) if cfg["run"] else None
    if rp is None or not rp.exists() or (rp.is_dir() and not (rp / "report.json").exists()):
        raise UsageError("--run must name a run directory containing report.json")
    rp = rp / "report.json" if rp.is_dir() else rp
    report = load_report(rp)
    oc = config_from_report(report)
    model = _model(cfg["model"] or report.config.get("model"))
    space = oc.space()
    d = np.array(report.design)
    zones = [int(z) for z in str(cfg["zones"]).split(",")]
    rows = [{"zones": N, "surrogate_s": iteration_timing(space, d, model, N, int(cfg["repeats"]))} for N in zones]
    print(f"{'zones':>6s} {'time per iteration (s)':>24s}")
    for r in rows:
        print(f"{r['zones']:6d} {r['surrogate_s']:24.3f}")
    out = {"rows": rows, "config": cfg, "version": __version__}
    if cfg["direct"]:
        Nd = int(cfg["direct_zones"])
        direct = DirectModel(fraction=space.fraction, variable=model.variable)
        td = iteration_timing(space, d, direct, Nd, 1)
        ts = next((r["surrogate_s"] for r in rows if r["zones"] == Nd), None) or iteration_timing(space, d, model, Nd, int(cfg["repeats"]))
        out["direct"] = {"zones": Nd, "direct_s": td, "surrogate_s": ts, "speedup": td / ts}
        print(f"direct cell solves at {Nd} zones: {td:.2f} s per iteration ({td / ts:.0f}x the surrogate)")
    if cfg["out"]:
        Path(cfg["out"]).write_text(json.dumps(out, indent=1, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="gmcopt", description="Graded lattice compliance optimization with a homogenization surrogate.")
    p.add_argument("--version", action="version", version=f"gmcopt {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="sample cell deformations and homogenize them")
    g.add_argument("--config")
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--zeta", help="cell fraction, 'variable' or 'solid'")
    g.add_argument("--resolution", type=_positive(int))
    g.add_argument("--workers", type=_positive(int))
    g.add_argument("--nu", type=float)
    g.add_argument("--indicator", choices=["smooth", "binary"])
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the six surrogate networks")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--seed", type=int)
    t.add_argument("--accept", type=_positive(float))
    t.add_argument("--max-iter", dest="max_iter", type=_positive(int))
    t.add_argument("--patience", type=_positive(int))
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("optimize", help="run the compliance optimization")
    o.add_argument("--config")
    o.add_argument("--model")
    o.add_argument("--load", choices=["uniform", "point"])
    o.add_argument("--nx", type=_positive(int))
    o.add_argument("--ny", type=_positive(int))
    o.add_argument("--h", type=_positive(float))
    o.add_argument("--fraction", type=_positive(float))
    o.add_argument("--vbar", type=_positive(float))
    o.add_argument("--variable", action="store_const", const=True)
    o.add_argument("--zones", type=_positive(int))
    o.add_argument("--max-iter", dest="max_iter", type=_positive(int))
    o.add_argument("--constraint-mode", dest="constraint_mode", choices=["explicit", "penalty"])
    o.add_argument("--move", type=_positive(float))
    o.add_argument("--snapshot-every", dest="snapshot_every", type=int)
    o.add_argument("--out-dir", dest="out_dir")
    o.set_defaults(func=cmd_optimize)

    v = sub.add_parser("verify", help="fine-mesh verification and invariance suites")
    v.add_argument("--config")
    v.add_argument("--suite", choices=["design", "symmetry", "scale-invariance"])
    v.add_argument("--run")
    v.add_argument("--model")
    v.add_argument("--grid")
    v.add_argument("--h", type=_positive(float))
    v.add_argument("--indicator", choices=["smooth", "binary"])
    v.add_argument("--n", type=_positive(int))
    v.add_argument("--resolution", type=_positive(int))
    v.add_argument("--tolerance", type=_positive(float))
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("report", help="per-iteration timing table over zone counts")
    r.add_argument("--config")
    r.add_argument("--run")
    r.add_argument("--model")
    r.add_argument("--zones")
    r.add_argument("--repeats", type=_positive(int))
    r.add_argument("--direct-zones", dest="direct_zones", type=_positive(int))
    r.add_argument("--no-direct", dest="direct", action="store_const", const=False)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    from ._sparse import SingularSystemError
    from .cell import CellError
    from .geometry import GeometryError
    from .macro import MacroError
    from .mma import MMAError
    from .surrogate import SurrogateError

    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gmcopt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SingularSystemError, CellError, GeometryError, MacroError, MMAError, SurrogateError, np.linalg.LinAlgError) as exc:
        print(f"gmcopt {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
