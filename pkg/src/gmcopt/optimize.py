"""Compliance minimization over mapping coefficients and an optional cell-fraction field.

The design vector holds the 18 independent polynomial coefficients followed by the
cell-fraction control values. MMA sees them normalized to ``[0, 1]``.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import __version__
from .geometry import FRACTION_RANGE, N_POLY, MappingPoly, OrientationError, det2, jacobian_at, jacobian_basis
from .macro import MacroProblem, assemble_solve, evaluate_zone_tensors, partition_zones, write_macro_vtk, zone_energy_terms
from .mma import MMASettings, MMAState, mma_step

P_DEFAULT = 16
LAMBDA2_MAX = 9.0
SIN_MIN_INV = np.sqrt(2.0)
MAX_STEP_HALVINGS = 20


class OptimizationAbort(RuntimeError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


class InvertedCellError(OrientationError):
    pass


# ---------------------------------------------------------------------------
# cell-fraction field
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FractionGrid:
    """Bilinear field on a ``gx x gy`` node grid spanning the rectangle ``bounds``."""

    gx: int
    gy: int
    bounds: tuple = ((0.0, 2.0), (0.0, 1.0))

    @property
    def size(self):
        return self.gx * self.gy

    def weights(self, pts) -> sp.csr_matrix:
        """Sparse (n_points, n_controls) interpolation matrix."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        (x0, x1), (y0, y1) = self.bounds
        u = np.clip((pts[:, 0] - x0) / (x1 - x0) * (self.gx - 1), 0, self.gx - 1)
        v = np.clip((pts[:, 1] - y0) / (y1 - y0) * (self.gy - 1), 0, self.gy - 1)
        i = np.minimum(np.floor(u).astype(int), self.gx - 2)
        j = np.minimum(np.floor(v).astype(int), self.gy - 2)
        fu, fv = u - i, v - j
        n = len(pts)
        rows = np.repeat(np.arange(n), 4)
        cols = np.stack([i + self.gx * j, i + 1 + self.gx * j, i + self.gx * (j + 1), i + 1 + self.gx * (j + 1)], 1).ravel()
        vals = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], 1).ravel()
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, self.size))

    def field(self, values):
        values = np.asarray(values, dtype=float)
        return lambda x: self.weights(x) @ values if np.ndim(x) == 2 else (self.weights(x) @ values).reshape(np.shape(x)[:-1])


# ---------------------------------------------------------------------------
# design space
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DesignSpace:
    """Layout, bounds and defaults of the design vector for one macro problem.

    Coefficients are in mapping units where the unit cell has physical size ``h`` (the
    level set is evaluated at ``y(x)/h``), so ``a = I`` is the undeformed lattice.
    """

    problem: MacroProblem
    fraction: float = 0.3
    grid: FractionGrid | None = None
    a_bound: float = 3.0
    b_bound: float = 2.0
    c_bound: float = 1.0

    @property
    def origin(self):
        return np.array([0.5 * self.problem.width, 0.5 * self.problem.height])

    @property
    def bounds_xy(self):
        return ((0.0, self.problem.width), (0.0, self.problem.height))

    @property
    def variable(self):
        return self.grid is not None

    @property
    def size(self):
        return N_POLY + (self.grid.size if self.grid else 0)

    def lower_upper(self):
        lo = np.concatenate([np.full(4, -self.a_bound), np.full(6, -self.b_bound), np.full(8, -self.c_bound)])
        hi = -lo
        if self.grid:
            lo = np.concatenate([lo, np.full(self.grid.size, FRACTION_RANGE[0])])
            hi = np.concatenate([hi, np.full(self.grid.size, FRACTION_RANGE[1])])
        return lo, hi

    def initial(self, fraction=None):
        d = np.zeros(self.size)
        d[[0, 3]] = 1.0
        if self.grid:
            d[N_POLY:] = self.fraction if fraction is None else fraction
        return d

    def mapping(self, d) -> MappingPoly:
        return MappingPoly.from_vector(np.asarray(d)[:N_POLY], origin=self.origin, bounds=self.bounds_xy)

    def fraction_controls(self, d):
        return np.asarray(d)[N_POLY:] if self.grid else None

    def fraction_field(self, d):
        if self.grid:
            return self.grid.field(self.fraction_controls(d))
        f = float(self.fraction)
        return lambda x: np.full(np.shape(x)[:-1], f)

    def to_unit(self, d):
        lo, hi = self.lower_upper()
        return (np.asarray(d) - lo) / (hi - lo)

    def from_unit(self, s):
        lo, hi = self.lower_upper()
        return lo + np.asarray(s) * (hi - lo)


# ---------------------------------------------------------------------------
# constraints
# ---------------------------------------------------------------------------


def quadrature(problem: MacroProblem):
    """Element-centroid points and weights over the macro domain."""
    return problem.element_centroids, np.full(problem.n_elements, problem.dx * problem.dy)


def _distortion_terms(J):
    r1 = J[..., 0, 0] ** 2 + J[..., 0, 1] ** 2
    r2 = J[..., 1, 0] ** 2 + J[..., 1, 1] ** 2
    det = det2(J)
    lam2 = r1 / r2
    sin2 = det / np.sqrt(r1 * r2)
    dr1 = np.zeros(J.shape)
    dr1[..., 0, :] = 2 * J[..., 0, :]
    dr2 = np.zeros(J.shape)
    dr2[..., 1, :] = 2 * J[..., 1, :]
    ddet = np.stack([np.stack([J[..., 1, 1], -J[..., 1, 0]], -1), np.stack([-J[..., 0, 1], J[..., 0, 0]], -1)], -2)
    dlam2 = (dr1 - lam2[..., None, None] * dr2) / r2[..., None, None]
    dsin = ddet / np.sqrt(r1 * r2)[..., None, None] - 0.5 * sin2[..., None, None] * (dr1 / r1[..., None, None] + dr2 / r2[..., None, None])
    return lam2, sin2, dlam2, dsin


@dataclass(frozen=True)
class ConstraintState:
    g1: float
    g2: float
    dg1: np.ndarray
    dg2: np.ndarray
    p: int
    max_lam2: float
    min_sin: float


def constraint_aggregates(mapping: MappingPoly, points, weights, p: int = P_DEFAULT, basis=None) -> ConstraintState:
    """p-norm aggregates of the stretch and shear bounds with gradients w.r.t. the 18 coefficients.

    ``g1 = (int lam^2p + lam^-2p)^(1/p) - 9``, ``g2 = (int sin^-p)^(1/p) - sqrt(2)``; the
    design satisfies the bounds when both are non-positive.
    """
    if p < 1:
        raise ValueError("aggregate exponent must be positive")
    J = jacobian_at(points, mapping)
    if np.any(~(det2(J) > 0)):
        raise InvertedCellError("det J <= 0 at a quadrature point")
    lam2, sin2, dlam2, dsin = _distortion_terms(J)
    f1 = lam2**p + lam2 ** (-p)
    G1 = weights @ f1
    df1 = p * (lam2 ** (p - 1) - lam2 ** (-p - 1))
    f2 = sin2 ** (-p)
    G2 = weights @ f2
    df2 = -p * sin2 ** (-p - 1)
    if basis is None:
        basis = jacobian_basis(points, mapping.origin)
    dG1 = np.einsum("n,nij,nijk->k", weights * df1, dlam2, basis)
    dG2 = np.einsum("n,nij,nijk->k", weights * df2, dsin, basis)
    g1 = G1 ** (1.0 / p)
    g2 = G2 ** (1.0 / p)
    return ConstraintState(
        g1=float(g1 - LAMBDA2_MAX),
        g2=float(g2 - SIN_MIN_INV),
        dg1=g1 / (p * G1) * dG1,
        dg2=g2 / (p * G2) * dG2,
        p=p,
        max_lam2=float(np.max(np.maximum(lam2, 1 / lam2))),
        min_sin=float(sin2.min()),
    )


def smooth_heaviside(g, width=1e-3):
    z = np.clip(g / width, -700, 700)
    H = 1.0 / (1.0 + np.exp(-z))
    return H, H * (1 - H) / width


def gauss_points(problem: MacroProblem):
    """2x2 Gauss points of every macro element and their weights."""
    g = np.array([-1.0, 1.0]) / np.sqrt(3.0)
    c = problem.element_centroids
    off = np.array([[a * 0.5 * problem.dx, b * 0.5 * problem.dy] for b in g for a in g])
    pts = (c[:, None, :] + off[None]).reshape(-1, 2)
    w = np.full(len(pts), 0.25 * problem.dx * problem.dy)
    return pts, w


def volume_fraction(space: DesignSpace, d, with_grad=False):
    """Solid volume fraction of the design; exact for the bilinear fraction field."""
    if not space.variable:
        return (space.fraction, np.zeros(space.size)) if with_grad else space.fraction
    pts, w = gauss_points(space.problem)
    wv = (space.grid.weights(pts).T @ w) / space.problem.area
    z = space.fraction_controls(d)
    vf = float(wv @ z)
    if not with_grad:
        return vf
    g = np.zeros(space.size)
    g[N_POLY:] = wv
    return vf, g


# ---------------------------------------------------------------------------
# objective and sensitivities
# ---------------------------------------------------------------------------


def unit_det_derivative(J):
    """``dJ'_pq / dJ_rs`` for ``J' = det(J)^(-1/2) J``: shape (..., 2, 2, 2, 2)."""
    J = np.asarray(J, dtype=float)
    d = det2(J)
    Jinv = np.linalg.inv(J)
    eye = np.eye(2)
    t1 = np.einsum("pr,qs->pqrs", eye, eye)
    t1 = np.broadcast_to(t1, J.shape[:-2] + (2, 2, 2, 2))
    t2 = 0.5 * np.einsum("...pq,...sr->...pqrs", J, Jinv)
    return (t1 - t2) / np.sqrt(d)[..., None, None, None, None]


@dataclass
class Evaluation:
    compliance: float
    gradient: np.ndarray
    solution: object
    zones: object
    partition: object


def evaluate(space: DesignSpace, d, model, n_zones: int, with_grad: bool = True, partition=None) -> Evaluation:
    """Compliance of design d with the surrogate and its gradient over the design vector."""
    problem = space.problem
    part = partition or partition_zones(problem, n_zones)
    mapping = space.mapping(d)
    zfield = space.fraction_field(d)
    zt = evaluate_zone_tensors(part, mapping, model, zfield)
    sol = assemble_solve(problem, zt.C, part)
    grad = None
    if with_grad:
        Sz = zone_energy_terms(sol, part)
        z = zt.zeta
        dCdJp = model.dC_dJ(zt.Jp, z)  # (N, 2, 2, 3, 3)
        A = -np.einsum("npqik,nik->npq", dCdJp, Sz)
        B = np.einsum("npq,npqrs->nrs", A, unit_det_derivative(zt.J))
        grad = np.zeros(space.size)
        grad[:N_POLY] = np.einsum("nrs,nrsk->k", B, part.jacobian_basis(mapping.origin))
        if space.variable:
            dCdz = model.dC_dzeta(zt.Jp, z)
            dz = -np.einsum("nik,nik->n", dCdz, Sz)
            if space.grid not in part.cache:
                part.cache[space.grid] = space.grid.weights(part.centroids).T.tocsr()
            grad[N_POLY:] = part.cache[space.grid] @ dz
    return Evaluation(sol.compliance, grad, sol, zt, part)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


@dataclass
class OptimizationConfig:
    load: str = "uniform"
    nx: int = 100
    ny: int = 50
    h: float = 0.1
    fraction: float = 0.3
    vbar: float = 0.3
    variable: bool = False
    grid: tuple = (11, 6)
    zones: int = 200
    max_iter: int = 200
    tol: float = 1e-4
    p: int = P_DEFAULT
    constraint_mode: str = "explicit"
    K1: float = 1e4
    K2: float = 1e4
    heaviside_width: float = 1e-3
    move: float = 0.1
    abort_after_infeasible: int = 20
    snapshot_every: int = 0
    out_dir: str | None = None

    def problem(self) -> MacroProblem:
        if self.load == "uniform":
            return MacroProblem.uniform(nx=self.nx, ny=self.ny)
        return MacroProblem.point(nx=self.nx, ny=self.ny)

    def space(self) -> DesignSpace:
        pb = self.problem()
        grid = FractionGrid(*self.grid, bounds=((0.0, pb.width), (0.0, pb.height))) if self.variable else None
        return DesignSpace(pb, fraction=self.fraction, grid=grid)


@dataclass
class OptimizationReport:
    config: dict
    history: list = field(default_factory=list)
    design: list = field(default_factory=list)
    initial_compliance: float = float("nan")
    final_compliance: float = float("nan")
    g1: float = float("nan")
    g2: float = float("nan")
    volume_fraction: float = float("nan")
    converged: bool = False
    iterations: int = 0
    wall_time_s: float = 0.0
    version: str = __version__

    def to_json(self, timing=True) -> str:
        doc = asdict(self)
        if not timing:
            doc.pop("wall_time_s")
            for row in doc["history"]:
                row.pop("time_s", None)
        return json.dumps(doc, indent=1, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @property
    def compliance_history(self):
        return np.array([r["compliance"] for r in self.history])


def load_report(path) -> OptimizationReport:
    doc = json.loads(Path(path).read_text())
    doc.pop("version", None)
    return OptimizationReport(**doc)


def config_from_report(report: OptimizationReport) -> OptimizationConfig:
    names = {f.name for f in fields(OptimizationConfig)}
    cfg = {k: v for k, v in report.config.items() if k in names}
    if "grid" in cfg:
        cfg["grid"] = tuple(cfg["grid"])
    return OptimizationConfig(**cfg)


def run_optimization(config: OptimizationConfig, model, callback=None, initial=None) -> OptimizationReport:
    """Outer loop: zone tensors, macro solve, constraints, sensitivities, MMA update."""
    t_start = time.perf_counter()
    space = config.space()
    problem = space.problem
    part = partition_zones(problem, config.zones)
    qpts, qw = quadrature(problem)
    basis_q = jacobian_basis(qpts, space.origin)
    lo, hi = space.lower_upper()
    d = np.asarray(initial if initial is not None else space.initial(config.vbar if config.variable else None), float)
    s = space.to_unit(d)
    scale = hi - lo
    state = MMAState(len(s))
    settings = MMASettings(move=config.move)
    report = OptimizationReport(config=asdict(config))
    c0 = None
    infeasible_run = 0
    prev_s = None
    it = 0
    retries = 0
    while True:
        t0 = time.perf_counter()
        mapping = space.mapping(d)
        try:
            cons = constraint_aggregates(mapping, qpts, qw, config.p, basis_q)
            ev = evaluate(space, d, model, config.zones, partition=part)
        except OrientationError:
            if prev_s is None or retries >= MAX_STEP_HALVINGS:
                raise
            # reject the step: halve it back towards the last accepted iterate
            retries += 1
            s = 0.5 * (s + prev_s)
            d = space.from_unit(s)
            continue
        retries = 0
        vf, dvf = volume_fraction(space, d, with_grad=True)
        comp = ev.compliance
        if c0 is None:
            c0 = comp
            report.initial_compliance = comp
        obj = comp / c0
        dobj = ev.gradient / c0
        fc, dfc = [], []
        if config.constraint_mode == "penalty":
            for g, dg, K in ((cons.g1, cons.dg1, config.K1), (cons.g2, cons.dg2, config.K2)):
                H, dH = smooth_heaviside(g, config.heaviside_width)
                obj += K * H
                dobj[:N_POLY] += K * dH * dg
        else:
            fc += [cons.g1, cons.g2]
            dfc += [np.concatenate([cons.dg1, np.zeros(space.size - N_POLY)]), np.concatenate([cons.dg2, np.zeros(space.size - N_POLY)])]
        if space.variable:
            fc.append((vf - config.vbar) / config.vbar)
            dfc.append(dvf / config.vbar)
        feasible = cons.g1 <= 1e-6 and cons.g2 <= 1e-6 and vf <= config.vbar + 1e-6
        infeasible_run = 0 if feasible else infeasible_run + 1
        row = {
            "iteration": it,
            "compliance": comp,
            "g1": cons.g1,
            "g2": cons.g2,
            "volume_fraction": vf,
            "max_lam2": cons.max_lam2,
            "min_sin": cons.min_sin,
            "out_of_domain_zones": int(np.sum(ev.zones.out_of_domain)) if ev.zones.out_of_domain is not None else 0,
        }
        if config.out_dir and config.snapshot_every and it % config.snapshot_every == 0:
            write_macro_vtk(Path(config.out_dir) / f"macro_{it:04d}.vtk", problem, ev.solution)
        if infeasible_run >= config.abort_after_infeasible:
            report.history.append(row)
            _finish(report, d, cons, vf, comp, it, t_start, False)
            raise OptimizationAbort(f"infeasible for {infeasible_run} consecutive iterations (g1={cons.g1:.3g}, g2={cons.g2:.3g}, Vf={vf:.4f})", report)
        change = np.max(np.abs(s - prev_s)) if prev_s is not None else np.inf
        if it == config.max_iter or (change <= config.tol and feasible):
            row["time_s"] = time.perf_counter() - t0
            report.history.append(row)
            _finish(report, d, cons, vf, comp, it, t_start, change <= config.tol)
            break
        s_new = mma_step(s, obj, dobj * scale, np.array(fc), np.array(dfc).reshape(len(fc), -1) * scale, 0.0, 1.0, state, settings)
        if config.constraint_mode != "penalty":
            s_new = _guarded_step(space, config, s, s_new, max(fc), qpts, qw, basis_q)
        prev_s, s = s, s_new
        d = space.from_unit(s)
        row["time_s"] = time.perf_counter() - t0
        report.history.append(row)
        if callback:
            callback(row)
        it += 1
    return report


def _finish(report, d, cons, vf, comp, it, t_start, converged):
    report.design = [float(v) for v in d]
    report.final_compliance = comp
    report.g1, report.g2, report.volume_fraction = cons.g1, cons.g2, vf
    report.iterations = it
    report.converged = bool(converged)
    report.wall_time_s = time.perf_counter() - t_start


def _guarded_step(space, config, s, s_new, viol, qpts, qw, basis_q):
    """Bisect the step towards ``s`` until no constraint exceeds ``max(viol, 0)``.

    The aggregates are high powers of the stretch, so the convex MMA model can
    overshoot them by orders of magnitude; they cost no macro solve to check.
    """
    bound = max(viol, 0.0)
    for _ in range(MAX_STEP_HALVINGS):
        d = space.from_unit(s_new)
        try:
            cons = constraint_aggregates(space.mapping(d), qpts, qw, config.p, basis_q)
        except OrientationError:
            cons = None
        if cons is not None:
            worst = max(cons.g1, cons.g2)
            if space.variable:
                worst = max(worst, (volume_fraction(space, d) - config.vbar) / config.vbar)
            if worst <= bound:
                return s_new
        s_new = 0.5 * (s + s_new)
    return s
