"""Fine-scale verification of graded designs and the invariance checks of the cell model."""
from __future__ import annotations

import resource
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from ._sparse import SPDSolver
from .cell import RHO_VOID, Material, cell_mesh_for, homogenized_moduli, rotate_voigt, rotation_matrix, solve_correctors
from .dataset import SamplingRanges, sobol_sample
from .geometry import CompositeTdf, MicroCellSpec, det2, jacobian_at, jacobian_from_geometry, rasterize_composite, width_lookup
from .macro import MacroProblem

LAYER_THICKNESS = 1.0 / 200.0


class VerificationError(RuntimeError):
    def __init__(self, msg, warnings=()):
        super().__init__(msg)
        self.warnings = list(warnings)


@dataclass(eq=False)
class FineModel:
    """Pixel densities of a graded structure on an ``nx x ny`` grid (``[iy, ix]``)."""

    density: np.ndarray
    bounds: tuple
    rho_void: float = RHO_VOID
    layer_edge: str | None = None
    layer_pixels: int = 0
    indicator: str = "smooth"
    h: float | None = None
    warnings: list = field(default_factory=list)

    @property
    def ny(self):
        return self.density.shape[0]

    @property
    def nx(self):
        return self.density.shape[1]

    def layer_mask(self):
        m = np.zeros(self.density.shape, bool)
        if self.layer_edge == "top":
            m[-self.layer_pixels :, :] = True
        elif self.layer_edge == "left":
            m[:, : self.layer_pixels] = True
        return m

    @property
    def solid_fraction(self):
        """Mean density outside the added loaded-edge layer."""
        return float(self.density[~self.layer_mask()].mean())


def _layer_edge(load):
    return {"uniform": "top", "point": "left"}[load]


def rasterize_gmc(tdf: CompositeTdf, grid=(800, 400), bounds=((0.0, 2.0), (0.0, 1.0)), indicator="smooth", layer: str | None = None, layer_thickness: float = LAYER_THICKNESS, rho_void: float = RHO_VOID) -> FineModel:
    """Rasterize the graded structure; optionally force a solid layer on one edge.

    ``layer`` is ``"top"``, ``"left"`` or None. A connectivity warning is attached when
    the solid phase does not link the clamped right edge to the loaded edge.
    """
    nx, ny = grid
    (x0, x1), (y0, y1) = bounds
    xs = np.linspace(x0, x1, 9)
    ys = np.linspace(y0, y1, 5)
    P = np.stack(np.meshgrid(xs, ys), -1).reshape(-1, 2)
    if np.any(~(det2(jacobian_at(P, tdf.mapping)) > 0)):
        raise VerificationError("mapping is inverted somewhere in the domain")
    dens = rasterize_composite(tdf, bounds, nx, ny, indicator)
    npx = 0
    if layer is not None:
        extent = (y1 - y0) if layer == "top" else (x1 - x0)
        n = ny if layer == "top" else nx
        npx = max(1, int(round(layer_thickness * (y1 - y0) / extent * n)))
    model = FineModel(density=dens, bounds=bounds, rho_void=rho_void, layer_edge=layer, layer_pixels=npx, indicator=indicator, h=tdf.h)
    if layer is not None:
        model.density[model.layer_mask()] = 1.0
    model.warnings.extend(connectivity_warnings(model))
    return model


def connectivity_warnings(model: FineModel):
    """Flood fill over pixels with density >= 0.5 from the clamped right edge."""
    solid = model.density >= 0.5
    lab, _ = ndimage.label(solid)
    support = set(np.unique(lab[:, -1])) - {0}
    if not support:
        return ["no solid pixel on the clamped edge"]
    if model.layer_edge == "top" or model.layer_edge is None:
        target = lab[-1, :]
    else:
        target = lab[:, 0]
    if not (set(np.unique(target)) & support):
        return ["solid phase does not connect the supports to the loaded edge"]
    return []


@dataclass
class FineResult:
    compliance: float
    n_dofs: int
    solve_time_s: float
    peak_memory_mb: float
    warnings: list
    u: np.ndarray | None = None


def fine_compliance(model: FineModel, problem: MacroProblem, material: Material = Material(), keep_field: bool = False) -> FineResult:
    """Compliance of the rasterized structure with ersatz voids on the fine grid."""
    (x0, x1), (y0, y1) = model.bounds
    if not (np.isclose(x1 - x0, problem.width) and np.isclose(y1 - y0, problem.height)):
        raise ValueError("fine model and problem domains differ")
    fp = MacroProblem(width=problem.width, height=problem.height, nx=model.nx, ny=model.ny, load=problem.load, magnitude=problem.magnitude, E=problem.E, load_span=problem.load_span)
    t0 = time.perf_counter()
    rho = model.rho_void + (1.0 - model.rho_void) * model.density.ravel()
    K0 = np.einsum("ik,ikab->ab", material.C * (problem.E / material.E), fp.Q)
    edof = fp.edof.astype(np.int32)
    rows = np.repeat(edof, 8, axis=1).ravel()
    cols = np.tile(edof, (1, 8)).ravel()
    K = sp.csc_matrix(((rho[:, None, None] * K0[None]).ravel(), (rows, cols)), shape=(fp.n_dofs, fp.n_dofs))
    del rows, cols
    fr = fp.free_dofs
    K = K[fr][:, fr]
    f = fp.load_vector
    try:
        uf = SPDSolver().solve(K, f[fr])
    except Exception as exc:
        raise VerificationError(f"fine solve failed: {exc}", model.warnings) from exc
    comp = float(f[fr] @ uf)
    u = None
    if keep_field:
        u = np.zeros(fp.n_dofs)
        u[fr] = uf
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    return FineResult(comp, int(len(fr)), time.perf_counter() - t0, peak, list(model.warnings), u)


def write_fine_vtk(path, model: FineModel, result: FineResult):
    """Legacy-VTK of the fine displacement (if kept) and pixel density."""
    ny, nx = model.density.shape
    (x0, x1), (y0, y1) = model.bounds
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nfine verification\nASCII\nDATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {nx + 1} {ny + 1} 1\nORIGIN {x0} {y0} 0\nSPACING {(x1 - x0) / nx} {(y1 - y0) / ny} 1\n")
        if result.u is not None:
            u = result.u.reshape(-1, 2)
            fh.write(f"POINT_DATA {len(u)}\nVECTORS displacement double\n")
            np.savetxt(fh, np.column_stack([u, np.zeros(len(u))]), fmt="%.8g")
        fh.write(f"CELL_DATA {nx * ny}\nSCALARS density double 1\nLOOKUP_TABLE default\n")
        np.savetxt(fh, model.density.ravel(), fmt="%.6g")


# ---------------------------------------------------------------------------
# invariance suites
# ---------------------------------------------------------------------------

C_ENTRIES = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
C_ENTRY_NAMES = ("C11", "C12", "C13", "C22", "C23", "C33")


def rotational_symmetry_suite(model, direct=None, n: int = 100, fraction: float = 0.3, r: int = 64):
    """Sweep the cell rotation at unit stretch and right angle; compare to rotated direct tensors.

    Targets are the direct tensor at zero rotation carried through the fourth-order
    rotation rule. RMSE per entry is divided by the largest target magnitude of that
    entry over the sweep.
    """
    t0 = time.perf_counter()
    thetas = np.linspace(0.0, np.pi, n, endpoint=False)
    if direct is None:
        mesh = cell_mesh_for(fraction, r)
        I = np.eye(2)
        C0 = homogenized_moduli(mesh, I, solve_correctors(mesh, I)).C
    else:
        C0 = direct(np.eye(2))
    targets = np.array([rotate_voigt(C0, rotation_matrix(t)) for t in thetas])
    J = jacobian_from_geometry(np.ones(n), thetas, np.full(n, np.pi / 2))
    z = fraction if getattr(model, "variable", False) else None
    pred = model.tensor(J, z)
    rmse = {}
    for name, (i, j) in zip(C_ENTRY_NAMES, C_ENTRIES):
        scale = np.max(np.abs(targets[:, i, j]))
        rmse[name] = float(np.sqrt(np.mean((pred[:, i, j] - targets[:, i, j]) ** 2)) / scale)
    ref = np.linalg.norm(C0)
    quarter = float(max(np.linalg.norm(rotate_voigt(targets[k], rotation_matrix(np.pi / 2)) - rotate_voigt(C0, rotation_matrix(thetas[k] + np.pi / 2))) for k in range(n)) / ref)
    return {
        "n": n,
        "fraction": fraction,
        "r": r,
        "rmse": rmse,
        "max_rmse": max(rmse.values()),
        "theta0_rel_error": float(np.linalg.norm(pred[0] - C0) / ref),
        "quarter_turn_error": quarter,
        "direct_C0": C0.tolist(),
        "runtime_s": time.perf_counter() - t0,
    }


def scale_invariance_suite(n: int = 20, alphas=(1.0 / 3.0, 3.0), r: int = 64, seed: int = 11, material: Material = Material()):
    """Tensor and corrector scaling under ``J -> alpha J`` on identical meshes.

    Jacobians are used as built from the sampled geometry, without unit-determinant
    rescaling, so the solver really sees different matrices.
    """
    t0 = time.perf_counter()
    pts = sobol_sample(SamplingRanges(), n, seed=seed, with_zeta=True)
    rows = []
    for lam, th1, th2, z in pts:
        spec = MicroCellSpec(fraction=float(z), width=float(width_lookup(z)))
        from .cell import build_cell_mesh

        mesh = build_cell_mesh(spec, r)
        J = jacobian_from_geometry(lam, th1, th2)
        xi = solve_correctors(mesh, J, material)
        C = homogenized_moduli(mesh, J, xi, material).C
        for a in alphas:
            xa = solve_correctors(mesh, a * J, material)
            Ca = homogenized_moduli(mesh, a * J, xa, material).C
            rows.append(
                {
                    "lam": float(lam),
                    "theta1": float(th1),
                    "theta2": float(th2),
                    "zeta": float(z),
                    "alpha": float(a),
                    "tensor_rel_error": float(np.linalg.norm(Ca - C) / np.linalg.norm(C)),
                    "corrector_rel_error": float(np.max(np.abs(a * xa.chi - xi.chi)) / np.max(np.abs(xi.chi))),
                }
            )
    return {
        "n": n,
        "alphas": list(alphas),
        "r": r,
        "samples": rows,
        "max_tensor_rel_error": max(x["tensor_rel_error"] for x in rows),
        "max_corrector_rel_error": max(x["corrector_rel_error"] for x in rows),
        "runtime_s": time.perf_counter() - t0,
    }


def verify_design(space, design, model, h: float = 0.1, grid=(800, 400), indicator="smooth", zones=None):
    """Homogenized vs fine-mesh compliance for an optimized design."""
    from .optimize import evaluate

    problem = space.problem
    n_zones = zones or problem.n_elements
    ev = evaluate(space, design, model, n_zones, with_grad=False)
    tdf = CompositeTdf(mapping=space.mapping(design), h=h, fraction=space.fraction_field(design) if space.variable else space.fraction)
    fine = rasterize_gmc(tdf, grid, space.bounds_xy, indicator, layer=_layer_edge(problem.load))
    res = fine_compliance(fine, problem)
    dev = abs(ev.compliance - res.compliance) / res.compliance
    return {
        "homogenized_compliance": ev.compliance,
        "zones": n_zones,
        "fine_compliance": res.compliance,
        "relative_deviation": dev,
        "fine_grid": list(grid),
        "h": h,
        "nu": Material().nu,
        "rho_void": fine.rho_void,
        "indicator": indicator,
        "fine_solid_fraction": fine.solid_fraction,
        "fine_dofs": res.n_dofs,
        "fine_solve_time_s": res.solve_time_s,
        "peak_memory_mb": res.peak_memory_mb,
        "warnings": res.warnings,
    }
