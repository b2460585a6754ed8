"""Homogenized macroscopic elasticity on a structured rectangle, with zoned material tensors.

Every element carries a constant 3x3 Voigt tensor. Because the element stiffness is
linear in that tensor, ``K_e = sum_IK C_IK Q^IK`` with fixed 8x8 matrices ``Q^IK``, and
the same matrices give the per-element energy terms ``S_e^IK = u_e^T Q^IK u_e`` needed
for sensitivities.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from ._sparse import SingularSystemError, SPDSolver
from .geometry import MappingPoly, det2, jacobian_at, jacobian_basis, rescale_unit_det


class MacroError(RuntimeError):
    pass


class InvertedCellError(MacroError):
    def __init__(self, zones):
        super().__init__(f"det J <= 0 at zone(s) {list(zones)[:10]}")
        self.zones = list(zones)


class ConstraintDeficiencyError(MacroError):
    pass


LOAD_CASES = ("uniform", "point")


@dataclass(frozen=True)
class MacroProblem:
    """Cantilever on ``[0, width] x [0, height]``, right edge clamped.

    ``load="uniform"``: downward traction of ``magnitude`` per unit length on the top
    edge. ``load="point"``: downward force ``magnitude`` at the left-edge midpoint,
    spread uniformly over a centred segment of length ``load_span`` (0 puts it on the
    single midpoint node). A finite span keeps the compliance mesh-independent, so
    meshes of different resolution solve the same continuum problem.
    """

    width: float = 2.0
    height: float = 1.0
    nx: int = 100
    ny: int = 50
    load: str = "uniform"
    magnitude: float = 2.0
    E: float = 1.0
    load_span: float = 0.04

    def __post_init__(self):
        if self.load not in LOAD_CASES:
            raise ValueError(f"load must be one of {LOAD_CASES}")
        if self.load == "point" and self.load_span == 0 and self.ny % 2:
            raise ValueError("a nodal point load needs an even number of element rows")
        if not 0 <= self.load_span <= self.height:
            raise ValueError("load_span must lie in [0, height]")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("mesh needs at least one element per direction")

    @classmethod
    def uniform(cls, **kw):
        kw.setdefault("magnitude", 2.0)
        return cls(load="uniform", **kw)

    @classmethod
    def point(cls, **kw):
        kw.setdefault("magnitude", 1.0)
        return cls(load="point", **kw)

    @property
    def dx(self):
        return self.width / self.nx

    @property
    def dy(self):
        return self.height / self.ny

    @property
    def n_elements(self):
        return self.nx * self.ny

    @property
    def n_dofs(self):
        return 2 * (self.nx + 1) * (self.ny + 1)

    @property
    def area(self):
        return self.width * self.height

    def node(self, i, j):
        return i + (self.nx + 1) * j

    @cached_property
    def element_centroids(self):
        ix, iy = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="xy")
        return np.stack([(ix.ravel() + 0.5) * self.dx, (iy.ravel() + 0.5) * self.dy], axis=1)

    @cached_property
    def edof(self):
        ix, iy = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="xy")
        ix, iy = ix.ravel(), iy.ravel()
        n = np.stack([self.node(ix, iy), self.node(ix + 1, iy), self.node(ix + 1, iy + 1), self.node(ix, iy + 1)], axis=1)
        e = np.empty((len(ix), 8), dtype=np.int64)
        e[:, 0::2] = 2 * n
        e[:, 1::2] = 2 * n + 1
        return e

    @cached_property
    def fixed_dofs(self):
        j = np.arange(self.ny + 1)
        n = self.node(self.nx, j)
        return np.sort(np.concatenate([2 * n, 2 * n + 1]))

    @cached_property
    def free_dofs(self):
        mask = np.ones(self.n_dofs, bool)
        mask[self.fixed_dofs] = False
        return np.flatnonzero(mask)

    @cached_property
    def load_vector(self):
        f = np.zeros(self.n_dofs)
        if self.load == "uniform":
            i = np.arange(self.nx + 1)
            w = np.full(self.nx + 1, self.dx)
            w[[0, -1]] *= 0.5
            f[2 * self.node(i, self.ny) + 1] = -self.magnitude * w
        elif self.load_span == 0:
            f[2 * self.node(0, self.ny // 2) + 1] = -self.magnitude
        else:
            c = 0.5 * self.height
            w = segment_load_weights(self.ny, self.dy, c - 0.5 * self.load_span, c + 0.5 * self.load_span)
            f[2 * self.node(0, np.arange(self.ny + 1)) + 1] = -self.magnitude * w
        f[self.fixed_dofs] = 0.0
        return f

    @cached_property
    def Q(self):
        return element_energy_matrices(self.dx, self.dy)

    @cached_property
    def _coo(self):
        e = self.edof
        return np.repeat(e, 8, axis=1).ravel(), np.tile(e, (1, 8)).ravel()


def segment_load_weights(n, h, a, b):
    """Consistent nodal weights (summing to 1) of a unit force spread evenly over [a, b].

    Nodes sit at ``j * h`` for ``j = 0..n``; linear shape functions are integrated exactly.
    """
    w = np.zeros(n + 1)
    for j in range(n):
        s, t = max(a, j * h), min(b, (j + 1) * h)
        if t <= s:
            continue
        m = 0.5 * (s + t) / h - j  # local coordinate of the overlap midpoint
        w[j] += (t - s) * (1 - m)
        w[j + 1] += (t - s) * m
    return w / (b - a)


def element_energy_matrices(dx, dy):
    """``Q[I, K] = int B_I^T B_K`` over a dx-by-dy bilinear element (2x2 Gauss): (3, 3, 8, 8)."""
    from .cell import _ref_gradients, strain_operator

    g = _ref_gradients().copy()
    g[..., 0] *= 2.0 / dx
    g[..., 1] *= 2.0 / dy
    B = strain_operator(g)  # (4 gp, 3, 8)
    w = 0.25 * dx * dy
    return w * np.einsum("gia,gkb->ikab", B, B)


@dataclass(frozen=True)
class ZonePartition:
    """Axis-aligned block partition of the macro mesh into ``nzx * nzy`` zones."""

    nzx: int
    nzy: int
    element_zone: np.ndarray
    centroids: np.ndarray
    # design-independent arrays at the centroids, filled by callers
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_zones(self):
        return self.nzx * self.nzy

    def zone_sizes(self):
        return np.bincount(self.element_zone, minlength=self.n_zones)

    def jacobian_basis(self, origin):
        """dJ/dd at the centroids; design-independent, so computed once per origin."""
        key = ("basis", tuple(origin))
        if key not in self.cache:
            self.cache[key] = jacobian_basis(self.centroids, origin)
        return self.cache[key]


def _zone_grid(problem: MacroProblem, N: int):
    best = None
    aspect = np.log(problem.nx / problem.ny)
    for nzx in range(1, N + 1):
        if N % nzx:
            continue
        nzy = N // nzx
        if nzx > problem.nx or nzy > problem.ny:
            continue
        score = abs(np.log(nzx / nzy) - aspect)
        if best is None or score < best[0] - 1e-12:
            best = (score, nzx, nzy)
    if best is None:
        raise ValueError(f"{N} zones cannot be laid out as blocks on a {problem.nx}x{problem.ny} mesh")
    return best[1], best[2]


def partition_zones(problem: MacroProblem, N: int) -> ZonePartition:
    """Split the mesh into N rectangular blocks with the mesh's aspect ratio.

    Block widths differ by at most one element column (row); the representative point
    of a zone is the centroid of its block.
    """
    if N < 1 or N > problem.n_elements:
        raise ValueError(f"zone count must lie in [1, {problem.n_elements}]")
    nzx, nzy = _zone_grid(problem, N)
    # element column ix belongs to zone column floor(ix * nzx / nx)
    zx = np.floor(np.arange(problem.nx) * nzx / problem.nx + 1e-9).astype(int)
    zy = np.floor(np.arange(problem.ny) * nzy / problem.ny + 1e-9).astype(int)
    ez = (zx[None, :] + nzx * zy[:, None]).ravel()
    cx = np.array([(np.flatnonzero(zx == k).min() + np.flatnonzero(zx == k).max() + 1) * 0.5 * problem.dx for k in range(nzx)])
    cy = np.array([(np.flatnonzero(zy == k).min() + np.flatnonzero(zy == k).max() + 1) * 0.5 * problem.dy for k in range(nzy)])
    cent = np.stack(np.meshgrid(cx, cy, indexing="xy"), axis=-1).reshape(-1, 2)
    return ZonePartition(nzx=nzx, nzy=nzy, element_zone=ez, centroids=cent)


@dataclass(frozen=True, eq=False)
class ZoneTensors:
    """Per-zone Jacobians, cell fractions and homogenized tensors."""

    C: np.ndarray
    J: np.ndarray
    Jp: np.ndarray
    zeta: np.ndarray | None = None
    out_of_domain: np.ndarray | None = None


def evaluate_zone_tensors(partition: ZonePartition, mapping: MappingPoly, model, zeta_field=None, E=None) -> ZoneTensors:
    """Tensor of every zone from the surrogate (or any model with ``tensor``) at its centroid.

    ``zeta_field`` maps points to cell fractions; it is required for variable-cell
    models and ignored otherwise.
    """
    pts = partition.centroids
    J = jacobian_at(pts, mapping)
    bad = np.flatnonzero(~(det2(J) > 0))
    if len(bad):
        raise InvertedCellError(bad)
    Jp = rescale_unit_det(J)
    zeta = None
    if getattr(model, "variable", False):
        if zeta_field is None:
            raise MacroError("variable-cell model needs a fraction field")
        zeta = np.asarray(zeta_field(pts), dtype=float)
    ood = None
    if hasattr(model, "predict"):
        pred = model.predict(Jp, zeta)
        L = pred.L
        ood = pred.out_of_domain
        C = model.E * L @ np.swapaxes(L, -1, -2)
    else:
        C = model.tensor(Jp, zeta)
    if E is not None:
        C = C * (E / getattr(model, "E", 1.0))
    return ZoneTensors(C=C, J=J, Jp=Jp, zeta=zeta, out_of_domain=ood)


@dataclass(frozen=True, eq=False)
class MacroSolution:
    u: np.ndarray
    element_C: np.ndarray
    compliance: float
    energy: float
    S: np.ndarray
    residual: float
    zone_C: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def element_energy(self):
        """Strain energy per element."""
        return 0.5 * np.einsum("eik,eik->e", self.element_C, self.S)


_SOLVERS: dict = {}


def assemble_solve(problem: MacroProblem, C, partition: ZonePartition | None = None, solver: SPDSolver | None = None) -> MacroSolution:
    """Solve the macro problem with per-zone (or per-element) tensors C.

    C is ``(n_zones, 3, 3)`` with a partition, or ``(n_elements, 3, 3)`` without one.
    """
    C = np.asarray(C, dtype=float)
    if partition is not None:
        Ce = C[partition.element_zone]
    else:
        Ce = np.broadcast_to(C, (problem.n_elements, 3, 3)) if C.ndim == 2 else C
    if Ce.shape != (problem.n_elements, 3, 3):
        raise ValueError("tensor array does not match the mesh")
    Ke = np.einsum("eik,ikab->eab", Ce, problem.Q)
    rows, cols = problem._coo
    K = sp.csc_matrix((Ke.ravel(), (rows, cols)), shape=(problem.n_dofs, problem.n_dofs))
    fr = problem.free_dofs
    Kff = K[fr][:, fr]
    f = problem.load_vector
    if solver is None:
        key = (problem.nx, problem.ny, problem.width, problem.height)
        solver = _SOLVERS.setdefault(key, SPDSolver())
    try:
        uf = solver.solve(Kff, f[fr])
    except SingularSystemError as exc:
        raise ConstraintDeficiencyError(str(exc)) from exc
    u = np.zeros(problem.n_dofs)
    u[fr] = uf
    res = float(np.linalg.norm(Kff @ uf - f[fr]) / max(np.linalg.norm(f), 1e-300))
    ue = u[problem.edof]
    S = np.einsum("ea,ikab,eb->eik", ue, problem.Q, ue)
    compliance = float(f @ u)
    energy = 0.5 * float(np.einsum("eik,eik->", Ce, S))
    return MacroSolution(
        u=u,
        element_C=np.ascontiguousarray(Ce),
        compliance=compliance,
        energy=energy,
        S=S,
        residual=res,
        zone_C=C if partition is not None else None,
    )


def zone_energy_terms(solution: MacroSolution, partition: ZonePartition):
    """``S`` summed over each zone's elements: (n_zones, 3, 3)."""
    out = np.zeros((partition.n_zones, 3, 3))
    np.add.at(out, partition.element_zone, solution.S)
    return out


def write_macro_vtk(path, problem: MacroProblem, solution: MacroSolution):
    """Legacy-VTK structured points: nodal displacement, element energy density and tensor invariants."""
    nx, ny = problem.nx, problem.ny
    u = solution.u.reshape(-1, 2)
    area = problem.dx * problem.dy
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nhomogenized macro solution\nASCII\nDATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {nx + 1} {ny + 1} 1\nORIGIN 0 0 0\nSPACING {problem.dx} {problem.dy} 1\n")
        fh.write(f"POINT_DATA {(nx + 1) * (ny + 1)}\nVECTORS displacement double\n")
        np.savetxt(fh, np.column_stack([u, np.zeros(len(u))]), fmt="%.10g")
        fh.write(f"CELL_DATA {nx * ny}\nSCALARS energy_density double 1\nLOOKUP_TABLE default\n")
        np.savetxt(fh, solution.element_energy / area, fmt="%.10g")
        fh.write("SCALARS tensor_trace double 1\nLOOKUP_TABLE default\n")
        np.savetxt(fh, np.trace(solution.element_C, axis1=1, axis2=2), fmt="%.10g")
        fh.write("SCALARS tensor_det double 1\nLOOKUP_TABLE default\n")
        np.savetxt(fh, np.linalg.det(solution.element_C), fmt="%.10g")
