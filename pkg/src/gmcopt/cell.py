"""Periodic cell problem for a Jacobian-deformed matrix cell and its homogenized moduli.

The cell is meshed once in the fictitious coordinates Y on ``[-1/2, 1/2]^2`` with an
r-by-r grid of bilinear squares. The macroscopic deformation only enters through the
physical derivative ``d/dx_j = J_mj d/dY_m``, so every element shares one reference
stiffness ``K0(J)`` scaled by its density, and the sparsity pattern never changes.

Voigt order is (xx, yy, xy) with engineering shear strain.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from ._sparse import SingularSystemError, SPDSolver
from .geometry import MicroCellSpec, det2, rasterize_cell, rescale_unit_det

RHO_VOID = 1e-6
DEFAULT_RESOLUTION = 64


class CellError(RuntimeError):
    pass


class DegenerateCellError(CellError):
    """The cell has no solid material."""


class NotPositiveDefiniteError(CellError):
    pass


@dataclass(frozen=True)
class Material:
    """Isotropic plane-stress base material."""

    E: float = 1.0
    nu: float = 0.3

    @property
    def C(self) -> np.ndarray:
        return plane_stress_matrix(self.E, self.nu)


def plane_stress_matrix(E=1.0, nu=0.3):
    f = E / (1.0 - nu**2)
    return np.array([[f, f * nu, 0.0], [f * nu, f, 0.0], [0.0, 0.0, E / (2.0 * (1.0 + nu))]])


# ---------------------------------------------------------------------------
# mesh
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CellMesh:
    """r-by-r periodic grid on the matrix cell with per-element stiffness scaling.

    ``density`` is indexed ``[iy, ix]`` and already includes the ersatz floor, so void
    elements carry ``rho_void``. ``coverage`` is the raw solid fraction per element.
    """

    r: int
    coverage: np.ndarray
    rho_void: float = RHO_VOID
    spec: MicroCellSpec | None = None

    @property
    def density(self) -> np.ndarray:
        return self.rho_void + (1.0 - self.rho_void) * self.coverage

    @property
    def solid_fraction(self) -> float:
        return float(self.coverage.mean())

    @property
    def n_nodes(self) -> int:
        return self.r * self.r

    @classmethod
    def from_mask(cls, mask, rho_void=RHO_VOID):
        """Mesh from an explicit ``[iy, ix]`` coverage array (values in [0, 1])."""
        m = np.asarray(mask, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("mask must be a square 2-D array")
        if not np.any(m > 0):
            raise DegenerateCellError("cell contains no solid material")
        return cls(r=m.shape[0], coverage=m, rho_void=rho_void)


def build_cell_mesh(spec: MicroCellSpec, r: int = DEFAULT_RESOLUTION, indicator: str = "smooth", rho_void: float = RHO_VOID) -> CellMesh:
    """Sample the matrix cell on an r-by-r element grid.

    ``indicator="binary"`` marks an element solid iff the level set at its centroid is
    non-negative; ``"smooth"`` uses the anti-aliased pixel coverage instead.
    """
    if r < 16:
        raise ValueError("cell resolution must be at least 16")
    cov = rasterize_cell(spec, r, indicator)
    if not np.any(cov > 0):
        raise DegenerateCellError("cell contains no solid material")
    return CellMesh(r=r, coverage=cov, rho_void=rho_void, spec=spec)


@lru_cache(maxsize=8)
def _periodic_topology(r):
    """Element-to-DOF table and COO index arrays for the periodic r-by-r grid."""
    ix, iy = np.meshgrid(np.arange(r), np.arange(r), indexing="xy")
    ix = ix.ravel()
    iy = iy.ravel()

    def node(i, j):
        return (i % r) + r * (j % r)

    # counter-clockwise from lower left
    nodes = np.stack([node(ix, iy), node(ix + 1, iy), node(ix + 1, iy + 1), node(ix, iy + 1)], axis=1)
    edof = np.empty((r * r, 8), dtype=np.int64)
    edof[:, 0::2] = 2 * nodes
    edof[:, 1::2] = 2 * nodes + 1
    rows = np.repeat(edof, 8, axis=1).ravel()
    cols = np.tile(edof, (1, 8)).ravel()
    return edof, rows, cols


_GP = np.array([-1.0, 1.0]) / np.sqrt(3.0)
_XI = np.array([-1.0, 1.0, 1.0, -1.0])
_ETA = np.array([-1.0, -1.0, 1.0, 1.0])


@lru_cache(maxsize=1)
def _ref_gradients():
    """dN/d(xi, eta) at the four Gauss points: shape (4, 4, 2)."""
    out = np.empty((4, 4, 2))
    for g, (xi, eta) in enumerate([(a, b) for b in _GP for a in _GP]):
        out[g, :, 0] = 0.25 * _XI * (1 + _ETA * eta)
        out[g, :, 1] = 0.25 * _ETA * (1 + _XI * xi)
    return out


def strain_operator(grad_phys):
    """Voigt strain-displacement matrices from physical shape-function gradients.

    ``grad_phys`` has shape (..., 4 nodes, 2); returns (..., 3, 8).
    """
    gx = grad_phys[..., 0]
    gy = grad_phys[..., 1]
    B = np.zeros(grad_phys.shape[:-2] + (3, 8))
    B[..., 0, 0::2] = gx
    B[..., 1, 1::2] = gy
    B[..., 2, 0::2] = gy
    B[..., 2, 1::2] = gx
    return B


def element_operators(J, C, size):
    """Reference element stiffness and load matrices for a square element of side ``size``.

    Returns ``(K0, F0)`` with ``K0 = int B^T C B`` (8x8) and ``F0 = int B^T C`` (8x3),
    where B uses physical derivatives ``dN/dx_j = J_mj dN/dY_m``.
    """
    J = np.asarray(J, dtype=float)
    dY = _ref_gradients() * (2.0 / size)
    dx = np.einsum("gnm,mj->gnj", dY, J)
    B = strain_operator(dx)
    w = 0.25 * size * size
    K0 = w * np.einsum("gai,ab,gbj->ij", B, C, B)
    F0 = w * np.einsum("gai,ab->ib", B, C)
    return K0, F0


# ---------------------------------------------------------------------------
# correctors and moduli
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CorrectorField:
    """Periodic corrector displacements for the three unit strain loads.

    ``chi[I]`` is the nodal field for Voigt load I, shape ``(r, r, 2)`` indexed
    ``[iy, ix, component]``; each component has zero nodal mean. The xy load is the
    symmetric combination of the 12 and 21 loads, which coincide.
    """

    chi: np.ndarray
    J: np.ndarray
    residual: float

    def load(self, s, t):
        """Corrector for tensor load indices (s, t), 0-based."""
        return self.chi[_voigt_index(s, t)]


def _voigt_index(s, t):
    return s if s == t else 2


_SOLVER = SPDSolver()


def _assemble(mesh: CellMesh, J, C):
    K0, F0 = element_operators(J, C, 1.0 / mesh.r)
    edof, rows, cols = _periodic_topology(mesh.r)
    rho = mesh.density.ravel()
    n = 2 * mesh.n_nodes
    data = (rho[:, None, None] * K0[None]).ravel()
    K = sp.csc_matrix((data, (rows, cols)), shape=(n, n))
    F = np.zeros((n, 3))
    np.add.at(F, edof, rho[:, None, None] * F0[None])
    return K, F, K0, F0, edof


def solve_correctors(mesh: CellMesh, J, material: Material = Material(), solver: SPDSolver | None = None) -> CorrectorField:
    """Solve the periodic cell problem for the three unit strains under Jacobian J.

    J is normally the unit-determinant reduction; any positive-determinant J is
    accepted so that the scaling behaviour can be probed directly.
    Rigid translations are removed by pinning node 0 and then shifting each field to
    zero mean, which gives the same field as a zero-mean multiplier constraint.
    """
    J = np.asarray(J, dtype=float)
    if not det2(J) > 0:
        raise CellError("Jacobian must have positive determinant")
    K, F, *_ = _assemble(mesh, J, material.C)
    Kr = K[2:, 2:]
    Fr = F[2:]
    solver = solver or _SOLVER
    try:
        xr = solver.solve(Kr, Fr)
    except SingularSystemError as exc:
        raise SingularSystemError(f"cell system singular after pinning (r={mesh.r}): {exc}") from exc
    X = np.zeros_like(F)
    X[2:] = xr
    res = np.linalg.norm(Kr @ xr - Fr) / max(np.linalg.norm(Fr), 1e-300)
    chi = X.T.reshape(3, mesh.r, mesh.r, 2)
    chi = chi - chi.mean(axis=(1, 2), keepdims=True)
    return CorrectorField(chi=chi, J=J, residual=float(res))


@dataclass(frozen=True, eq=False)
class HomogenizedTensor:
    """Symmetric 3x3 homogenized stiffness (Voigt, engineering shear)."""

    C: np.ndarray
    asymmetry: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        C = np.asarray(self.C, dtype=float)
        object.__setattr__(self, "C", 0.5 * (C + C.T))

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.C)[0])

    def cholesky(self) -> np.ndarray:
        from .dataset import cholesky_lower

        return cholesky_lower(self.C)


def homogenized_moduli(mesh: CellMesh, J, correctors: CorrectorField, material: Material = Material(), check_pd: bool = True) -> HomogenizedTensor:
    """Effective moduli ``C^H_IK = <rho> C_IK - sum_e rho_e (F0^T chi_e^K)_I``.

    Integration is over the whole cell with the ersatz-scaled density, which equals the
    solid-only integral up to the void floor.
    """
    C = material.C
    K0, F0 = element_operators(np.asarray(J, float), C, 1.0 / mesh.r)
    edof, _, _ = _periodic_topology(mesh.r)
    rho = mesh.density.ravel()
    X = correctors.chi.reshape(3, -1).T  # (ndof, 3)
    Xe = X[edof]  # (ne, 8, 3)
    corr = np.einsum("e,eik,ij->jk", rho, Xe, F0)
    CH = rho.mean() * C - corr
    asym = float(np.linalg.norm(CH - CH.T) / np.linalg.norm(CH))
    out = HomogenizedTensor(C=CH, asymmetry=asym, meta={"r": mesh.r, "rho_void": mesh.rho_void, "nu": material.nu, "E": material.E})
    if check_pd and not out.min_eigenvalue > 0:
        raise NotPositiveDefiniteError(f"homogenized tensor not positive definite (min eigenvalue {out.min_eigenvalue:.3e})")
    return out


@lru_cache(maxsize=16)
def _cached_mesh(fraction, r, indicator, all_solid):
    spec = MicroCellSpec.solid() if all_solid else MicroCellSpec.from_fraction(fraction)
    return build_cell_mesh(spec, r, indicator)


def cell_mesh_for(spec_or_fraction, r=DEFAULT_RESOLUTION, indicator="smooth") -> CellMesh:
    """Cached mesh for a cell member given by its spec or its solid fraction."""
    if isinstance(spec_or_fraction, MicroCellSpec):
        spec = spec_or_fraction
        if spec.all_solid:
            return _cached_mesh(1.0, r, indicator, True)
        if spec.width == MicroCellSpec.from_fraction(spec.fraction).width:
            return _cached_mesh(float(spec.fraction), r, indicator, False)
        return build_cell_mesh(spec, r, indicator)
    return _cached_mesh(float(spec_or_fraction), r, indicator, False)


def homogenize(spec, J, material: Material = Material(), r: int = DEFAULT_RESOLUTION, indicator: str = "smooth", mesh: CellMesh | None = None) -> HomogenizedTensor:
    """Direct evaluation of the homogenized tensor for cell ``spec`` under Jacobian J."""
    Jp = rescale_unit_det(J)
    mesh = mesh or cell_mesh_for(spec, r, indicator)
    xi = solve_correctors(mesh, Jp, material)
    return homogenized_moduli(mesh, Jp, xi, material)


# ---------------------------------------------------------------------------
# tensor utilities
# ---------------------------------------------------------------------------

_PAIRS = [(0, 0), (1, 1), (0, 1)]


def voigt_to_tensor(C):
    C = np.asarray(C, dtype=float)
    T = np.zeros((2, 2, 2, 2))
    for I, (i, j) in enumerate(_PAIRS):
        for K, (k, l) in enumerate(_PAIRS):
            for a, b in {(i, j), (j, i)}:
                for c, d in {(k, l), (l, k)}:
                    T[a, b, c, d] = C[I, K]
    return T


def tensor_to_voigt(T):
    C = np.empty((3, 3))
    for I, (i, j) in enumerate(_PAIRS):
        for K, (k, l) in enumerate(_PAIRS):
            C[I, K] = T[i, j, k, l]
    return C


def rotation_matrix(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotate_voigt(C, Q):
    """Rotate a Voigt stiffness by the orthogonal matrix Q (``C'_ijkl = Q_ia Q_jb Q_kc Q_ld C_abcd``)."""
    T = voigt_to_tensor(C)
    return tensor_to_voigt(np.einsum("ia,jb,kc,ld,abcd->ijkl", Q, Q, Q, Q, T))


def write_corrector_vtk(path, mesh: CellMesh, correctors: CorrectorField):
    """Legacy-VTK structured points with the three corrector fields and element density."""
    r = mesh.r
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\ncell correctors\nASCII\nDATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {r} {r} 1\nORIGIN {-0.5} {-0.5} 0\nSPACING {1.0 / r} {1.0 / r} 1\n")
        fh.write(f"POINT_DATA {r * r}\n")
        for I, name in enumerate(["xx", "yy", "xy"]):
            fh.write(f"VECTORS chi_{name} double\n")
            v = correctors.chi[I].reshape(-1, 2)
            np.savetxt(fh, np.column_stack([v, np.zeros(len(v))]), fmt="%.10g")
        fh.write(f"CELL_DATA {(r - 1) * (r - 1)}\nSCALARS density double 1\nLOOKUP_TABLE default\n")
        np.savetxt(fh, mesh.density[: r - 1, : r - 1].ravel(), fmt="%.10g")
