"""Topology description functions, polynomial mappings and cell-deformation Jacobians.

The matrix cell is the "X" lattice cell on the unit square ``[-1/2, 1/2]^2``: two straight
bars along the cell diagonals, each described by a superellipse level set in bar-aligned
coordinates (the moving-morphable-component convention), combined by a pointwise maximum.
The level set is evaluated over the 3x3 block of periodic images, so bars of neighbouring
cells overlap at the shared corners and the field is exactly 1-periodic.

Shapes follow one convention throughout: points are ``(..., 2)`` arrays, Jacobians are
``(..., 2, 2)`` arrays with ``J[..., i, j] = dy_i/dx_j``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Union

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

BAR_EXPONENT = 6
# Half length of one bar: two cell half-diagonals, so collinear bars of diagonally
# adjacent cells overlap fully across the shared corner.
BAR_HALF_LENGTH = np.sqrt(2.0)
FRACTION_RANGE = (0.05, 0.55)

_SQ2 = np.sqrt(0.5)
_BAR_DIRS = np.array([[_SQ2, _SQ2], [_SQ2, -_SQ2]])
_BAR_NORMALS = np.array([[-_SQ2, _SQ2], [_SQ2, _SQ2]])


class GeometryError(ValueError):
    """Base class for invalid geometric input."""


class FractionRangeError(GeometryError):
    pass


class SingularGeometryError(GeometryError):
    pass


class OrientationError(GeometryError):
    """Cell mapping is inverted or collapsed (det J <= 0)."""


class DegenerateJacobianError(GeometryError):
    pass


# ---------------------------------------------------------------------------
# matrix cell
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MicroCellSpec:
    """One member of the X-cell family.

    ``width`` is the bar half-width in cell units; ``fraction`` the solid fraction it
    was derived from. ``all_solid`` is a debugging member that fills the whole cell.
    """

    fraction: float
    width: float
    family: str = "X-cell"
    all_solid: bool = False

    @classmethod
    def from_fraction(cls, fraction: float) -> "MicroCellSpec":
        return cls(fraction=float(fraction), width=width_from_volume_fraction(fraction))

    @classmethod
    def solid(cls) -> "MicroCellSpec":
        return cls(fraction=1.0, width=np.inf, all_solid=True)


def _bar_terms(Y):
    """Bar-local coordinates of every periodic bar image at points Y.

    Returns ``(u, v, taper, dtaper, bar_index)``; the first four are stacked over the
    18 images (3x3 cell images times two diagonals) along axis 0.
    """
    Y = np.asarray(Y, dtype=float)
    Yw = Y - np.round(Y)
    us, vs, ks = [], [], []
    for cx in (-1.0, 0.0, 1.0):
        for cy in (-1.0, 0.0, 1.0):
            dx = Yw[..., 0] - cx
            dy = Yw[..., 1] - cy
            for k in range(2):
                us.append(dx * _BAR_DIRS[k, 0] + dy * _BAR_DIRS[k, 1])
                vs.append(dx * _BAR_NORMALS[k, 0] + dy * _BAR_NORMALS[k, 1])
                ks.append(k)
    u = np.stack(us)
    v = np.stack(vs)
    ks = np.array(ks)
    rho = 1.0 - (u / BAR_HALF_LENGTH) ** BAR_EXPONENT
    inside = rho > 0
    rc = np.where(inside, rho, 1.0)
    taper = np.where(inside, rc ** (1.0 / BAR_EXPONENT), 0.0)
    # d taper / du
    dtaper = np.where(inside, -(u**5) / BAR_HALF_LENGTH**6 * rc ** (1.0 / BAR_EXPONENT - 1.0), 0.0)
    return u, v, taper, dtaper, ks


def _x_cell(Y, width, with_grad=False, terms=None, level=False):
    """X-cell field at Y.

    Without ``with_grad``: the superellipse level set ``max_k 1 - (u/l)^6 - (v/t)^6``.
    With ``with_grad``: the bar-normal signed distance ``max_k t*taper_k(u) - |v_k|``
    and its gradient. Both fields share the same zero level set (the solid boundary);
    the distance form is what pixel coverage needs. ``level=True`` returns the
    superellipse value and its gradient instead.
    """
    u, v, taper, dtaper, ks = _bar_terms(Y) if terms is None else terms
    t = np.asarray(width, dtype=float)
    if not with_grad or level:
        phi = 1.0 - (u / BAR_HALF_LENGTH) ** BAR_EXPONENT - (v / t) ** BAR_EXPONENT
        if not with_grad:
            return phi.max(axis=0)
        k = np.argmax(phi, axis=0)
        val = np.take_along_axis(phi, k[None], axis=0)[0]
        uk = np.take_along_axis(u, k[None], axis=0)[0]
        vk = np.take_along_axis(v, k[None], axis=0)[0]
        kk = ks[k]
        du = -BAR_EXPONENT * uk**5 / BAR_HALF_LENGTH**6
        dv = -BAR_EXPONENT * vk**5 / t**6
        grad = du[..., None] * _BAR_DIRS[kk] + dv[..., None] * _BAR_NORMALS[kk]
        return val, grad
    d = t * taper - np.abs(v)
    k = np.argmax(d, axis=0)
    dist = np.take_along_axis(d, k[None], axis=0)[0]
    kk = ks[k]
    vk = np.take_along_axis(v, k[None], axis=0)[0]
    dtk = np.take_along_axis(dtaper, k[None], axis=0)[0]
    grad = (t * dtk)[..., None] * _BAR_DIRS[kk] - np.sign(vk)[..., None] * _BAR_NORMALS[kk]
    return dist, grad


def phi_cell(Y, spec: MicroCellSpec):
    """Matrix-cell level set: >= 0 on the solid X, < 0 in the void. Periodic in Y."""
    Y = np.asarray(Y, dtype=float)
    if spec.all_solid:
        return np.ones(Y.shape[:-1])
    return _x_cell(Y, spec.width)


def coverage(phi, grad, dx, dy):
    """Anti-aliased solid fraction of a dx-by-dy pixel from the level set at its centre.

    The level set is linearised to a signed distance ``phi/|grad|``; the coverage of a
    straight edge crossing the pixel is then ramped over the pixel's extent normal to
    the edge. Unbiased for straight interfaces, smooth in the level-set parameters.
    """
    gx = np.abs(grad[..., 0])
    gy = np.abs(grad[..., 1])
    gn = np.hypot(gx, gy)
    with np.errstate(divide="ignore", invalid="ignore"):
        ramp = 0.5 + phi / (gx * dx + gy * dy)
    ramp = np.where(gn > 0, ramp, np.where(phi >= 0, 1.0, 0.0))
    return np.clip(ramp, 0.0, 1.0)


def _pixel_centres(n, lo=-0.5, hi=0.5):
    return lo + (np.arange(n) + 0.5) * (hi - lo) / n


def rasterize_cell(spec: MicroCellSpec, n: int, indicator: str = "smooth") -> np.ndarray:
    """Rasterise the matrix cell on an n-by-n pixel grid; array indexed ``[iy, ix]``."""
    c = _pixel_centres(n)
    Y = np.stack(np.meshgrid(c, c, indexing="xy"), axis=-1)
    if spec.all_solid:
        return np.ones((n, n))
    if indicator == "binary":
        return (_x_cell(Y, spec.width) >= 0).astype(float)
    if indicator != "smooth":
        raise ValueError(f"unknown indicator {indicator!r}")
    phi, g = _x_cell(Y, spec.width, with_grad=True)
    return coverage(phi, g, 1.0 / n, 1.0 / n)


@lru_cache(maxsize=4)
def _quadrant_terms(n):
    m = n // 2
    c = _pixel_centres(m, 0.0, 0.5)
    Y = np.stack(np.meshgrid(c, c, indexing="xy"), axis=-1)
    return _bar_terms(Y)


def cell_fraction(width: float, n: int = 512) -> float:
    """Solid fraction of the X cell of half-width ``width`` (anti-aliased n^2 raster).

    Uses the cell's four-fold symmetry: only the quadrant ``[0, 1/2]^2`` is sampled,
    at the pixel size of a full ``n x n`` raster.
    """
    phi, g = _x_cell(None, width, with_grad=True, terms=_quadrant_terms(n))
    return float(coverage(phi, g, 1.0 / n, 1.0 / n).mean())


def width_from_volume_fraction(fraction: float, resolution: int = 512) -> float:
    """Bar half-width reproducing the solid fraction ``fraction`` (bracketed root find)."""
    lo, hi = FRACTION_RANGE
    if not (lo <= fraction <= hi):
        raise FractionRangeError(f"volume fraction {fraction} outside [{lo}, {hi}]")
    return _width_cached(round(float(fraction), 15), resolution)


@lru_cache(maxsize=256)
def _width_cached(fraction, resolution):
    return brentq(lambda t: cell_fraction(t, resolution) - fraction, 1e-4, 0.25, xtol=1e-12)


@lru_cache(maxsize=1)
def _width_table():
    ts = np.geomspace(2e-3, 0.16, 96)
    fr = np.array([cell_fraction(t, 512) for t in ts])
    return PchipInterpolator(fr, ts, extrapolate=False), (fr[0], fr[-1])


def width_lookup(fraction):
    """Vectorised half-width for fractions; table-based, within ~1e-5 of the root find.

    Fractions outside the tabulated span ``(~0.01, ~0.78)`` raise; the design range
    (0.05 to 0.55) is well inside it.
    """
    interp, (fmin, fmax) = _width_table()
    z = np.asarray(fraction, dtype=float)
    if np.any(z < fmin) or np.any(z > fmax):
        raise FractionRangeError(f"fraction outside tabulated span [{fmin:.4f}, {fmax:.4f}]")
    return interp(z)


# ---------------------------------------------------------------------------
# Jacobians and cell geometry
# ---------------------------------------------------------------------------


def det2(J):
    J = np.asarray(J, dtype=float)
    return J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]


def jacobian_from_geometry(lam, theta1, theta2):
    """Jacobian of the parallelogram cell with edge ratio lam, rotation theta1, angle theta2."""
    lam = np.asarray(lam, dtype=float)
    theta1 = np.asarray(theta1, dtype=float)
    theta2 = np.asarray(theta2, dtype=float)
    s2 = np.sin(theta2)
    if np.any(np.abs(s2) < 1e-12):
        raise SingularGeometryError("interior angle theta2 must lie strictly inside (0, pi)")
    if np.any(lam <= 0):
        raise GeometryError("edge ratio lam must be positive")
    scale = 1.0 / (lam * s2)
    J = np.empty(np.broadcast(lam, theta1, theta2).shape + (2, 2))
    J[..., 0, 0] = lam * np.sin(theta1 + theta2)
    J[..., 0, 1] = -lam * np.cos(theta1 + theta2)
    J[..., 1, 0] = -np.sin(theta1)
    J[..., 1, 1] = np.cos(theta1)
    return J * scale[..., None, None]


def rescale_unit_det(J):
    """Scale J to unit determinant: ``J' = det(J)^(-1/2) J``."""
    J = np.asarray(J, dtype=float)
    d = det2(J)
    if np.any(~(d > 0)):
        raise OrientationError("det J must be positive (cell inverted or collapsed)")
    return J / np.sqrt(d)[..., None, None]


def geometry_from_jacobian(J):
    """Return ``(lam^2, sin(theta2))`` of the cell described by J."""
    J = np.asarray(J, dtype=float)
    r1 = J[..., 0, 0] ** 2 + J[..., 0, 1] ** 2
    r2 = J[..., 1, 0] ** 2 + J[..., 1, 1] ** 2
    if np.any(r1 == 0) or np.any(r2 == 0):
        raise DegenerateJacobianError("Jacobian has a zero row")
    return r1 / r2, det2(J) / np.sqrt(r1 * r2)


@dataclass(frozen=True)
class JacobianState:
    """A cell-deformation Jacobian, its unit-determinant reduction and geometric description."""

    J: np.ndarray
    Jp: np.ndarray
    lam: float
    theta1: float | None = None
    theta2: float | None = None

    @classmethod
    def from_geometry(cls, lam, theta1, theta2):
        J = jacobian_from_geometry(lam, theta1, theta2)
        return cls(J=J, Jp=rescale_unit_det(J), lam=float(lam), theta1=float(theta1), theta2=float(theta2))

    @classmethod
    def from_matrix(cls, J):
        J = np.asarray(J, dtype=float)
        lam2, _ = geometry_from_jacobian(J)
        return cls(J=J, Jp=rescale_unit_det(J), lam=float(np.sqrt(lam2)))

    @property
    def sin_theta2(self):
        return float(geometry_from_jacobian(self.J)[1])


# ---------------------------------------------------------------------------
# polynomial mapping
# ---------------------------------------------------------------------------

B_INDEX = [(0, 0), (0, 1), (1, 1)]
C_INDEX = [(0, 0, 0), (0, 0, 1), (0, 1, 1), (1, 1, 1)]
N_POLY = 4 + 2 * len(B_INDEX) + 2 * len(C_INDEX)


def _perms(idx):
    from itertools import permutations

    return set(permutations(idx))


@dataclass(frozen=True)
class MappingPoly:
    """Cubic polynomial mapping ``y(x)`` with symmetric higher-order coefficients.

    ``origin`` shifts the expansion point, ``bounds`` records the domain
    ``((xmin, xmax), (ymin, ymax))`` the mapping is meant for.
    """

    a: np.ndarray
    b: np.ndarray = field(default_factory=lambda: np.zeros((2, 2, 2)))
    c: np.ndarray = field(default_factory=lambda: np.zeros((2, 2, 2, 2)))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))
    bounds: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float).reshape(2, 2))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(2, 2, 2))
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float).reshape(2, 2, 2, 2))
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(2))
        if not np.array_equal(self.b, self.b.transpose(0, 2, 1)):
            raise GeometryError("b must satisfy b_ijk = b_ikj")
        for perm in [(0, 2, 1, 3), (0, 1, 3, 2), (0, 3, 2, 1)]:
            if not np.array_equal(self.c, self.c.transpose(perm)):
                raise GeometryError("c must be symmetric in its last three indices")

    @classmethod
    def identity(cls, scale=1.0, origin=(0.0, 0.0), bounds=None):
        return cls(a=scale * np.eye(2), origin=np.asarray(origin, float), bounds=bounds)

    @classmethod
    def from_vector(cls, d, origin=(0.0, 0.0), bounds=None):
        """Build from the 18 independent coefficients (a row-major, then b, then c)."""
        d = np.asarray(d, dtype=float)
        if d.shape != (N_POLY,):
            raise ValueError(f"expected {N_POLY} coefficients, got {d.shape}")
        a = d[:4].reshape(2, 2)
        b = np.zeros((2, 2, 2))
        c = np.zeros((2, 2, 2, 2))
        k = 4
        for i in range(2):
            for jk in B_INDEX:
                for p in _perms(jk):
                    b[(i,) + p] = d[k]
                k += 1
        for i in range(2):
            for jkl in C_INDEX:
                for p in _perms(jkl):
                    c[(i,) + p] = d[k]
                k += 1
        return cls(a=a, b=b, c=c, origin=np.asarray(origin, float), bounds=bounds)

    def to_vector(self):
        out = list(self.a.ravel())
        out += [self.b[(i,) + jk] for i in range(2) for jk in B_INDEX]
        out += [self.c[(i,) + jkl] for i in range(2) for jkl in C_INDEX]
        return np.array(out)


def map_point(x, poly: MappingPoly):
    """``y_i = a_ij s_j + b_ijk s_j s_k / 2 + c_ijkl s_j s_k s_l / 3`` with ``s = x - origin``."""
    s = np.asarray(x, dtype=float) - poly.origin
    return (
        np.einsum("ij,...j->...i", poly.a, s)
        + 0.5 * np.einsum("ijk,...j,...k->...i", poly.b, s, s)
        + np.einsum("ijkl,...j,...k,...l->...i", poly.c, s, s, s) / 3.0
    )


def jacobian_at(x, poly: MappingPoly):
    """``J_ij = a_ij + b_ijk s_k + c_ijkl s_k s_l``."""
    s = np.asarray(x, dtype=float) - poly.origin
    return (
        poly.a
        + np.einsum("ijk,...k->...ij", poly.b, s)
        + np.einsum("ijkl,...k,...l->...ij", poly.c, s, s)
    )


def jacobian_basis(x, origin=(0.0, 0.0)):
    """dJ/dd for the 18 independent coefficients at points x: shape ``(..., 2, 2, 18)``.

    J is linear in the coefficients, so each column is the Jacobian of the unit vector.
    """
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(N_POLY):
        e = np.zeros(N_POLY)
        e[k] = 1.0
        cols.append(jacobian_at(x, MappingPoly.from_vector(e, origin=origin)))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# composite TDF
# ---------------------------------------------------------------------------

FieldLike = Union[float, Callable[[np.ndarray], np.ndarray]]


def _eval_field(f: FieldLike, x):
    if callable(f):
        return np.asarray(f(x), dtype=float)
    return np.full(np.shape(x)[:-1], float(f))


@dataclass(frozen=True)
class CompositeTdf:
    """Graded configuration ``phi(x) = phi_p(y(x)/h; t(zeta(x))) - offset(x)``.

    ``fraction`` selects the X-cell member (bar width) locally; ``offset`` is a plain
    level-set shift. With a constant fraction and zero offset this is the single-cell
    composition.
    """

    mapping: MappingPoly
    h: float
    fraction: FieldLike = 0.3
    offset: FieldLike = 0.0
    all_solid: bool = False

    def widths(self, x):
        z = _eval_field(self.fraction, x)
        if np.ndim(z) == 0 or np.all(z == z.flat[0]):
            return np.full(np.shape(x)[:-1], width_from_volume_fraction(float(np.ravel(z)[0])))
        return width_lookup(z)


def _phi_composite(x, tdf: CompositeTdf, with_grad=False):
    x = np.asarray(x, dtype=float)
    if tdf.all_solid:
        phi = np.ones(x.shape[:-1]) - _eval_field(tdf.offset, x)
        return (phi, np.zeros(x.shape)) if with_grad else phi
    Y = map_point(x, tdf.mapping) / tdf.h
    t = tdf.widths(x)
    off = _eval_field(tdf.offset, x)
    if not with_grad:
        return _x_cell(Y, t) - off
    # a nonzero offset shifts the superellipse level set, so ramp on that field
    phi, gY = _x_cell(Y, t, with_grad=True, level=bool(np.any(off != 0)))
    J = jacobian_at(x, tdf.mapping)
    gx = np.einsum("...mj,...m->...j", J, gY) / tdf.h
    return phi - off, gx


def phi_composite(x, tdf: CompositeTdf):
    """Level set of the graded configuration at macro points x."""
    return _phi_composite(x, tdf)


def rasterize_composite(tdf: CompositeTdf, bounds, nx: int, ny: int, indicator="smooth", chunk=65536):
    """Pixel densities of the graded configuration over ``bounds``; array ``[iy, ix]``."""
    (x0, x1), (y0, y1) = bounds
    dx = (x1 - x0) / nx
    dy = (y1 - y0) / ny
    xc = x0 + (np.arange(nx) + 0.5) * dx
    yc = y0 + (np.arange(ny) + 0.5) * dy
    X = np.stack(np.meshgrid(xc, yc, indexing="xy"), axis=-1).reshape(-1, 2)
    out = np.empty(len(X))
    for s in range(0, len(X), chunk):
        pts = X[s : s + chunk]
        if indicator == "binary":
            out[s : s + chunk] = (_phi_composite(pts, tdf) >= 0).astype(float)
        elif indicator == "smooth":
            phi, g = _phi_composite(pts, tdf, with_grad=True)
            out[s : s + chunk] = coverage(phi, g, dx, dy)
        else:
            raise ValueError(f"unknown indicator {indicator!r}")
    return out.reshape(ny, nx)


def write_pgm(path, density, threshold=0.5):
    """Binary PGM (P5): solid pixels 255, void 0. Row 0 of the file is the top (max y)."""
    img = np.where(np.asarray(density) >= threshold, 255, 0).astype(np.uint8)[::-1]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = int(parts[1]), int(parts[2])
    img = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return img[::-1]
