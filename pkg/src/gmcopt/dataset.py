"""Training data: Sobol sampling of cell deformations, direct homogenization, Cholesky factors."""
from __future__ import annotations

import io
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from . import __version__
from .cell import DEFAULT_RESOLUTION, RHO_VOID, CellError, Material, build_cell_mesh, cell_mesh_for, homogenize
from .geometry import FRACTION_RANGE, GeometryError, MicroCellSpec, jacobian_from_geometry, rescale_unit_det, width_lookup

log = logging.getLogger(__name__)

L_NAMES = ("L11", "L21", "L31", "L22", "L32", "L33")
L_POSITIONS = ((0, 0), (1, 0), (2, 0), (1, 1), (2, 1), (2, 2))
JP_NAMES = ("Jp11", "Jp12", "Jp21", "Jp22")
COLUMNS = ("lam", "theta1", "theta2", "zeta", "r") + JP_NAMES + L_NAMES


class CholeskyError(ValueError):
    def __init__(self, pivot, value):
        super().__init__(f"matrix not positive definite: pivot {pivot} = {value:.6e}")
        self.pivot = pivot
        self.value = value


class DatasetAbort(RuntimeError):
    """Too many cell solves failed."""


@dataclass(frozen=True)
class SamplingRanges:
    lam_max: float = 3.0
    theta1: tuple = (0.0, 2 * np.pi)
    theta_min: float = np.pi / 4
    zeta: tuple = FRACTION_RANGE

    def __post_init__(self):
        if not self.lam_max > 1:
            raise ValueError("lam_max must exceed 1")
        if not (0 < self.theta_min < np.pi / 2):
            raise ValueError("theta_min must lie in (0, pi/2)")
        if not (self.theta1[0] < self.theta1[1] and self.zeta[0] < self.zeta[1]):
            raise ValueError("ranges must be nonempty and ordered")

    @property
    def lam(self):
        return (1.0 / self.lam_max, self.lam_max)

    @property
    def theta2(self):
        return (self.theta_min, np.pi - self.theta_min)


def sobol_sample(ranges: SamplingRanges, count: int, seed: int = 0, with_zeta: bool = False) -> np.ndarray:
    """Scrambled Sobol points mapped into the ranges; columns (lam, theta1, theta2[, zeta]).

    lam is log-uniform so that lam and 1/lam are covered equally.
    """
    if count < 1:
        raise ValueError("count must be positive")
    d = 4 if with_zeta else 3
    eng = qmc.Sobol(d, scramble=True, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # non power-of-two counts
        u = eng.random(count)
    out = np.empty((count, d))
    lo, hi = np.log(ranges.lam)
    out[:, 0] = np.exp(lo + (hi - lo) * u[:, 0])
    out[:, 1] = ranges.theta1[0] + (ranges.theta1[1] - ranges.theta1[0]) * u[:, 1]
    out[:, 2] = ranges.theta2[0] + (ranges.theta2[1] - ranges.theta2[0]) * u[:, 2]
    if with_zeta:
        out[:, 3] = ranges.zeta[0] + (ranges.zeta[1] - ranges.zeta[0]) * u[:, 3]
    return out


def cholesky_lower(C) -> np.ndarray:
    """Lower Cholesky factor with positive diagonal; reports the failing pivot."""
    C = np.asarray(C, dtype=float)
    n = C.shape[0]
    L = np.zeros_like(C)
    for j in range(n):
        piv = C[j, j] - L[j, :j] @ L[j, :j]
        if not piv > 0:
            raise CholeskyError(j, piv)
        L[j, j] = np.sqrt(piv)
        for i in range(j + 1, n):
            L[i, j] = (C[i, j] - L[i, :j] @ L[j, :j]) / L[j, j]
    return L


def L_to_vector(L):
    L = np.asarray(L)
    return np.stack([L[..., i, j] for i, j in L_POSITIONS], axis=-1)


def vector_to_L(v):
    v = np.asarray(v, dtype=float)
    L = np.zeros(v.shape[:-1] + (3, 3))
    for k, (i, j) in enumerate(L_POSITIONS):
        L[..., i, j] = v[..., k]
    return L


@dataclass(frozen=True)
class SampleRecord:
    Jp: np.ndarray
    L: np.ndarray
    lam: float
    theta1: float
    theta2: float
    zeta: float
    r: int

    def row(self):
        return [self.lam, self.theta1, self.theta2, self.zeta, self.r, *np.ravel(self.Jp), *L_to_vector(self.L)]


@dataclass
class Dataset:
    """Tabular dataset; ``inputs`` are J' entries (plus zeta in variable mode)."""

    table: np.ndarray
    header: dict = field(default_factory=dict)

    @property
    def variable(self) -> bool:
        return self.header.get("mode") == "variable"

    @property
    def inputs(self) -> np.ndarray:
        jp = self.table[:, 5:9]
        return np.column_stack([jp, self.table[:, 3]]) if self.variable else jp

    @property
    def targets(self) -> np.ndarray:
        return self.table[:, 9:15]

    @property
    def params(self) -> np.ndarray:
        return self.table[:, 0:4]

    def __len__(self):
        return len(self.table)

    def subset(self, idx):
        return Dataset(self.table[np.asarray(idx)], dict(self.header))

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k in sorted(self.header):
            buf.write(f"# {k} = {json.dumps(self.header[k], sort_keys=True)}\n")
        buf.write(",".join(COLUMNS) + "\n")
        for row in self.table:
            buf.write(",".join(format(v, ".17g") for v in row) + "\n")
        return buf.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_csv())


def load_dataset(path) -> Dataset:
    header = {}
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            k, v = line[1:].split("=", 1)
            header[k.strip()] = json.loads(v)
        elif line and not line.startswith("lam"):
            rows.append([float(x) for x in line.split(",")])
    return Dataset(np.array(rows).reshape(-1, len(COLUMNS)), header)


def holdout_split(n: int, n_val: int | None = None, seed: int = 0):
    """Deterministic (train, validation) index split; 1/8 held out by default (500 of 4000)."""
    n_val = round(n / 8) if n_val is None else n_val
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _evaluate(args):
    lam, th1, th2, zeta, r, solid, indicator, material = args
    try:
        J = jacobian_from_geometry(lam, th1, th2)
        Jp = rescale_unit_det(J)
        if solid:
            spec = MicroCellSpec.solid()
            mesh = cell_mesh_for(spec, r, indicator)
        elif zeta is None:
            raise ValueError("no cell fraction")
        else:
            spec = MicroCellSpec(fraction=float(zeta), width=float(width_lookup(zeta)))
            mesh = build_cell_mesh(spec, r, indicator)
        H = homogenize(spec, Jp, material, r=r, indicator=indicator, mesh=mesh)
        L = cholesky_lower(H.C)
    except (CellError, GeometryError, CholeskyError, ArithmeticError) as exc:
        return None, f"{type(exc).__name__}: {exc}"
    return SampleRecord(Jp=Jp, L=L, lam=lam, theta1=th1, theta2=th2, zeta=float(zeta if zeta is not None else 1.0), r=r), None


def generate_dataset(
    count: int,
    seed: int = 0,
    fraction: float | str | None = 0.3,
    resolution: int = DEFAULT_RESOLUTION,
    ranges: SamplingRanges = SamplingRanges(),
    material: Material = Material(),
    indicator: str = "smooth",
    workers: int = 1,
    path=None,
    progress=None,
    max_failure_rate: float = 0.01,
) -> Dataset:
    """Sample deformations, homogenize each cell and store Cholesky factors.

    ``fraction`` is a constant cell fraction, ``"variable"`` to sample it as a fourth
    input, or ``"solid"`` for the all-solid debugging cell. Records come out in sample
    order regardless of ``workers``.
    """
    variable = fraction == "variable"
    solid = fraction == "solid"
    pts = sobol_sample(ranges, count, seed, with_zeta=variable)
    if variable:
        zetas = pts[:, 3]
    else:
        zetas = np.full(count, np.nan if solid else float(fraction))
    jobs = [
        (float(p[0]), float(p[1]), float(p[2]), None if solid else float(z), resolution, solid, indicator, material)
        for p, z in zip(pts, zetas)
    ]
    rows, failures = [], []
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = ex.map(_evaluate, jobs, chunksize=16)
            for i, res in enumerate(results):
                _collect(i, res, rows, failures, progress, count)
    else:
        for i, job in enumerate(jobs):
            _collect(i, _evaluate(job), rows, failures, progress, count)
    if len(failures) > max_failure_rate * count:
        raise DatasetAbort(f"{len(failures)} of {count} cell solves failed; first: {failures[0][1]}")
    header = {
        "mode": "variable" if variable else ("solid" if solid else "fixed"),
        "fraction": None if (variable or solid) else float(fraction),
        "nu": material.nu,
        "E": material.E,
        "rho_void": RHO_VOID,
        "resolution": resolution,
        "indicator": indicator,
        "seed": seed,
        "count": count,
        "ranges": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(ranges).items()},
        "failures": [[i, msg] for i, msg in failures],
        "version": __version__,
    }
    ds = Dataset(np.array(rows).reshape(-1, len(COLUMNS)), header)
    if path is not None:
        ds.save(path)
    return ds


def _collect(i, res, rows, failures, progress, count):
    rec, err = res
    if rec is None:
        log.warning("sample %d failed: %s", i, err)
        failures.append((i, err))
    else:
        rows.append(rec.row())
    if progress is not None:
        progress(i + 1, count, len(failures))
