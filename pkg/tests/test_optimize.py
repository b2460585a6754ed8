import json

import numpy as np
import pytest

from gmcopt.geometry import MappingPoly, N_POLY, rescale_unit_det
from gmcopt.macro import MacroProblem
from gmcopt.mma import MMAError, MMAState, MMASettings, mma_step
from gmcopt.optimize import (
    DesignSpace,
    FractionGrid,
    InvertedCellError,
    OptimizationConfig,
    constraint_aggregates,
    evaluate,
    load_report,
    quadrature,
    run_optimization,
    unit_det_derivative,
    volume_fraction,
)
from gmcopt.surrogate import dC_dJ, dC_dzeta


class StrainFrameModel:
    """Orthotropic tensor pulled back through J': cheap, smooth, SPD for det J' = 1."""

    E = 1.0

    def __init__(self, variable=False):
        self.variable = variable
        self.D = np.array([[1.0, 0.3, 0.0], [0.3, 0.6, 0.0], [0.0, 0.0, 0.25]])

    def tensor(self, Jp, zeta=None):
        Jp = np.asarray(Jp, dtype=float)
        a, b, c, d = Jp[..., 0, 0], Jp[..., 0, 1], Jp[..., 1, 0], Jp[..., 1, 1]
        T = np.stack(
            [
                np.stack([a * a, c * c, a * c], -1),
                np.stack([b * b, d * d, b * d], -1),
                np.stack([2 * a * b, 2 * c * d, a * d + b * c], -1),
            ],
            -2,
        )
        C = np.swapaxes(T, -1, -2) @ self.D @ T
        if self.variable:
            C = C * (np.asarray(zeta, dtype=float) ** 2)[..., None, None]
        return C

    def dC_dJ(self, Jp, zeta=None):
        return dC_dJ(self, Jp, zeta, 1e-5)

    def dC_dzeta(self, Jp, zeta):
        return dC_dzeta(self, Jp, zeta, 1e-5)


def _space(variable=False, nx=20, ny=10, load="uniform"):
    pb = MacroProblem(load=load, nx=nx, ny=ny)
    grid = FractionGrid(5, 3, bounds=((0, 2), (0, 1))) if variable else None
    return DesignSpace(pb, grid=grid)


# --- MMA --------------------------------------------------------------------------


def _run_mma(f, g, x0, lo, hi, iters=60, move=0.5):
    x = np.asarray(x0, float)
    st = MMAState(len(x))
    for _ in range(iters):
        f0, df0 = f(x)
        fc, dfc = g(x)
        x = mma_step(x, f0, df0, fc, dfc, lo, hi, st, MMASettings(move=move))
    return x


def test_mma_active_bound_constraint():
    x = _run_mma(lambda x: ((x[0] - 2) ** 2, 2 * (x - 2)), lambda x: (np.array([x[0] - 1]), np.array([[1.0]])), [0.0], -5, 5)
    assert x[0] == pytest.approx(1.0, abs=1e-4)


def test_mma_cantilever_benchmark():
    # five-segment cantilever of the original MMA publication: optimum 1.340 at x ~ (6.02, 5.31, 4.49, 3.50, 2.15)
    k = np.array([61.0, 37.0, 19.0, 7.0, 1.0])

    def f(x):
        return 0.0624 * x.sum(), np.full(5, 0.0624)

    def g(x):
        return np.array([np.sum(k / x**3) - 1]), (-3 * k / x**4)[None]

    x = _run_mma(f, g, np.full(5, 5.0), 1.0, 10.0, iters=100)
    assert 0.0624 * x.sum() == pytest.approx(1.340, abs=2e-3)
    assert np.allclose(x, [6.016, 5.309, 4.494, 3.502, 2.153], atol=2e-2)


def test_mma_zero_gradient_is_stationary_and_rejects_nan():
    st = MMAState(3)
    x = np.array([0.2, 0.5, 0.9])
    out = mma_step(x, 0.0, np.zeros(3), np.array([-1.0]), np.zeros((1, 3)), 0.0, 1.0, st)
    assert np.allclose(out, x, atol=1e-9)
    with pytest.raises(MMAError):
        mma_step(x, 0.0, np.array([np.nan, 0, 0]), np.array([-1.0]), np.zeros((1, 3)), 0.0, 1.0, MMAState(3))


# --- fraction grid and design space ------------------------------------------------


def test_fraction_grid_partition_of_unity_and_linear_exactness():
    grid = FractionGrid(11, 6)
    pts = np.random.default_rng(0).uniform([0, 0], [2, 1], (300, 2))
    W = grid.weights(pts)
    assert np.allclose(W.sum(axis=1), 1.0)
    xs, ys = np.meshgrid(np.linspace(0, 2, 11), np.linspace(0, 1, 6), indexing="xy")
    vals = (0.1 + 0.05 * xs + 0.2 * ys).ravel()
    assert np.allclose(grid.field(vals)(pts), 0.1 + 0.05 * pts[:, 0] + 0.2 * pts[:, 1])


def test_design_space_layout():
    sp_ = _space(variable=True)
    d = sp_.initial(0.3)
    assert sp_.size == N_POLY + 15
    assert np.allclose(sp_.mapping(d).a, np.eye(2))
    assert np.all(d[N_POLY:] == 0.3)
    assert np.allclose(sp_.from_unit(sp_.to_unit(d)), d)
    lo, hi = sp_.lower_upper()
    assert lo[0] == -3 and hi[4] == 2 and hi[10] == 1 and lo[-1] == 0.05 and hi[-1] == 0.55


def test_volume_fraction():
    fixed = _space()
    assert volume_fraction(fixed, fixed.initial()) == 0.3
    var = _space(variable=True)
    d = var.initial(0.2)
    vf, g = volume_fraction(var, d, with_grad=True)
    assert vf == pytest.approx(0.2)
    assert g[:N_POLY].sum() == 0 and g[N_POLY:].sum() == pytest.approx(1.0)
    xs, _ = np.meshgrid(np.linspace(0, 2, 5), np.linspace(0, 1, 3), indexing="xy")
    d[N_POLY:] = 0.1 + 0.1 * xs.ravel()
    assert volume_fraction(var, d) == pytest.approx(0.2)


# --- distortion constraints ------------------------------------------------------


def test_aggregates_for_identity_map():
    pb = MacroProblem.uniform()
    pts, w = quadrature(pb)
    cs = constraint_aggregates(MappingPoly.identity(), pts, w, p=16)
    # integrand of the stretch aggregate is 2 on an area of 2
    assert cs.g1 == pytest.approx(4 ** (1 / 16) - 9, rel=1e-12)
    assert cs.g2 == pytest.approx(2 ** (1 / 16) - np.sqrt(2), rel=1e-12)
    assert cs.max_lam2 == pytest.approx(1.0) and cs.min_sin == pytest.approx(1.0)


def test_aggregates_for_uniform_stretch():
    pb = MacroProblem.uniform(nx=20, ny=10)
    pts, w = quadrature(pb)
    s = 1.3
    cs = constraint_aggregates(MappingPoly(a=np.diag([s, 1 / s])), pts, w, p=8)
    lam2 = s**4
    assert cs.g1 == pytest.approx((2 * (lam2**8 + lam2**-8)) ** (1 / 8) - 9, rel=1e-12)
    assert cs.max_lam2 == pytest.approx(lam2)


def test_aggregates_approach_maximum_with_p():
    pb = MacroProblem.uniform(nx=20, ny=10)
    pts, w = quadrature(pb)
    rng = np.random.default_rng(1)
    m = MappingPoly.from_vector(np.r_[1.0, 0.1, -0.2, 1.1, 0.1 * rng.normal(size=14)], origin=[1.0, 0.5])
    gaps = []
    for p in (4, 16, 64, 256):
        cs = constraint_aggregates(m, pts, w, p=p)
        gaps.append(abs(cs.g1 + 9 - cs.max_lam2))
    assert gaps[-1] < 0.02 * cs.max_lam2
    assert gaps[-1] < gaps[0]


def test_aggregate_gradients_match_finite_differences():
    pb = MacroProblem.uniform(nx=20, ny=10)
    pts, w = quadrature(pb)
    rng = np.random.default_rng(2)
    d = np.r_[1.1, 0.2, -0.1, 0.9, 0.05 * rng.normal(size=14)]
    origin = np.array([1.0, 0.5])
    cs = constraint_aggregates(MappingPoly.from_vector(d, origin=origin), pts, w)
    h = 1e-6
    for k in range(N_POLY):
        e = np.zeros(N_POLY)
        e[k] = h
        up = constraint_aggregates(MappingPoly.from_vector(d + e, origin=origin), pts, w)
        dn = constraint_aggregates(MappingPoly.from_vector(d - e, origin=origin), pts, w)
        assert (up.g1 - dn.g1) / (2 * h) == pytest.approx(cs.dg1[k], rel=1e-5, abs=1e-7)
        assert (up.g2 - dn.g2) / (2 * h) == pytest.approx(cs.dg2[k], rel=1e-5, abs=1e-7)


def test_inverted_map_is_reported():
    pb = MacroProblem.uniform(nx=4, ny=2)
    pts, w = quadrature(pb)
    with pytest.raises(InvertedCellError):
        constraint_aggregates(MappingPoly(a=np.diag([1.0, -1.0])), pts, w)


# --- objective and sensitivities ----------------------------------------------------


def test_unit_det_derivative():
    J = np.array([[1.3, 0.4], [-0.2, 0.8]])
    D = unit_det_derivative(J)
    h = 1e-6
    for r in range(2):
        for s in range(2):
            E = np.zeros((2, 2))
            E[r, s] = h
            fd = (rescale_unit_det(J + E) - rescale_unit_det(J - E)) / (2 * h)
            assert np.allclose(D[:, :, r, s], fd, atol=1e-8)


def _fd_gradient_check(space, d, model, idx, zones=8, rel=2e-4):
    ev = evaluate(space, d, model, zones)
    for k in idx:
        h = 1e-5 * max(1.0, abs(d[k]))
        up, dn = d.copy(), d.copy()
        up[k] += h
        dn[k] -= h
        fd = (evaluate(space, up, model, zones, with_grad=False).compliance - evaluate(space, dn, model, zones, with_grad=False).compliance) / (2 * h)
        assert ev.gradient[k] == pytest.approx(fd, rel=rel, abs=1e-6 * abs(ev.compliance))


def test_compliance_gradient_fixed_fraction():
    space = _space()
    rng = np.random.default_rng(3)
    d = space.initial()
    d[:N_POLY] += 0.05 * rng.normal(size=N_POLY)
    _fd_gradient_check(space, d, StrainFrameModel(), range(N_POLY))


def test_compliance_gradient_variable_fraction():
    space = _space(variable=True, load="point")
    rng = np.random.default_rng(4)
    d = space.initial(0.3)
    d[:N_POLY] += 0.05 * rng.normal(size=N_POLY)
    d[N_POLY:] += 0.05 * rng.uniform(-1, 1, space.grid.size)
    _fd_gradient_check(space, d, StrainFrameModel(variable=True), list(range(0, N_POLY, 3)) + list(range(N_POLY, space.size)))


def test_uniform_scaling_of_map_leaves_compliance_unchanged():
    space = _space()
    model = StrainFrameModel()
    base = evaluate(space, space.initial(), model, 8)
    d = space.initial()
    d[[0, 3]] = 2.5
    scaled = evaluate(space, d, model, 8)
    assert scaled.compliance == pytest.approx(base.compliance, rel=1e-12)
    # the gradient along the scaling direction vanishes
    assert abs(scaled.gradient[0] + scaled.gradient[3]) <= 1e-8 * base.compliance


def test_zero_load_gives_zero_compliance():
    space = DesignSpace(MacroProblem.uniform(nx=10, ny=5, magnitude=0.0))
    ev = evaluate(space, space.initial(), StrainFrameModel(), 2)
    assert ev.compliance == 0.0
    assert np.all(ev.gradient == 0.0)


# --- driver ---------------------------------------------------------------------------


def _small_config(**kw):
    base = dict(nx=20, ny=10, zones=8, max_iter=30, p=16)
    base.update(kw)
    return OptimizationConfig(**base)


def test_driver_reduces_compliance_and_stays_feasible(tmp_path):
    cfg = _small_config()
    rep = run_optimization(cfg, StrainFrameModel())
    hist = rep.compliance_history
    assert rep.final_compliance < hist[0]
    assert rep.g1 <= 1e-6 and rep.g2 <= 1e-6
    assert all(r["g1"] <= 1e-6 and r["g2"] <= 1e-6 for r in rep.history)
    assert np.all(hist[11:] <= hist[10:-1] * 1.01)
    rep.save(tmp_path / "r.json")
    back = load_report(tmp_path / "r.json")
    assert back.final_compliance == rep.final_compliance
    again = run_optimization(cfg, StrainFrameModel())
    assert again.to_json(timing=False) == rep.to_json(timing=False)
    assert "wall_time_s" not in json.loads(rep.to_json(timing=False))


def test_driver_variable_fraction_respects_budget():
    cfg = _small_config(variable=True, grid=(5, 3), vbar=0.3, max_iter=25)
    rep = run_optimization(cfg, StrainFrameModel(variable=True))
    assert all(r["volume_fraction"] <= 0.3 + 1e-6 and max(r["g1"], r["g2"]) <= 1e-6 for r in rep.history)
    assert rep.final_compliance < rep.initial_compliance
    d = np.array(rep.design)
    assert np.all(d[N_POLY:] >= 0.05 - 1e-12) and np.all(d[N_POLY:] <= 0.55 + 1e-12)
