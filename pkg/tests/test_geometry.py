import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmcopt.geometry import (
    CompositeTdf,
    DegenerateJacobianError,
    FractionRangeError,
    GeometryError,
    JacobianState,
    MappingPoly,
    MicroCellSpec,
    OrientationError,
    SingularGeometryError,
    cell_fraction,
    det2,
    geometry_from_jacobian,
    jacobian_at,
    jacobian_basis,
    jacobian_from_geometry,
    map_point,
    phi_cell,
    phi_composite,
    rasterize_cell,
    rasterize_composite,
    read_pgm,
    rescale_unit_det,
    width_from_volume_fraction,
    width_lookup,
    write_pgm,
)

lams = st.floats(1 / 3, 3)
th1s = st.floats(0, 2 * np.pi, exclude_max=True)
th2s = st.floats(np.pi / 4, 3 * np.pi / 4)


@pytest.fixture(scope="module")
def x30():
    return MicroCellSpec.from_fraction(0.3)


# --- matrix cell -----------------------------------------------------------


def test_centre_and_corners_are_solid(x30):
    assert phi_cell(np.array([0.0, 0.0]), x30) >= 0
    assert phi_cell(np.array([0.5, 0.5]), x30) >= 0
    assert phi_cell(np.array([-0.5, 0.5]), x30) >= 0


def test_edge_midpoint_is_void_and_binary_fraction(x30):
    assert phi_cell(np.array([0.5, 0.0]), x30) < 0
    assert phi_cell(np.array([0.0, -0.5]), x30) < 0
    binary = rasterize_cell(x30, 512, "binary")
    assert abs(binary.mean() - 0.30) <= 0.005


def test_level_set_is_periodic(x30):
    rng = np.random.default_rng(0)
    Y = rng.uniform(-0.5, 0.5, (500, 2))
    base = phi_cell(Y, x30)
    for e in ([1.0, 0.0], [0.0, 1.0], [-2.0, 3.0]):
        assert np.allclose(phi_cell(Y + np.array(e), x30), base, atol=1e-9, rtol=0)


def test_raster_is_symmetric_under_cell_symmetries(x30):
    img = rasterize_cell(x30, 64)
    assert np.allclose(img, img[::-1, :])
    assert np.allclose(img, img[:, ::-1])
    assert np.allclose(img, img.T)


@pytest.mark.parametrize("zeta", [0.05, 0.3, 0.55])
def test_width_reproduces_fraction_on_fine_oracle(zeta):
    t = width_from_volume_fraction(zeta)
    assert abs(cell_fraction(t, 2048) - zeta) <= 1e-3
    assert abs(rasterize_cell(MicroCellSpec(zeta, t), 1024).mean() - zeta) <= 1e-3


def test_width_is_monotone_and_vanishes():
    zs = [0.05, 0.1, 0.2, 0.3, 0.45, 0.55]
    ts = [width_from_volume_fraction(z) for z in zs]
    assert all(a < b for a, b in zip(ts, ts[1:]))
    assert ts[0] < 0.01
    assert width_from_volume_fraction(0.55) > width_from_volume_fraction(0.3)


@pytest.mark.parametrize("bad", [0.0, 0.04, 0.56, 1.0])
def test_width_rejects_out_of_range(bad):
    with pytest.raises(FractionRangeError):
        width_from_volume_fraction(bad)


def test_width_table_matches_root_find():
    zs = np.array([0.05, 0.17, 0.3, 0.42, 0.55])
    exact = np.array([width_from_volume_fraction(z) for z in zs])
    assert np.allclose(width_lookup(zs), exact, rtol=2e-4)


def test_smooth_raster_converges_faster_than_binary(x30):
    smooth = [abs(rasterize_cell(x30, n).mean() - 0.3) for n in (64, 128)]
    binary = [abs(rasterize_cell(x30, n, "binary").mean() - 0.3) for n in (64, 128)]
    assert max(smooth) < 0.005
    assert smooth[0] < binary[0]


def test_all_solid_member():
    s = MicroCellSpec.solid()
    assert rasterize_cell(s, 32).min() == 1.0
    assert np.all(phi_cell(np.zeros((3, 2)), s) > 0)


# --- mapping polynomial ----------------------------------------------------


def test_identity_map():
    p = MappingPoly.identity()
    assert np.allclose(map_point(np.array([0.7, 0.2]), p), [0.7, 0.2])
    assert np.allclose(map_point(np.zeros(2), p), 0.0)
    assert np.allclose(jacobian_at(np.random.default_rng(1).uniform(size=(5, 2)), p), np.eye(2))


def test_quadratic_substitution():
    b = np.zeros((2, 2, 2))
    b[0, 0, 0] = 2.0
    p = MappingPoly(a=np.eye(2), b=b)
    assert np.allclose(map_point(np.array([1.0, 0.0]), p), [2.0, 0.0])


def test_mixed_coefficient_jacobian():
    b = np.zeros((2, 2, 2))
    b[0, 0, 1] = b[0, 1, 0] = 1.0
    p = MappingPoly(a=np.eye(2), b=b)
    J = jacobian_at(np.array([0.0, 1.0]), p)
    assert J[0, 0] == pytest.approx(2.0)
    h = 1e-5
    x = np.array([0.0, 1.0])
    fd = (map_point(x + [h, 0], p) - map_point(x - [h, 0], p)) / (2 * h)
    assert fd[0] == pytest.approx(2.0, rel=1e-8)


def test_symmetry_is_enforced():
    b = np.zeros((2, 2, 2))
    b[0, 0, 1] = 1.0
    with pytest.raises(GeometryError):
        MappingPoly(a=np.eye(2), b=b)
    c = np.zeros((2, 2, 2, 2))
    c[1, 0, 0, 1] = 1.0
    with pytest.raises(GeometryError):
        MappingPoly(a=np.eye(2), c=c)


def test_vector_round_trip_and_symmetry():
    d = np.random.default_rng(2).normal(size=18)
    p = MappingPoly.from_vector(d)
    assert np.allclose(p.to_vector(), d)
    assert np.array_equal(p.b, p.b.transpose(0, 2, 1))
    for perm in [(0, 2, 1, 3), (0, 1, 3, 2), (0, 3, 2, 1), (0, 2, 3, 1), (0, 3, 1, 2)]:
        assert np.array_equal(p.c, p.c.transpose(perm))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_jacobian_matches_finite_difference(seed):
    rng = np.random.default_rng(seed)
    p = MappingPoly.from_vector(rng.normal(size=18), origin=rng.uniform(-1, 1, 2))
    x = rng.uniform(-1, 1, 2)
    h = 1e-5
    J = jacobian_at(x, p)
    fd = np.stack([(map_point(x + h * e, p) - map_point(x - h * e, p)) / (2 * h) for e in np.eye(2)], axis=1)
    assert np.linalg.norm(fd - J) <= 1e-6 * max(np.linalg.norm(J), 1.0)


def test_jacobian_basis_is_linear_decomposition():
    rng = np.random.default_rng(3)
    d = rng.normal(size=18)
    x = rng.uniform(0, 2, (7, 2))
    origin = np.array([1.0, 0.5])
    B = jacobian_basis(x, origin)
    assert B.shape == (7, 2, 2, 18)
    assert np.allclose(B @ d, jacobian_at(x, MappingPoly.from_vector(d, origin=origin)))


# --- Jacobian geometry -----------------------------------------------------


def test_geometry_examples():
    assert np.allclose(jacobian_from_geometry(1, 0, np.pi / 2), np.eye(2))
    assert np.allclose(jacobian_from_geometry(1, np.pi / 2, np.pi / 2), [[0, 1], [-1, 0]], atol=1e-15)
    J = jacobian_from_geometry(2, 0, np.pi / 2)
    assert np.allclose(J, [[1, 0], [0, 0.5]], atol=1e-15)
    assert det2(J) == pytest.approx(0.5)


@pytest.mark.parametrize("th2", [0.0, np.pi])
def test_singular_angle(th2):
    with pytest.raises(SingularGeometryError):
        jacobian_from_geometry(1.0, 0.3, th2)


def test_rescale_examples():
    assert np.allclose(rescale_unit_det(2 * np.eye(2)), np.eye(2))
    assert np.allclose(rescale_unit_det(np.array([[1, 0], [0, 0.5]])), [[np.sqrt(2), 0], [0, np.sqrt(2) / 2]])
    for bad in (np.array([[1.0, 0], [0, -1]]), np.zeros((2, 2))):
        with pytest.raises(OrientationError):
            rescale_unit_det(bad)


def test_geometry_from_jacobian_examples():
    assert np.allclose(geometry_from_jacobian(np.eye(2)), (1, 1))
    assert np.allclose(geometry_from_jacobian(np.array([[0.0, 1], [-1, 0]])), (1, 1))
    assert np.allclose(geometry_from_jacobian(np.array([[1, 0], [0, 0.5]])), (4, 1))
    with pytest.raises(DegenerateJacobianError):
        geometry_from_jacobian(np.array([[1.0, 0], [0, 0]]))


@settings(max_examples=100, deadline=None)
@given(lams, th1s, th2s)
def test_geometry_round_trip(lam, th1, th2):
    J = jacobian_from_geometry(lam, th1, th2)
    l2, s = geometry_from_jacobian(J)
    assert l2 == pytest.approx(lam**2, rel=1e-9)
    assert s == pytest.approx(np.sin(th2), abs=1e-9)
    assert det2(J) == pytest.approx(1 / (lam * np.sin(th2)), rel=1e-12)
    Jp = rescale_unit_det(J)
    assert abs(det2(Jp) - 1) <= 1e-12
    assert np.allclose(rescale_unit_det(Jp), Jp, rtol=0, atol=1e-14)
    assert np.allclose(geometry_from_jacobian(Jp), (l2, s), rtol=1e-9)


def test_jacobian_state():
    s = JacobianState.from_geometry(1.5, 0.4, 1.2)
    assert abs(det2(s.Jp) - 1) < 1e-12
    assert s.sin_theta2 == pytest.approx(np.sin(1.2))
    m = JacobianState.from_matrix(s.J)
    assert m.lam == pytest.approx(1.5)


# --- composite level set ---------------------------------------------------


def test_composite_reduces_to_cell(x30):
    tdf = CompositeTdf(MappingPoly.identity(), h=1.0, fraction=0.3)
    Y = np.random.default_rng(4).uniform(-0.5, 0.5, (200, 2))
    assert np.allclose(phi_composite(Y, tdf), phi_cell(Y, x30))


def test_large_offset_voids_everything():
    tdf = CompositeTdf(MappingPoly.identity(), h=1.0, offset=10.0)
    img = rasterize_composite(tdf, ((0, 1), (0, 1)), 40, 40, "binary")
    assert img.max() == 0.0
    assert rasterize_composite(tdf, ((0, 1), (0, 1)), 40, 40).max() == 0.0


def test_composite_period_matches_cell_size():
    tdf = CompositeTdf(MappingPoly.identity(), h=0.1)
    img = rasterize_composite(tdf, ((0.0, 0.4), (0.0, 0.3)), 160, 120, "binary")
    # 0.1 in x is 40 pixels
    assert np.array_equal(img[:, :40], img[:, 40:80])
    assert np.array_equal(img[:40, :], img[40:80, :])


def test_pgm_round_trip(tmp_path):
    img = (np.random.default_rng(5).uniform(size=(7, 11)) > 0.5).astype(float)
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    assert np.array_equal(back == 255, img == 1)
