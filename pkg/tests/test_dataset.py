import numpy as np
import pytest

from gmcopt.cell import homogenize, plane_stress_matrix
from gmcopt.dataset import (
    COLUMNS,
    CholeskyError,
    SamplingRanges,
    cholesky_lower,
    generate_dataset,
    holdout_split,
    load_dataset,
    L_to_vector,
    sobol_sample,
    vector_to_L,
)
from gmcopt.geometry import MicroCellSpec, det2, geometry_from_jacobian, width_lookup


@pytest.fixture(scope="module")
def small():
    return generate_dataset(12, seed=3, fraction=0.3, resolution=32)


def test_samples_stay_in_range():
    r = SamplingRanges()
    pts = sobol_sample(r, 256, seed=1, with_zeta=True)
    assert pts[:, 0].min() >= 1 / 3 and pts[:, 0].max() <= 3
    assert pts[:, 1].min() >= 0 and pts[:, 1].max() < 2 * np.pi
    assert pts[:, 2].min() >= np.pi / 4 and pts[:, 2].max() <= 3 * np.pi / 4
    assert pts[:, 3].min() >= 0.05 and pts[:, 3].max() <= 0.55
    # log-uniform stretch: about half the samples below 1
    assert abs(np.mean(pts[:, 0] < 1) - 0.5) < 0.05


def test_sampling_is_seeded():
    r = SamplingRanges()
    assert np.array_equal(sobol_sample(r, 20, 4), sobol_sample(r, 20, 4))
    assert not np.array_equal(sobol_sample(r, 20, 4), sobol_sample(r, 20, 5))


def test_bad_ranges():
    with pytest.raises(ValueError):
        SamplingRanges(lam_max=0.5)
    with pytest.raises(ValueError):
        SamplingRanges(theta_min=2.0)


def test_cholesky_matches_numpy_and_reports_pivot():
    C = plane_stress_matrix(1.0, 0.3)
    assert np.allclose(cholesky_lower(C), np.linalg.cholesky(C))
    with pytest.raises(CholeskyError) as e:
        cholesky_lower(np.diag([1.0, 1.0, -2.0]))
    assert e.value.pivot == 2


def test_L_vector_round_trip():
    L = np.tril(np.arange(1.0, 10.0).reshape(3, 3))
    assert np.array_equal(vector_to_L(L_to_vector(L)), L)


def test_records_are_consistent(small):
    assert len(small) == 12
    assert small.table.shape[1] == len(COLUMNS)
    assert small.inputs.shape == (12, 4)
    for row in small.table:
        lam, th1, th2, zeta, r = row[:5]
        Jp = row[5:9].reshape(2, 2)
        assert abs(det2(Jp) - 1) < 1e-12
        assert np.isclose(geometry_from_jacobian(Jp)[0], lam**2, rtol=1e-9)
        L = vector_to_L(row[9:15])
        assert np.all(np.diag(L) > 0)
    # a single record reproduces a direct solve
    Jp = small.table[0, 5:9].reshape(2, 2)
    C = homogenize(MicroCellSpec(0.3, float(width_lookup(0.3))), Jp, r=32).C
    L = vector_to_L(small.targets[0])
    assert np.allclose(L @ L.T, C, rtol=1e-10, atol=1e-12)


def test_csv_round_trip_and_determinism(small, tmp_path):
    p = tmp_path / "d.csv"
    small.save(p)
    back = load_dataset(p)
    assert np.array_equal(back.table, small.table)
    assert back.header == small.header
    again = generate_dataset(12, seed=3, fraction=0.3, resolution=32)
    assert again.to_csv() == small.to_csv()


def test_variable_mode_adds_fraction_input():
    ds = generate_dataset(6, seed=1, fraction="variable", resolution=32)
    assert ds.variable
    assert ds.inputs.shape == (6, 5)
    assert np.array_equal(ds.inputs[:, 4], ds.table[:, 3])
    assert len(set(ds.table[:, 3])) == 6


def test_solid_mode_is_constant():
    ds = generate_dataset(5, seed=0, fraction="solid", resolution=16)
    C = plane_stress_matrix(1.0, 0.3)
    for v in ds.targets:
        L = vector_to_L(v)
        assert np.allclose(L @ L.T, C, atol=1e-12)


def test_holdout_split():
    tr, va = holdout_split(4000, seed=2)
    assert len(va) == 500 and len(tr) == 3500
    assert not set(tr) & set(va)
    tr2, va2 = holdout_split(4000, seed=2)
    assert np.array_equal(va, va2)
