import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from robustglmm.core import (CovStructure, EstimatorSpec, GroupedDataset, Group,
                             ParameterPoint, assemble_G, assemble_V, cholesky,
                             extract_g_params, mahalanobis_sq, mvn_logpdf, pack,
                             read_dataset_csv, unpack, write_dataset_csv)
from robustglmm.errors import DatasetFormatError, DegenerateCovariance


def random_spd(rng, m, floor=0.1):
    A = rng.standard_normal((m, m))
    return A @ A.T + floor * np.eye(m)


def naive_logpdf(y, mu, V):
    r = y - mu
    return (-0.5 * len(y) * math.log(2 * math.pi) - 0.5 * math.log(np.linalg.det(V))
            - 0.5 * r @ np.linalg.inv(V) @ r)


# --- G and V ---------------------------------------------------------------

def test_assemble_G_diagonal():
    np.testing.assert_array_equal(assemble_G([0.56], "diagonal", 1), [[0.56]])
    np.testing.assert_array_equal(assemble_G([1, 1], "diagonal", 2), np.eye(2))


def test_assemble_G_rejects_nonpositive():
    with pytest.raises(DegenerateCovariance):
        assemble_G([1.0, 0.0], "diagonal")


def test_full_G_round_trip():
    G = np.array([[2.0, 0.6], [0.6, 0.5]])
    g = extract_g_params(G, "full")
    np.testing.assert_allclose(assemble_G(g, "full"), G, rtol=1e-14)


@given(st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_full_G_round_trip_random(q, seed):
    G = random_spd(np.random.default_rng(seed), q)
    np.testing.assert_allclose(assemble_G(extract_g_params(G, "full"), "full"), G,
                               rtol=1e-10, atol=1e-12)


def test_assemble_V_no_random_effect():
    Z = np.ones((6, 1))
    np.testing.assert_array_equal(assemble_V(Z, 0.25, np.zeros((1, 1))), 0.25 * np.eye(6))


def test_assemble_V_random_intercept():
    Z = np.ones((4, 1))
    V = assemble_V(Z, 0.25, [[0.56]])
    np.testing.assert_allclose(V, 0.25 * np.eye(4) + 0.56 * np.ones((4, 4)))


def test_assemble_V_dense_oracle(rng):
    Z = np.column_stack([np.ones(6), rng.standard_normal(6)])
    G = 0.56 * np.eye(2)
    expect = np.empty((6, 6))
    for i in range(6):
        for j in range(6):
            expect[i, j] = sum(Z[i, a] * G[a, b] * Z[j, b] for a in range(2) for b in range(2))
            expect[i, j] += 0.25 * (i == j)
    np.testing.assert_allclose(assemble_V(Z, 0.25, G), expect, rtol=1e-14)


@given(st.integers(1, 6), st.integers(1, 3), st.floats(0.01, 5), st.integers(0, 2**32 - 1))
def test_assemble_V_symmetric_with_floor(m, q, s0, seed):
    rng = np.random.default_rng(seed)
    V = assemble_V(rng.standard_normal((m, q)), s0, random_spd(rng, q, 0.0))
    np.testing.assert_array_equal(V, V.T)
    assert np.linalg.eigvalsh(V).min() >= s0 * (1 - 1e-9)


def test_cholesky_jitter_then_failure():
    # rank-deficient PSD: succeeds once jitter is added
    v = np.array([1.0, 1.0])
    L = cholesky(np.outer(v, v))
    assert np.all(np.isfinite(L))
    with pytest.raises(DegenerateCovariance):
        cholesky(np.array([[1.0, 0.0], [0.0, -1.0]]))


# --- densities -----------------------------------------------------------

def test_mvn_logpdf_known_values():
    assert mvn_logpdf([0.0], [0.0], [[1.0]]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    assert mvn_logpdf([1.0, 0.0], [0.0, 0.0], np.eye(2)) == pytest.approx(
        -math.log(2 * math.pi) - 0.5, abs=1e-14)


def test_mvn_logpdf_naive_oracle(rng):
    V = random_spd(rng, 4)
    y, mu = rng.standard_normal(4), rng.standard_normal(4)
    assert mvn_logpdf(y, mu, V) == pytest.approx(naive_logpdf(y, mu, V), abs=1e-10)


def test_mvn_density_integrates_to_one():
    V = np.array([[1.0, 0.4], [0.4, 0.7]])
    grid = np.linspace(-9, 9, 401)
    h = grid[1] - grid[0]
    total = sum(math.exp(mvn_logpdf([a, b], [0, 0], V)) for a in grid for b in grid) * h * h
    assert total == pytest.approx(1.0, abs=1e-4)


def test_mahalanobis(rng):
    assert mahalanobis_sq([1, 2], [1, 2], np.eye(2)) == 0.0
    x = rng.standard_normal(3)
    assert mahalanobis_sq(x, np.zeros(3), np.eye(3)) == pytest.approx(x @ x, rel=1e-14)
    V = random_spd(rng, 5)
    y = rng.standard_normal(5)
    assert mahalanobis_sq(y, 0 * y, V) == pytest.approx(y @ np.linalg.inv(V) @ y, rel=1e-10)


@given(st.integers(0, 2**32 - 1))
def test_mahalanobis_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    V = random_spd(rng, 4)
    r = rng.standard_normal(4)
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    a = mahalanobis_sq(r, np.zeros(4), V)
    b = mahalanobis_sq(Q @ r, np.zeros(4), Q @ V @ Q.T)
    assert a >= 0
    assert b == pytest.approx(a, rel=1e-9)


# --- types -----------------------------------------------------------------

def test_estimator_spec_validation():
    assert EstimatorSpec.mle().label == "MLE"
    assert EstimatorSpec.mdpde(0.5).label == "MDPDE(alpha=0.5)"
    with pytest.raises(ValueError):
        EstimatorSpec.mdpde(0.0)
    with pytest.raises(ValueError):
        EstimatorSpec("mle", 0.5)


def test_parameter_point_requires_positive_variance():
    with pytest.raises(ValueError):
        ParameterPoint([1.0], 0.0, [1.0])


def test_dataset_is_immutable(lmm_data):
    with pytest.raises(ValueError):
        lmm_data.y[0, 0] = 1.0


def test_from_groups_rejects_mixed_shapes():
    g1 = Group(np.zeros(3), np.zeros((3, 2)), np.zeros((3, 1)))
    g2 = Group(np.zeros(4), np.zeros((4, 2)), np.zeros((4, 1)))
    with pytest.raises(ValueError):
        GroupedDataset.from_groups([g1, g2])


@pytest.mark.parametrize("structure", ["diagonal", "full"])
def test_pack_unpack_round_trip(structure):
    g = [0.3, 0.7] if structure == "diagonal" else [0.1, -0.4, 0.2]
    pt = ParameterPoint([1.0, -2.0], 0.25, g)
    back = unpack(pack(pt, structure), 2, structure)
    np.testing.assert_allclose(back.beta, pt.beta)
    assert back.sigma0_sq == pytest.approx(0.25, rel=1e-15)
    np.testing.assert_allclose(back.g_params, pt.g_params, rtol=1e-15)


# --- CSV -------------------------------------------------------------------

def test_csv_round_trip_exact(tmp_path, lmm_data):
    path = tmp_path / "d.csv"
    write_dataset_csv(lmm_data, path)
    back = read_dataset_csv(path)
    np.testing.assert_array_equal(back.y, lmm_data.y)
    np.testing.assert_array_equal(back.X, lmm_data.X)
    np.testing.assert_array_equal(back.Z, lmm_data.Z)
    path2 = tmp_path / "d2.csv"
    write_dataset_csv(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_csv_rejects_ragged_and_unsorted(tmp_path):
    ragged = tmp_path / "r.csv"
    ragged.write_text("group,y,x1,z1\n0,1,1,1\n0,2,1,1\n1,3,1,1\n")
    with pytest.raises(DatasetFormatError):
        read_dataset_csv(ragged)
    unsorted = tmp_path / "u.csv"
    unsorted.write_text("group,y,x1,z1\n1,1,1,1\n0,2,1,1\n")
    with pytest.raises(DatasetFormatError):
        read_dataset_csv(unsorted)
