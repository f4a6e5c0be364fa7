import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustglmm.core import GroupedDataset, ParameterPoint
from robustglmm.diagnostics import (_mc_information, b4_matrix, b5_matrix,
                                    b3_first_violation, check_A3, check_B1, check_B3,
                                    check_B4, check_B5, marginal_covariances,
                                    mdpde_beta_information_closed_form,
                                    mdpde_information_lmm, mle_information_lmm)
from robustglmm.errors import InsufficientDraws, UnsupportedDimension
from robustglmm.experiments import SimConfig, simulate
from robustglmm.lmm import lmm_mle_score_beta

TRUTH = ParameterPoint(np.array([1.0, 2, 4, 3, 3]), 0.25, np.array([0.56, 0.56]))


@pytest.fixture(scope="module")
def data():
    return simulate(SimConfig.lmm_default(), 0, 8)


def _subset(d, idx):
    return GroupedDataset(d.y[idx], d.X[idx], d.Z[idx])


# --- information -------------------------------------------------------------

def test_mle_information_without_random_effects(rng):
    X = rng.standard_normal((6, 4, 3))
    data = GroupedDataset(rng.standard_normal((6, 4)), X, np.zeros((6, 4, 0)))
    info = mle_information_lmm(data, ParameterPoint(np.zeros(3), 0.5, []))
    expect = np.einsum("nji,njk->ik", X, X) / 0.5 / 6
    np.testing.assert_allclose(info[:3, :3], expect, rtol=1e-12)
    np.testing.assert_allclose(info[3, 3], 4 / (2 * 0.25), rtol=1e-12)


@pytest.mark.parametrize("structure", ["diagonal", "full"])
def test_mle_information_beta_block_is_hessian(data, structure):
    g = TRUTH.g_params if structure == "diagonal" else np.array([0.56, 0.1, 0.56])
    pt = ParameterPoint(TRUTH.beta, TRUTH.sigma0_sq, g)
    info = mle_information_lmm(data, pt, structure)
    h = 1e-5
    H = np.empty((5, 5))
    for k in range(5):
        e = np.zeros(5)
        e[k] = h
        up = lmm_mle_score_beta(data, ParameterPoint(pt.beta + e, 0.25, g), structure)
        dn = lmm_mle_score_beta(data, ParameterPoint(pt.beta - e, 0.25, g), structure)
        H[:, k] = (up - dn) / (2 * h)
    np.testing.assert_allclose(info[:5, :5], H, rtol=1e-4)
    assert np.linalg.eigvalsh(info)[0] > 0


def test_mle_information_matches_monte_carlo(data):
    exact = mle_information_lmm(data, TRUTH)
    est = _mc_information(data, TRUTH, None, 4000, 1, "diagonal")
    z = np.abs(est.matrix - exact) / est.se
    assert z.max() < 4.5


def test_information_group_order_invariant(data):
    perm = np.random.default_rng(0).permutation(data.n)
    a = mle_information_lmm(data, TRUTH)
    b = mle_information_lmm(_subset(data, perm), TRUTH)
    np.testing.assert_allclose(a, b, rtol=1e-12)
    ca = mdpde_beta_information_closed_form(data, TRUTH, 0.5)
    cb = mdpde_beta_information_closed_form(_subset(data, perm), TRUTH, 0.5)
    np.testing.assert_allclose(ca, cb, rtol=1e-12)


@pytest.mark.parametrize("alpha", [0.1, 0.5, 1.0])
def test_mdpde_information_beta_block(data, alpha):
    est = mdpde_information_lmm(data, TRUTH, alpha, mc_draws=4000, seed=2)
    bb = est.matrix[:5, :5]
    z = np.abs(bb - est.closed_form_beta) / est.se[:5, :5]
    assert z.max() < 4.5
    # odd in the residual, so the cross block vanishes in expectation
    zc = np.abs(est.matrix[:5, 5:]) / est.se[:5, 5:]
    assert zc.max() < 4.5
    assert est.min_eigenvalue > 0


def test_mdpde_closed_form_small_alpha_direction(data):
    mle = mle_information_lmm(data, TRUTH)[:5, :5]
    errs = []
    for a in (0.1, 0.01, 0.001, 1e-4):
        cf = mdpde_beta_information_closed_form(data, TRUTH, a)
        errs.append(np.linalg.norm(cf - mle) / np.linalg.norm(mle))
    assert errs[0] > errs[1] > errs[2] > errs[3]
    assert errs[3] < 1e-2


def test_information_deterministic(data):
    a = mdpde_information_lmm(data, TRUTH, 0.5, mc_draws=200, seed=9)
    b = mdpde_information_lmm(data, TRUTH, 0.5, mc_draws=200, seed=9)
    assert a.matrix.tobytes() == b.matrix.tobytes()


def test_information_needs_draws(data):
    with pytest.raises(InsufficientDraws):
        mdpde_information_lmm(data, TRUTH, 0.5, mc_draws=1)


def test_check_A3(data):
    assert check_A3(data, TRUTH).holds
    rep = check_A3(data, TRUTH, 0.5, mc_draws=2000)
    assert rep.holds and rep.draws == 2000


# --- B1 ----------------------------------------------------------------------

def test_B1_holds(data):
    rep = check_B1(data, TRUTH)
    assert rep.holds
    assert rep.evidence["rank"] == 5


def test_B1_duplicate_column(data):
    X = data.X.copy()
    X[:, :, 4] = X[:, :, 3]
    rep = check_B1(GroupedDataset(data.y, X, data.Z), TRUTH)
    assert not rep.holds
    assert rep.evidence["rank"] == 4


# --- B3 ----------------------------------------------------------------------

def test_B3_alpha_zero_always_holds(data):
    assert check_B3(data, TRUTH, 0.0).holds


def test_B3_zero_residual_holds(data):
    exact = GroupedDataset(data.X @ TRUTH.beta, data.X, data.Z)
    for a in (0.1, 1.0, 100.0):
        assert check_B3(exact, TRUTH, a).holds


def test_B3_detects_outlier(data):
    y = data.X @ TRUTH.beta
    y[3] += 50.0
    rep = check_B3(GroupedDataset(y, data.X, data.Z), TRUTH, 0.5)
    assert not rep.holds
    assert rep.evidence["violation_count"] == 1
    assert check_B3(GroupedDataset(y, data.X, data.Z), TRUTH, 0.5, n_probe=3).holds


@settings(max_examples=20)
@given(st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_B3_monotone_in_alpha(data, a, b):
    lo, hi = sorted((a, b))
    if not check_B3(data, TRUTH, lo).holds:
        assert not check_B3(data, TRUTH, hi).holds


def test_B3_sweep(data):
    y = data.y.copy()
    y[0] += 20.0
    d = GroupedDataset(y, data.X, data.Z)
    first = b3_first_violation(d, TRUTH, [1.0, 0.001, 0.01, 0.1])
    assert first is not None
    assert check_B3(d, TRUTH, first).holds is False
    assert b3_first_violation(d, TRUTH, [0.0]) is None


# --- B4 / B5 -----------------------------------------------------------------

def test_B4_identity():
    K = b4_matrix(np.eye(3))
    v = np.eye(3).reshape(-1)
    np.testing.assert_allclose(K, np.outer(v, v), atol=1e-14)
    assert check_B4(np.eye(3)).holds


def test_B4_scalar():
    np.testing.assert_allclose(b4_matrix(np.array([[2.5]])), [[1 / 2.5 ** 2]], rtol=1e-14)


def test_B4_diagonal():
    rep = check_B4(np.diag([1.0, 2.0]))
    assert rep.holds
    assert rep.evidence["min_eigenvalue"] >= -1e-12


@settings(max_examples=20)
@given(st.integers(1, 5), st.integers(0, 2 ** 31))
def test_B4_always_psd(m, seed):
    A = np.random.default_rng(seed).standard_normal((m, m))
    assert check_B4(A @ A.T + 0.1 * np.eye(m)).holds


def test_B4_data_stack(data):
    assert check_B4(marginal_covariances(data, TRUTH)).holds


@pytest.mark.parametrize("alpha", [0.1, 0.5, 1.0])
def test_B5_scalar_closed_form(alpha):
    v = 1.7
    full, sym, (w, ks) = b5_matrix(np.array([[v]]), alpha, 20000, seed=3)
    se = (w * ks[:, 0] ** 4).std(ddof=1) / np.sqrt(20000)
    exact = 3 * (1 + 2 * alpha) ** -2.5 / v ** 2
    assert abs(full[0, 0] - exact) < 4 * se
    np.testing.assert_allclose(sym, full, rtol=1e-12)


def test_B5_identity_positive_definite():
    rep = check_B5(np.eye(3), 0.5, mc_draws=5000)
    assert rep.holds
    assert rep.draws == 5000


def test_B5_full_matrix_rank():
    full, sym, _ = b5_matrix(np.eye(3), 0.5, 2000)
    assert np.linalg.matrix_rank(full, tol=1e-10) == 6
    assert np.linalg.eigvalsh(sym)[0] > 0


def test_B5_errors():
    with pytest.raises(InsufficientDraws):
        check_B5(np.eye(2), 0.5, mc_draws=0)
    with pytest.raises(UnsupportedDimension):
        check_B5(np.eye(7), 0.5, mc_draws=100)
    with pytest.raises(UnsupportedDimension):
        check_B4(np.eye(7))


def test_B5_deterministic():
    a = check_B5(np.diag([1.0, 3.0]), 0.5, mc_draws=500, seed=4)
    b = check_B5(np.diag([1.0, 3.0]), 0.5, mc_draws=500, seed=4)
    assert a == b


def test_report_line():
    rep = check_B1(simulate(SimConfig.lmm_default(), 0, 5), TRUTH)
    assert rep.line() == "name=B1 holds=true rank=5 p=5 non_pd_groups=0 draws=0"
