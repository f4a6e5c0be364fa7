import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustglmm.core import EstimatorSpec
from robustglmm.errors import ExperimentDegenerate, InsufficientGrid
from robustglmm.experiments import (ExperimentCurve, FitSettings, SimConfig, contaminate,
                                    fit_convergence_rate, run_consistency_experiment,
                                    scaled_deviations, simulate, simulate_lmm,
                                    simulate_logistic, tail_decay_from_curve,
                                    write_curves_csv, write_plot_data)
from robustglmm.lmm import fit_lmm
from robustglmm.optimize import OptimizerOptions

MLE = EstimatorSpec.mle()


@pytest.fixture(scope="module")
def small_curves():
    cfg = SimConfig.lmm_default(n_grid=(10, 20, 40), replications=12)
    return run_consistency_experiment(cfg, [MLE, EstimatorSpec.mdpde(0.5)],
                                      epsilons=(0.0, 0.1, 0.25, 0.5, 100.0))


# --- simulation --------------------------------------------------------------

def test_noise_free_lmm():
    cfg = SimConfig.lmm_default(sigma_u_sq=0.0, sigma0_sq=0.0)
    data = simulate_lmm(cfg, 0, 30)
    np.testing.assert_array_equal(data.y, data.X @ np.array(cfg.beta0))


def test_design_layout():
    data = simulate_lmm(SimConfig.lmm_default(), 0, 10)
    np.testing.assert_array_equal(data.X[:, :, 0], 1.0)
    np.testing.assert_array_equal(data.Z, data.X[:, :, :2])


def test_lmm_marginal_variance():
    cfg = SimConfig.lmm_default()
    data = simulate_lmm(cfg, 0, 5000)
    r2 = (data.y - data.X @ np.array(cfg.beta0)) ** 2
    per_group = r2.mean(axis=1)
    se = per_group.std(ddof=1) / math.sqrt(data.n)
    assert abs(per_group.mean() - 1.37) <= 3 * se


@pytest.mark.parametrize("kind", ["lmm", "logistic"])
def test_simulation_deterministic(kind):
    cfg = SimConfig.lmm_default() if kind == "lmm" else SimConfig.logistic_default()
    a, b = simulate(cfg, 7, 50), simulate(cfg, 7, 50)
    for x, y in [(a.y, b.y), (a.X, b.X), (a.Z, b.Z)]:
        assert x.tobytes() == y.tobytes()
    c = simulate(cfg, 8, 50)
    assert a.y.tobytes() != c.y.tobytes()


def test_replications_independent_of_grid():
    a = simulate(SimConfig.lmm_default(), 3, 25)
    b = simulate(SimConfig.lmm_default(n_grid=(25,), replications=5), 3, 25)
    assert a.y.tobytes() == b.y.tobytes()


def test_logistic_symmetric_mean():
    cfg = SimConfig.logistic_default(beta0=(0.0, 0.0), sigma_u_sq=1e-12)
    data = simulate_logistic(cfg, 0, 1000)
    assert set(np.unique(data.y)) <= {0.0, 1.0}
    se = data.y.std() / math.sqrt(data.y.size)
    assert abs(data.y.mean() - 0.5) <= 3 * se


def _within_group_corr(y):
    c = np.corrcoef(y.T)
    return c[np.triu_indices_from(c, 1)].mean()


def test_logistic_within_group_correlation_grows():
    lo = simulate_logistic(SimConfig.logistic_default(), 0, 3000)
    hi = simulate_logistic(SimConfig.logistic_default(sigma_u_sq=25.0), 0, 3000)
    assert _within_group_corr(hi.y) > _within_group_corr(lo.y) > 0


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig.lmm_default(n_grid=(50, 25))
    with pytest.raises(ValueError):
        SimConfig.lmm_default(replications=0)
    with pytest.raises(ValueError):
        SimConfig.lmm_default(beta0=(1, 2))


# --- contamination -----------------------------------------------------------

def test_contaminate_zero_fraction(lmm_data):
    out = contaminate(lmm_data, 0.0, 10.0)
    np.testing.assert_array_equal(out.y, lmm_data.y)
    np.testing.assert_array_equal(out.X, lmm_data.X)


def test_contaminate_response_bookkeeping(lmm_data):
    out = contaminate(lmm_data, 0.1, 10.0, "response")
    changed = np.any(out.y != lmm_data.y, axis=1)
    assert changed.sum() == math.ceil(0.1 * lmm_data.n)
    np.testing.assert_allclose(out.y[changed] - lmm_data.y[changed], 10.0)
    np.testing.assert_array_equal(out.X, lmm_data.X)
    np.testing.assert_array_equal(out.Z, lmm_data.Z)
    again = contaminate(lmm_data, 0.1, 10.0, "response")
    np.testing.assert_array_equal(again.y, out.y)


def test_contaminate_leverage(lmm_data):
    out = contaminate(lmm_data, 0.2, 1.0, "leverage")
    changed = np.any(out.X != lmm_data.X, axis=(1, 2))
    assert changed.sum() == math.ceil(0.2 * lmm_data.n)
    np.testing.assert_array_equal(out.X[:, :, 0], 1.0)
    np.testing.assert_allclose(out.X[changed, :, 1:], 2.0 * lmm_data.X[changed, :, 1:])
    np.testing.assert_array_equal(out.y, lmm_data.y)


# --- runner ------------------------------------------------------------------

def test_single_cell_equals_one_fit():
    cfg = SimConfig.lmm_default(n_grid=(30,), replications=1)
    curve, = run_consistency_experiment(cfg, [MLE])
    fit = fit_lmm(simulate(cfg, 0, 30))
    assert curve.mean_bias[0] == np.linalg.norm(fit.point.beta - np.array(cfg.beta0))
    assert curve.replications[0] == 1


def test_curve_invariants(small_curves):
    for c in small_curves:
        assert np.all(c.mean_bias >= 0)
        assert np.all((c.tail_p >= 0) & (c.tail_p <= 1))
        # frequencies non-increasing in epsilon
        assert np.all(np.diff(c.tail_p, axis=1) <= 0)
        np.testing.assert_array_equal(c.tail_p[:, 0], 1.0)
        np.testing.assert_array_equal(c.tail_p[:, -1], 0.0)


def test_parallel_matches_serial(small_curves, tmp_path):
    cfg = SimConfig.lmm_default(n_grid=(10, 20, 40), replications=12)
    par = run_consistency_experiment(cfg, [MLE, EstimatorSpec.mdpde(0.5)],
                                     epsilons=(0.0, 0.1, 0.25, 0.5, 100.0), threads=3)
    write_curves_csv(small_curves, tmp_path / "a.csv")
    write_curves_csv(par, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_degenerate_cell_raises():
    cfg = SimConfig.lmm_default(n_grid=(20,), replications=5)
    with pytest.raises(ExperimentDegenerate):
        run_consistency_experiment(cfg, [MLE], FitSettings(OptimizerOptions(max_iter=1)))


def test_csv_outputs(small_curves, tmp_path):
    path = tmp_path / "curves.csv"
    write_curves_csv(small_curves, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["estimator", "alpha", "n", "mean_bias", "se_bias", "tail_p_eps1",
                       "tail_p_eps2", "tail_p_eps3", "tail_p_eps4", "tail_p_eps5",
                       "replications", "failures", "wall_ms"]
    assert len(rows) == 1 + 2 * 3
    assert all(r[-1] == "" for r in rows[1:])
    write_curves_csv(small_curves, path, record_timing=True)
    assert all(float(r[-1]) > 0 for r in list(csv.reader(path.open()))[1:])
    plot = tmp_path / "plot.csv"
    write_plot_data(small_curves, plot)
    assert len(list(csv.reader(plot.open()))) == 1 + 2 * 3 * 12


# --- rates -------------------------------------------------------------------

def test_rate_of_exact_power_law():
    n = np.array([25, 50, 100, 200, 400])
    r = fit_convergence_rate((n, 3.0 * n ** -0.5))
    assert r.slope == pytest.approx(-0.5, abs=1e-12)
    assert r.r_squared == pytest.approx(1.0, abs=1e-12)


def test_rate_of_constant_curve():
    r = fit_convergence_rate(([10, 20, 40], [0.3, 0.3, 0.3]))
    assert r.slope == 0.0


def test_rate_needs_three_points():
    with pytest.raises(InsufficientGrid):
        fit_convergence_rate(([10, 20], [0.3, 0.2]))
    with pytest.raises(InsufficientGrid):
        fit_convergence_rate(([10, 20, 30], [0.3, 0.0, 0.0]))


@settings(max_examples=25)
@given(st.floats(0.01, 10), st.floats(-2, 0), st.integers(3, 8))
def test_rate_recovers_any_power_law(c, slope, k):
    n = 10.0 * 2.0 ** np.arange(k)
    r = fit_convergence_rate((n, c * n ** slope))
    assert r.slope == pytest.approx(slope, abs=1e-9)


def test_tail_decay_edge_cases(small_curves):
    curve = small_curves[0]
    with pytest.raises(InsufficientGrid):
        tail_decay_from_curve(curve, 100.0)
    t = tail_decay_from_curve(curve, 0.0)
    np.testing.assert_array_equal(t.frequency, 1.0)
    assert t.decay == 0.0


def test_deviation_scale_stable():
    cfg = SimConfig.lmm_default(n_grid=(25, 400), replications=40)
    curve, = run_consistency_experiment(cfg, [MLE])
    med = [np.median(d) for d in scaled_deviations(curve, 6)]
    assert 0.5 <= med[1] / med[0] <= 2.0


def test_curve_label():
    c = ExperimentCurve(EstimatorSpec.mdpde(0.5), np.array([1]), np.array([0.1]),
                        np.array([0.0]), np.zeros((1, 0)), (), np.array([1]),
                        np.array([0]), np.array([0.0]))
    assert c.label == "MDPDE(alpha=0.5)"
