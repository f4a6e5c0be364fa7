"""
Simulation designs, contamination, and the Monte-Carlo consistency runner.

Every random draw comes from a Philox (counter-based) stream keyed by
``(seed, n, replication, role)``; replications are therefore independent of
execution order and of the number of worker processes.
"""
from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit
from threadpoolctl import threadpool_limits

from .core import (CovStructure, EstimatorSpec, Family, GroupedDataset,
                   ModelSpec)
from .errors import ExperimentDegenerate, InsufficientGrid, RobustGLMMError
from .optimize import OptimizerOptions

ROLES = {"design": 1, "random_effect": 2, "noise": 3, "contamination": 4}
DEFAULT_EPSILONS = (0.25, 0.5, 1.0)


def substream(seed: int, n: int, replication: int, role: str) -> np.random.Generator:
    key = np.random.SeedSequence([int(seed), int(n), int(replication), ROLES[role]])
    return np.random.Generator(np.random.Philox(key))


@dataclass(frozen=True)
class Contamination:
    fraction: float
    shift: float
    target: str = "response"

    def __post_init__(self):
        if not 0 <= self.fraction < 1:
            raise ValueError("contamination fraction must lie in [0, 1)")
        if self.target not in ("response", "leverage"):
            raise ValueError(f"unknown contamination target {self.target!r}")


@dataclass(frozen=True)
class SimConfig:
    model: ModelSpec
    beta0: tuple
    sigma_u_sq: float
    sigma0_sq: float = 0.0
    n_grid: tuple = (25, 50, 100, 200, 400)
    replications: int = 150
    seed: int = 20240101
    contamination: Optional[Contamination] = None

    def __post_init__(self):
        object.__setattr__(self, "beta0", tuple(float(b) for b in self.beta0))
        object.__setattr__(self, "n_grid", tuple(int(k) for k in self.n_grid))
        if len(self.beta0) != self.model.p:
            raise ValueError("beta0 length must equal p")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.n_grid or any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ValueError("n_grid must be non-empty and strictly increasing")
        if self.sigma_u_sq < 0 or self.sigma0_sq < 0:
            raise ValueError("variances must be non-negative")

    @classmethod
    def lmm_default(cls, **kw) -> "SimConfig":
        """Linear design: p=5, q=2, m=6, beta0=(1,2,4,3,3), 0.56 / 0.25."""
        base = dict(model=ModelSpec("gaussian", "diagonal", m=6, p=5, q=2),
                    beta0=(1, 2, 4, 3, 3), sigma_u_sq=0.56, sigma0_sq=0.25)
        base.update(kw)
        return cls(**base)

    @classmethod
    def logistic_default(cls, **kw) -> "SimConfig":
        """Random-intercept logistic design: p=2, q=1, m=6, beta0=(1,2)."""
        base = dict(model=ModelSpec("bernoulli", "diagonal", m=6, p=2, q=1),
                    beta0=(1, 2), sigma_u_sq=0.56, n_grid=(25, 50, 100, 200))
        base.update(kw)
        return cls(**base)


def _design(config: SimConfig, n: int, rep: int):
    m, p, q = config.model.m, config.model.p, config.model.q
    rng = substream(config.seed, n, rep, "design")
    X = np.concatenate([np.ones((n, m, 1)), rng.standard_normal((n, m, p - 1))], axis=2)
    Z = X[:, :, :q].copy()
    u = math.sqrt(config.sigma_u_sq) * substream(
        config.seed, n, rep, "random_effect").standard_normal((n, q))
    linpred = X @ np.asarray(config.beta0) + np.einsum("nmq,nq->nm", Z, u)
    return X, Z, linpred


def simulate_lmm(config: SimConfig, replication_index: int, n: Optional[int] = None
                 ) -> GroupedDataset:
    """``y = X beta0 + Z u + e``: intercept plus standard-normal covariates,
    ``Z`` the first q columns of ``X``."""
    if config.model.family is not Family.GAUSSIAN:
        raise ValueError("simulate_lmm needs the gaussian family")
    n = config.n_grid[0] if n is None else n
    X, Z, linpred = _design(config, n, replication_index)
    noise = substream(config.seed, n, replication_index, "noise").standard_normal(linpred.shape)
    y = linpred + math.sqrt(config.sigma0_sq) * noise
    return GroupedDataset(y, X, Z, seed=(config.seed, n, replication_index))


def simulate_logistic(config: SimConfig, replication_index: int, n: Optional[int] = None
                      ) -> GroupedDataset:
    if config.model.family is not Family.BERNOULLI:
        raise ValueError("simulate_logistic needs the bernoulli family")
    n = config.n_grid[0] if n is None else n
    X, Z, linpred = _design(config, n, replication_index)
    unif = substream(config.seed, n, replication_index, "noise").random(linpred.shape)
    y = (unif < expit(linpred)).astype(float)
    return GroupedDataset(y, X, Z, seed=(config.seed, n, replication_index))


def simulate(config: SimConfig, replication_index: int, n: Optional[int] = None):
    if config.model.family is Family.GAUSSIAN:
        return simulate_lmm(config, replication_index, n)
    return simulate_logistic(config, replication_index, n)


def contaminate(dataset: GroupedDataset, fraction: float, shift: float,
                target: str = "response", seed: Optional[int] = None) -> GroupedDataset:
    """Corrupt ``ceil(fraction * n)`` whole groups.

    ``response`` adds ``shift`` to every y of the chosen groups;
    ``leverage`` multiplies their non-intercept X entries by ``1 + shift``.
    The chosen groups depend only on the dataset's seed key (or ``seed``).
    """
    Contamination(fraction, shift, target)
    n = dataset.n
    k = math.ceil(round(fraction * n, 9))
    if k == 0:
        return dataset
    if seed is not None:
        key = (int(seed), n, 0)
    elif dataset.seed is not None:
        key = dataset.seed
    else:
        key = (0, n, 0)
    rng = substream(key[0], key[1], key[2], "contamination")
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    if target == "response":
        y = dataset.y.copy()
        y[chosen] += shift
        return dataset.replace(y=y)
    X = dataset.X.copy()
    X[chosen, :, 1:] *= 1.0 + shift
    return dataset.replace(X=X)


# --- runner ---------------------------------------------------------------

@dataclass(frozen=True)
class FitSettings:
    opts: OptimizerOptions = OptimizerOptions()
    gh_order: int = 20
    structure: CovStructure = CovStructure.DIAGONAL


@dataclass
class ExperimentCurve:
    """Aggregates for one estimator across the n grid.

    ``biases[k]`` holds the per-replication ``||beta_hat - beta0||`` of the
    successful fits at ``n[k]`` (NaN marks a failed fit).
    """

    estimator: EstimatorSpec
    n: np.ndarray
    mean_bias: np.ndarray
    se_bias: np.ndarray
    tail_p: np.ndarray           # (len(n), len(epsilons))
    epsilons: tuple
    replications: np.ndarray     # successful fits per cell
    failures: np.ndarray
    wall_ms: np.ndarray
    biases: list = field(default_factory=list, repr=False)

    @property
    def label(self) -> str:
        return self.estimator.label


def _fit_one(dataset, estimator, family, settings: FitSettings):
    if family is Family.GAUSSIAN:
        from .lmm import fit_lmm
        return fit_lmm(dataset, estimator, structure=settings.structure, opts=settings.opts)
    from .logistic import fit_logistic, gh_rule
    return fit_logistic(dataset, estimator, rule=gh_rule(settings.gh_order),
                        structure=settings.structure, opts=settings.opts)


def run_replication(config: SimConfig, estimators: Sequence[EstimatorSpec],
                    settings: FitSettings, n: int, rep: int):
    """Simulate one dataset and fit every estimator on it.

    Returns one ``(bias, elapsed_ms)`` pair per estimator, with bias NaN when
    the fit raised or did not converge.
    """
    data = simulate(config, rep, n)
    if config.contamination is not None:
        c = config.contamination
        data = contaminate(data, c.fraction, c.shift, c.target)
    beta0 = np.asarray(config.beta0)
    out = []
    for est in estimators:
        t0 = time.perf_counter()
        try:
            res = _fit_one(data, est, config.model.family, settings)
            ok = res.converged and np.all(np.isfinite(res.point.beta))
            bias = float(np.linalg.norm(res.point.beta - beta0)) if ok else math.nan
        except (RobustGLMMError, np.linalg.LinAlgError, FloatingPointError):
            bias = math.nan
        out.append((bias, 1e3 * (time.perf_counter() - t0)))
    return out


def _single_blas():
    threadpool_limits(1)


def _task(args):
    return run_replication(*args)


def run_consistency_experiment(config: SimConfig, estimators: Sequence[EstimatorSpec],
                               settings: Optional[FitSettings] = None,
                               epsilons: Sequence[float] = DEFAULT_EPSILONS,
                               threads: int = 1) -> list:
    """Mean l2 bias, its standard error and tail frequencies per (estimator, n).

    Each replication fits all estimators to the same simulated dataset.

    Raises
    ------
    ExperimentDegenerate
        If more than 10% of the fits in any cell failed.
    """
    settings = settings or FitSettings()
    estimators = list(estimators)
    epsilons = tuple(float(e) for e in epsilons)
    tasks = [(config, estimators, settings, n, rep)
             for n in config.n_grid for rep in range(config.replications)]
    # single-threaded BLAS everywhere, so results cannot depend on `threads`
    if threads > 1:
        chunk = max(1, len(tasks) // (4 * threads))
        with ProcessPoolExecutor(max_workers=threads, initializer=_single_blas) as pool:
            results = list(pool.map(_task, tasks, chunksize=chunk))
    else:
        with threadpool_limits(1):
            results = [_task(t) for t in tasks]

    R = config.replications
    curves = []
    for e_idx, est in enumerate(estimators):
        ns, means, ses, tails, reps, fails, walls, biases = [], [], [], [], [], [], [], []
        for k, n in enumerate(config.n_grid):
            cell = results[k * R:(k + 1) * R]
            b = np.array([r[e_idx][0] for r in cell])
            wall = float(sum(r[e_idx][1] for r in cell))
            ok = b[np.isfinite(b)]
            n_fail = R - ok.size
            if n_fail > 0.1 * R:
                raise ExperimentDegenerate(
                    f"{est.label} at n={n}: {n_fail}/{R} fits failed")
            ns.append(n)
            means.append(ok.mean())
            ses.append(ok.std(ddof=1) / math.sqrt(ok.size) if ok.size > 1 else 0.0)
            tails.append([float(np.mean(ok >= eps)) for eps in epsilons])
            reps.append(ok.size)
            fails.append(n_fail)
            walls.append(wall)
            biases.append(b)
        curves.append(ExperimentCurve(est, np.array(ns), np.array(means), np.array(ses),
                                      np.array(tails).reshape(len(ns), len(epsilons)),
                                      epsilons, np.array(reps), np.array(fails),
                                      np.array(walls), biases))
    return curves


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float


def _ols_line(x, y) -> RateFit:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    A = np.column_stack([np.ones_like(x), x])
    (intercept, slope), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (intercept + slope * x)
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot <= 1e-300:
        r2 = 1.0 if ss_res <= 1e-24 else 0.0
        slope = 0.0 if ss_res <= 1e-24 else slope
    else:
        r2 = 1.0 - ss_res / ss_tot
    return RateFit(float(slope), float(intercept), float(r2))


def fit_convergence_rate(curve) -> RateFit:
    """OLS of log(mean bias) on log(n).

    ``curve`` is an :class:`ExperimentCurve` or a pair ``(n, mean_bias)``.
    """
    if isinstance(curve, ExperimentCurve):
        n, bias = curve.n, curve.mean_bias
    else:
        n, bias = curve
    n = np.asarray(n, float)
    bias = np.asarray(bias, float)
    keep = bias > 0
    if keep.sum() < 3:
        raise InsufficientGrid("need at least 3 grid points with positive bias")
    return _ols_line(np.log(n[keep]), np.log(bias[keep]))


@dataclass(frozen=True)
class TailDecay:
    n: np.ndarray
    frequency: np.ndarray
    decay: float
    intercept: float
    r_squared: float
    curve: Optional[ExperimentCurve] = None


def tail_decay_from_curve(curve: ExperimentCurve, epsilon: float) -> TailDecay:
    eps = np.asarray(curve.epsilons)
    hits = np.flatnonzero(np.isclose(eps, epsilon))
    if hits.size:
        freq = curve.tail_p[:, hits[0]]
    else:
        freq = np.array([float(np.mean(b[np.isfinite(b)] >= epsilon)) for b in curve.biases])
    usable = freq > 0
    if usable.sum() < 3:
        raise InsufficientGrid(
            f"only {int(usable.sum())} grid cells have a positive tail frequency")
    line = _ols_line(curve.n[usable], np.log(freq[usable]))
    return TailDecay(curve.n, freq, line.slope, line.intercept, line.r_squared, curve)


def tail_decay_experiment(config: SimConfig, estimator: EstimatorSpec, epsilon: float,
                          settings: Optional[FitSettings] = None, threads: int = 1
                          ) -> TailDecay:
    """Regress log P(||beta_hat - beta0|| >= epsilon) on n over cells where the
    estimated frequency is positive; a negative ``decay`` means exponential
    decay in n."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    curve, = run_consistency_experiment(config, [estimator], settings, (epsilon,), threads)
    return tail_decay_from_curve(curve, epsilon)


def scaled_deviations(curve: ExperimentCurve, m: int) -> list:
    """``sqrt(n/m) * ||beta_hat - beta0||`` per replication, per grid cell."""
    return [math.sqrt(n / m) * b[np.isfinite(b)] for n, b in zip(curve.n, curve.biases)]


# --- output ---------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def write_curves_csv(curves: Sequence[ExperimentCurve], path, record_timing: bool = False):
    """One row per (estimator, n).  ``wall_ms`` is left empty unless
    ``record_timing`` so that the file is reproducible byte-for-byte."""
    eps = curves[0].epsilons if curves else ()
    header = ["estimator", "alpha", "n", "mean_bias", "se_bias"] \
        + [f"tail_p_eps{k + 1}" for k in range(len(eps))] \
        + ["replications", "failures", "wall_ms"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for c in curves:
            alpha = "" if c.estimator.alpha is None else _fmt(c.estimator.alpha)
            for k in range(len(c.n)):
                w.writerow([c.estimator.kind.value, alpha, int(c.n[k]),
                            _fmt(c.mean_bias[k]), _fmt(c.se_bias[k])]
                           + [_fmt(t) for t in c.tail_p[k]]
                           + [int(c.replications[k]), int(c.failures[k]),
                              f"{c.wall_ms[k]:.1f}" if record_timing else ""])


def write_plot_data(curves: Sequence[ExperimentCurve], path):
    """Long format: one row per (estimator, n, replication)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["estimator", "alpha", "n", "replication", "bias"])
        for c in curves:
            alpha = "" if c.estimator.alpha is None else _fmt(c.estimator.alpha)
            for n, b in zip(c.n, c.biases):
                for rep, val in enumerate(b):
                    w.writerow([c.estimator.kind.value, alpha, int(n), rep,
                                "" if not np.isfinite(val) else _fmt(val)])
