"""
Logistic mixed model: marginal likelihood by adaptive Gauss-Hermite
quadrature (one q-dimensional integral per group) and the MLE / MDPDE
objectives built on it.

The random effect is integrated in standardized form ``u = chol(G) v`` with
``v ~ N(0, I)``.  For each group the integrand is recentred at its mode and
rescaled by the curvature there before the Gauss-Hermite rule is applied.
"""
from __future__ import annotations

import dataclasses
import functools
import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import expit, logsumexp

from .core import (CovStructure, EstimatorKind, EstimatorSpec, FitResult,
                   GroupedDataset, ParameterPoint, assemble_G, cholesky,
                   extract_g_params, pack, unpack)
from .errors import (DegenerateCovariance, EnumerationTooLarge,
                     InnerModeDivergence)
from .optimize import (ObjectiveHandle, OptimizerOptions, finite_diff_gradient,
                       minimize)

MAX_ENUMERATION_M = 12
MODE_MAX_ITER = 50
MODE_TOL = 1e-10


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite nodes and weights for the weight ``exp(-t^2)``.

    With ``adaptive=True`` the nodes are shifted and scaled per integrand
    (mode and curvature) at evaluation time.
    """

    nodes: np.ndarray
    weights: np.ndarray
    adaptive: bool = True

    @property
    def K(self) -> int:
        return len(self.nodes)

    def tensor(self, q: int):
        """Product rule in q dimensions: ``(K**q, q)`` nodes and weights."""
        if q == 1:
            return self.nodes[:, None], self.weights.copy()
        pts = np.array(list(itertools.product(self.nodes, repeat=q)))
        w = np.prod(np.array(list(itertools.product(self.weights, repeat=q))), axis=1)
        return pts, w


@functools.lru_cache(maxsize=None)
def gh_rule(K: int = 20, adaptive: bool = True) -> QuadratureRule:
    """Golub-Welsch: eigen-decomposition of the Hermite Jacobi matrix."""
    if not 1 <= K <= 100:
        raise ValueError("K must lie in [1, 100]")
    if K == 1:
        return QuadratureRule(np.zeros(1), np.array([math.sqrt(math.pi)]), adaptive)
    off = np.sqrt(np.arange(1, K) / 2.0)
    nodes, vecs = eigh_tridiagonal(np.zeros(K), off)
    weights = math.sqrt(math.pi) * vecs[0] ** 2
    # symmetrize away round-off
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return QuadratureRule(nodes, weights, adaptive)


def logistic_conditional_logdensity(y, x, z, beta, u):
    """``y s - log(1 + e^s)`` with ``s = x^T beta + z^T u``."""
    s = np.dot(x, beta) + np.dot(z, u)
    return y * s - np.logaddexp(0.0, s)


def _loglik(y, s):
    """Sum over the last axis of Bernoulli-logit log densities."""
    return np.sum(y * s - np.logaddexp(0.0, s), axis=-1)


def _mode(y, eta, A):
    """Mode of ``loglik(eta + A v) - v^T v / 2`` for each batch row.

    ``y, eta``: (B, m); ``A``: (B, m, q).  Returns mode (B, q) and the
    Cholesky factor of the negative Hessian there (B, q, q).
    """
    B, m, q = A.shape
    v = np.zeros((B, q))
    eye = np.eye(q)
    for _ in range(MODE_MAX_ITER):
        s = eta + np.einsum("bmq,bq->bm", A, v)
        mu = expit(s)
        grad = np.einsum("bmq,bm->bq", A, y - mu) - v
        W = mu * (1.0 - mu)
        negH = np.einsum("bmi,bm,bmj->bij", A, W, A) + eye
        step = np.linalg.solve(negH, grad[:, :, None])[:, :, 0]
        # step halving keeps each update an ascent step
        t = np.ones(B)
        cur = _loglik(y, s) - 0.5 * np.einsum("bq,bq->b", v, v)
        for _ in range(30):
            v_try = v + t[:, None] * step
            s_try = eta + np.einsum("bmq,bq->bm", A, v_try)
            new = _loglik(y, s_try) - 0.5 * np.einsum("bq,bq->b", v_try, v_try)
            bad = ~(new >= cur - 1e-12 * np.abs(cur))
            if not bad.any():
                break
            t = np.where(bad, 0.5 * t, t)
        v = v + t[:, None] * step
        if np.max(np.abs(t[:, None] * step)) < MODE_TOL * (1.0 + np.max(np.abs(v))):
            break
    else:
        raise InnerModeDivergence(
            f"mode search did not converge in {MODE_MAX_ITER} iterations")
    s = eta + np.einsum("bmq,bq->bm", A, v)
    mu = expit(s)
    negH = np.einsum("bmi,bm,bmj->bij", A, mu * (1.0 - mu), A) + eye
    return v, np.linalg.cholesky(negH)


def _log_marginal_batch(y, eta, A, rule: QuadratureRule):
    """log of the group marginal density for each batch row."""
    B, m, q = A.shape
    if q == 0:
        return _loglik(y, eta)
    t, w = rule.tensor(q)
    with np.errstate(divide="ignore"):
        logw = np.log(w)                                              # -inf for underflowed weights
    if not rule.adaptive:
        v = math.sqrt(2.0) * t                                        # (K, q)
        s = eta[:, None, :] + np.einsum("bmq,kq->bkm", A, v)
        return logsumexp(logw + _loglik(y[:, None, :], s), axis=1) \
            - 0.5 * q * math.log(math.pi)
    vhat, R = _mode(y, eta, A)
    # v = vhat + sqrt(2) R^{-T} t  so that the scaled integrand is ~ exp(-t^2)
    Rt = np.swapaxes(R, 1, 2)
    C = np.linalg.solve(Rt, np.broadcast_to(np.eye(q), (B, q, q)))   # R^{-T}
    v = vhat[:, None, :] + math.sqrt(2.0) * np.einsum("bij,kj->bki", C, t)
    s = eta[:, None, :] + np.einsum("bmq,bkq->bkm", A, v)
    logh = _loglik(y[:, None, :], s) - 0.5 * np.einsum("bkq,bkq->bk", v, v)
    log_detC = -np.sum(np.log(np.diagonal(R, axis1=1, axis2=2)), axis=1)
    return (logsumexp(logw + np.sum(t ** 2, axis=1) + logh, axis=1)
            + 0.5 * q * math.log(2.0) + log_detC - 0.5 * q * math.log(2.0 * math.pi))


def _chol_G(point: ParameterPoint, structure, q: int) -> np.ndarray:
    if q == 0:
        return np.zeros((0, 0))
    G = assemble_G(point.g_params, structure, q)
    return cholesky(G)


def logistic_marginal_logdensity(group, beta, g_params, rule: Optional[QuadratureRule] = None,
                                 structure=CovStructure.DIAGONAL) -> float:
    """log f(y; beta, eta) for one group ``(y, X, Z)``."""
    rule = rule or gh_rule()
    y, X, Z = (np.asarray(a, float) for a in group)
    q = Z.shape[1]
    if q > 2:
        raise ValueError("tensor-product quadrature supports q <= 2")
    point = ParameterPoint(beta, None, g_params)
    LG = _chol_G(point, structure, q)
    A = (Z @ LG)[None]
    return float(_log_marginal_batch(y[None], (X @ np.asarray(beta, float))[None], A, rule)[0])


def group_log_marginals(dataset: GroupedDataset, point: ParameterPoint,
                        rule: Optional[QuadratureRule] = None,
                        structure=CovStructure.DIAGONAL) -> np.ndarray:
    rule = rule or gh_rule()
    if dataset.q > 2:
        raise ValueError("tensor-product quadrature supports q <= 2")
    LG = _chol_G(point, structure, dataset.q)
    A = dataset.Z @ LG
    return _log_marginal_batch(dataset.y, dataset.X @ point.beta, A, rule)


def all_outcomes(m: int) -> np.ndarray:
    """Every y in {0,1}^m, shape (2**m, m)."""
    return np.array(list(itertools.product((0.0, 1.0), repeat=m)))


def outcome_log_marginals(dataset: GroupedDataset, point: ParameterPoint,
                          rule: Optional[QuadratureRule] = None,
                          structure=CovStructure.DIAGONAL,
                          adaptive: bool = False) -> np.ndarray:
    """log f(y) for every outcome vector and group, shape (n, 2**m).

    By default a fixed, prior-centred rule of order ``min(2K, 100)`` is
    used: then ``sum_j log(1 + e^s)`` is shared by all outcomes and the
    outcome-specific part is a single matrix product, which makes the
    enumeration cheap.  The doubled order compensates for the missing
    recentring when the random-effect variance is large.  ``adaptive=True``
    recentres every (group, outcome) integrand with the rule as given.
    """
    rule = rule or gh_rule()
    n, m, q = dataset.n, dataset.m, dataset.q
    if m > MAX_ENUMERATION_M:
        raise EnumerationTooLarge(f"m={m} exceeds the enumeration cutoff {MAX_ENUMERATION_M}")
    Y = all_outcomes(m)
    nY = len(Y)
    LG = _chol_G(point, structure, q)
    A = dataset.Z @ LG
    eta = dataset.X @ point.beta
    if adaptive:
        out = _log_marginal_batch(
            np.broadcast_to(Y, (n, nY, m)).reshape(-1, m),
            np.repeat(eta, nY, axis=0),
            np.repeat(A, nY, axis=0), rule)
        return out.reshape(n, nY)
    if q == 0:
        return (eta @ Y.T) \
            - np.sum(np.logaddexp(0.0, eta), axis=1)[:, None]
    t, w = gh_rule(min(2 * rule.K, 100), adaptive=False).tensor(q)
    keep = w > 0                                                             # drop underflowed weights
    t, w = t[keep], w[keep]
    s = eta[:, None, :] + math.sqrt(2.0) * np.einsum("nmq,kq->nkm", A, t)   # (n, K, m)
    shared = np.log(w) - np.sum(np.logaddexp(0.0, s), axis=2)                # (n, K)
    logp = s @ Y.T + shared[:, :, None]                                     # (n, K, 2**m)
    top = logp.max(axis=1)
    logp -= top[:, None, :]
    np.exp(logp, out=logp)
    return np.log(logp.sum(axis=1)) + top - 0.5 * q * math.log(math.pi)


def logistic_mle_loss(dataset, point, rule=None, structure=CovStructure.DIAGONAL) -> float:
    return float(-np.mean(group_log_marginals(dataset, point, rule, structure)))


def mc_power_sum(dataset, point, alpha, rule=None, structure=CovStructure.DIAGONAL,
                 n_samples: int = 100_000, seed: int = 0):
    """Monte-Carlo estimate of ``sum_y f(y)^(1+alpha)`` per group.

    Uses ``E_f[f(Y)^alpha]`` with Y drawn from the model.  Returns
    ``(estimate, standard_error)``, each of shape (n,).
    """
    rule = rule or gh_rule()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    n, m, q = dataset.n, dataset.m, dataset.q
    LG = _chol_G(point, structure, q)
    A = dataset.Z @ LG
    eta = dataset.X @ point.beta
    est, se = np.empty(n), np.empty(n)
    chunk = 10_000
    for i in range(n):
        vals = []
        for start in range(0, n_samples, chunk):
            size = min(chunk, n_samples - start)
            v = rng.standard_normal((size, q))
            mu = expit(eta[i] + v @ A[i].T)
            Y = (rng.random((size, m)) < mu).astype(float)
            logf = _log_marginal_batch(Y, np.broadcast_to(eta[i], (size, m)),
                                       np.broadcast_to(A[i], (size, m, q)), rule)
            vals.append(np.exp(alpha * logf))
        vals = np.concatenate(vals)
        est[i] = vals.mean()
        se[i] = vals.std(ddof=1) / math.sqrt(n_samples)
    return est, se


def _mdpde_terms(dataset, point, alpha, rule, structure, mc_samples=None, mc_seed=0):
    """Per-group ``(sum_y f^(1+alpha), alpha * log f(y_i))``."""
    if dataset.m > MAX_ENUMERATION_M:
        if not mc_samples:
            raise EnumerationTooLarge(
                f"m={dataset.m} > {MAX_ENUMERATION_M}; pass mc_samples for a Monte-Carlo estimate")
        power_sum, _ = mc_power_sum(dataset, point, alpha, rule, structure,
                                    mc_samples, mc_seed)
    else:
        logf_all = outcome_log_marginals(dataset, point, rule, structure)
        power_sum = np.exp(logsumexp((1 + alpha) * logf_all, axis=1))
    obs = alpha * group_log_marginals(dataset, point, rule, structure)
    return power_sum, obs


def logistic_mdpde_loss(dataset, point, alpha: float, rule=None,
                        structure=CovStructure.DIAGONAL, mc_samples=None,
                        mc_seed: int = 0) -> float:
    """Average over groups of ``sum_y f(y)^(1+alpha) - (1 + 1/alpha) f(y_i)^alpha``.

    Raises
    ------
    EnumerationTooLarge
        If ``m > 12`` and no Monte-Carlo sample size is given.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    power_sum, obs = _mdpde_terms(dataset, point, alpha, rule, structure,
                                  mc_samples, mc_seed)
    return float(np.mean(power_sum - (1 + 1 / alpha) * np.exp(obs)))


def _shifted_mdpde(dataset, point, alpha, rule, structure):
    # loss + (1 + 1/alpha); keeps precision when alpha is small
    power_sum, obs = _mdpde_terms(dataset, point, alpha, rule, structure)
    return float(np.mean(power_sum - (1 + 1 / alpha) * np.expm1(obs)))


def logistic_objective(dataset: GroupedDataset, estimator: EstimatorSpec,
                       rule: Optional[QuadratureRule] = None,
                       structure=CovStructure.DIAGONAL, h: float = 1e-6) -> ObjectiveHandle:
    """Loss with central finite-difference gradient on the unconstrained
    vector ``[beta, g]``.  MDPDE losses are shifted by ``1 + 1/alpha``."""
    rule = rule or gh_rule()
    p = dataset.p

    def loss(theta):
        try:
            point = unpack(theta, p, structure, gaussian=False)
            if estimator.kind is EstimatorKind.MLE:
                return logistic_mle_loss(dataset, point, rule, structure)
            return _shifted_mdpde(dataset, point, estimator.alpha, rule, structure)
        except (DegenerateCovariance, InnerModeDivergence, FloatingPointError,
                np.linalg.LinAlgError):
            return math.inf

    def evaluate(theta):
        f = loss(theta)
        if not math.isfinite(f):
            return f, np.full(len(theta), np.nan)
        try:
            g = finite_diff_gradient(loss, theta, h)
        except Exception:
            return math.inf, np.full(len(theta), np.nan)
        return f, g

    dim = p + (dataset.q if CovStructure(structure) is CovStructure.DIAGONAL
               else dataset.q * (dataset.q + 1) // 2)
    return ObjectiveHandle(evaluate, dim)


def default_logistic_init(dataset: GroupedDataset, structure=CovStructure.DIAGONAL,
                          n_iter: int = 8) -> ParameterPoint:
    """Ridge-stabilized IRLS for a plain logistic regression, ``G = 0.1 I``."""
    X = dataset.stacked_design()
    y = dataset.y.reshape(-1)
    beta = np.zeros(X.shape[1])
    ridge = 1e-6 * len(y)
    for _ in range(n_iter):
        mu = expit(X @ beta)
        W = mu * (1 - mu)
        H = X.T @ (W[:, None] * X) + ridge * np.eye(len(beta))
        beta = beta + np.linalg.solve(H, X.T @ (y - mu) - ridge * beta)
    g = extract_g_params(0.1 * np.eye(dataset.q), structure) if dataset.q else np.zeros(0)
    return ParameterPoint(beta, None, g)


def fit_logistic(dataset: GroupedDataset, estimator: Optional[EstimatorSpec] = None,
                 init: Optional[ParameterPoint] = None, rule: Optional[QuadratureRule] = None,
                 structure=CovStructure.DIAGONAL,
                 opts: Optional[OptimizerOptions] = None) -> FitResult:
    from .lmm import check_rank

    estimator = estimator or EstimatorSpec.mle()
    check_rank(dataset)
    rule = rule or gh_rule()
    init = init or default_logistic_init(dataset, structure)
    objective = logistic_objective(dataset, estimator, rule, structure)
    # the negative log-likelihood tends to zero on separable data, where
    # an absolute gradient test would report a spurious optimum
    opts = dataclasses.replace(opts or OptimizerOptions(), loss_relative_gtol=True)
    res = minimize(objective, pack(init, structure), opts)
    point = unpack(res.x, dataset.p, structure, gaussian=False)
    loss = res.loss
    if estimator.kind is EstimatorKind.MDPDE:
        loss -= 1 + 1 / estimator.alpha
    return FitResult(point, loss, res.grad_norm, res.iterations, res.converged,
                     res.termination.value, estimator)
