"""
Linear mixed model: negative log-likelihood and density power divergence
losses with their analytic gradients, and the fitting driver.

Every "score" returned here is the gradient of the corresponding loss, so
the estimating equations are these gradients set to zero.  Losses are
averages over groups.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (LOG_2PI, CovStructure, EstimatorKind, EstimatorSpec, FitResult,
                   GroupedDataset, ParameterPoint, assemble_G, cholesky,
                   extract_g_params, pack, tril_colmajor, unpack)
from .errors import DegenerateCovariance, RankDeficientDesign
from .optimize import ObjectiveHandle, OptimizerOptions, minimize


def mdpde_constants(m: int, alpha: float) -> tuple:
    """``(L1, L2)`` for an m-variate normal and tuning exponent ``alpha``."""
    L1 = (1 + alpha) ** (-m / 2) * (2 * math.pi) ** (-m * alpha / 2)
    L2 = (1 + 1 / alpha) * (2 * math.pi) ** (-m * alpha / 2)
    return L1, L2


@dataclass(frozen=True)
class LmmWorkspace:
    """Per-group quantities at one parameter point.

    A workspace is built for a single ``(beta, eta)`` and never mutated, so
    moving to a new point means building a new one.
    """

    G: np.ndarray
    chol: np.ndarray        # (n, m, m) lower factors of V_i
    logdet: np.ndarray      # (n,)
    resid: np.ndarray       # (n, m)
    d: np.ndarray           # (n, m)  V_i^{-1} r_i
    quad: np.ndarray        # (n,)    r_i^T V_i^{-1} r_i
    Xd: np.ndarray          # (n, p)  X_i^T d_i
    Zd: np.ndarray          # (n, q)  Z_i^T d_i
    ZVZ: np.ndarray         # (n, q, q)  Z_i^T V_i^{-1} Z_i
    trVinv: np.ndarray      # (n,)
    alpha: Optional[float] = None

    @property
    def m(self) -> int:
        return self.resid.shape[1]

    @property
    def L1(self) -> float:
        return mdpde_constants(self.m, self.alpha)[0]

    @property
    def L2(self) -> float:
        return mdpde_constants(self.m, self.alpha)[1]


def lmm_workspace(dataset: GroupedDataset, point: ParameterPoint,
                  structure=CovStructure.DIAGONAL, alpha=None) -> LmmWorkspace:
    if point.sigma0_sq is None:
        raise ValueError("the linear mixed model needs sigma0_sq")
    n, m, p, q = dataset.n, dataset.m, dataset.p, dataset.q
    G = assemble_G(point.g_params, structure, q) if q else np.zeros((0, 0))
    Z = dataset.Z
    V = Z @ G @ np.swapaxes(Z, 1, 2) + point.sigma0_sq * np.eye(m)
    L = cholesky(V)
    r = dataset.y - dataset.X @ point.beta
    # one batched triangular solve against [r | X | Z | I]
    rhs = np.concatenate(
        [r[:, :, None], dataset.X, Z, np.broadcast_to(np.eye(m), (n, m, m))], axis=2)
    W = np.linalg.solve(L, rhs)
    wr = W[:, :, 0]
    WX = W[:, :, 1:1 + p]
    WZ = W[:, :, 1 + p:1 + p + q]
    Li = W[:, :, 1 + p + q:]
    d = np.einsum("nji,nj->ni", Li, wr)
    return LmmWorkspace(
        G=G, chol=L,
        logdet=2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1),
        resid=r, d=d,
        quad=np.einsum("nj,nj->n", wr, wr),
        Xd=np.einsum("njk,nj->nk", WX, wr),
        Zd=np.einsum("njk,nj->nk", WZ, wr),
        ZVZ=np.einsum("nji,njk->nik", WZ, WZ),
        trVinv=np.einsum("nij,nij->n", Li, Li),
        alpha=alpha)


def _per_group_loss(ws: LmmWorkspace, alpha=None, shifted=False) -> np.ndarray:
    m = ws.m
    if alpha is None:
        return 0.5 * (m * LOG_2PI + ws.logdet + ws.quad)
    a = alpha
    log_first = -0.5 * m * math.log1p(a) - 0.5 * m * a * LOG_2PI - 0.5 * a * ws.logdet
    t = -0.5 * m * a * LOG_2PI - 0.5 * a * ws.logdet - 0.5 * a * ws.quad
    c = 1 + 1 / a
    if shifted:
        # loss + (1 + 1/alpha), accurate as alpha -> 0
        return np.exp(log_first) - c * np.expm1(t)
    return np.exp(log_first) - c * np.exp(t)


def _weights(ws: LmmWorkspace, alpha=None):
    """Per-group ``(c, e)`` with d rho / d V = c V^{-1} - e d d^T."""
    n = ws.quad.shape[0]
    if alpha is None:
        half = np.full(n, 0.5)
        return half, half
    m, a = ws.m, alpha
    A = np.exp(-0.5 * m * math.log1p(a) - 0.5 * m * a * LOG_2PI - 0.5 * a * ws.logdet)
    B = (1 + 1 / a) * np.exp(-0.5 * m * a * LOG_2PI - 0.5 * a * ws.logdet
                             - 0.5 * a * ws.quad)
    return 0.5 * a * (B - A), 0.5 * a * B


def _grad_G_matrix(ws: LmmWorkspace, c, e) -> np.ndarray:
    """Average of d rho / d G (entries of G treated as free)."""
    M = c[:, None, None] * ws.ZVZ - e[:, None, None] * np.einsum("ni,nj->nij", ws.Zd, ws.Zd)
    return M.mean(axis=0)


def _eta_gradient(ws: LmmWorkspace, sigma0_sq, g_params, structure, c, e, natural):
    structure = CovStructure(structure)
    g_sigma = float(np.mean(c * ws.trVinv - e * np.einsum("ni,ni->n", ws.d, ws.d)))
    q = ws.G.shape[0]
    if q == 0:
        return np.array([g_sigma if natural else g_sigma * sigma0_sq])
    M = _grad_G_matrix(ws, c, e)
    if structure is CovStructure.DIAGONAL:
        gg = np.diag(M).copy()
        if not natural:
            gg *= np.asarray(g_params)
            g_sigma *= sigma0_sq
    else:
        rows, cols = tril_colmajor(q)
        if natural:
            gg = np.where(rows == cols, 1.0, 2.0) * M[rows, cols]
        else:
            Lc = np.linalg.cholesky(ws.G)
            dL = 2.0 * M @ Lc
            idx = np.arange(q)
            dL[idx, idx] *= Lc[idx, idx]
            gg = dL[rows, cols]
            g_sigma *= sigma0_sq
    return np.concatenate([[g_sigma], gg])


# --- MLE -------------------------------------------------------------------

def lmm_mle_loss(dataset, point, structure=CovStructure.DIAGONAL) -> float:
    ws = lmm_workspace(dataset, point, structure)
    return float(np.mean(_per_group_loss(ws)))


def lmm_mle_score_beta(dataset, point, structure=CovStructure.DIAGONAL) -> np.ndarray:
    ws = lmm_workspace(dataset, point, structure)
    return -ws.Xd.mean(axis=0)


def lmm_mle_score_eta(dataset, point, structure=CovStructure.DIAGONAL,
                      natural: bool = False) -> np.ndarray:
    """Gradient of the MLE loss in the variance coordinates.

    The first entry refers to ``sigma0_sq`` and the rest to ``G``.  With
    ``natural=False`` (default) derivatives are taken with respect to the
    optimizer's coordinates (``log sigma0_sq``, log variances or
    log-Cholesky entries); with ``natural=True`` with respect to
    ``sigma0_sq`` and the lower-triangular entries of ``G``.
    """
    ws = lmm_workspace(dataset, point, structure)
    c, e = _weights(ws)
    return _eta_gradient(ws, point.sigma0_sq, point.g_params, structure, c, e, natural)


# --- MDPDE -----------------------------------------------------------------

def lmm_mdpde_loss(dataset, point, alpha: float, structure=CovStructure.DIAGONAL) -> float:
    ws = lmm_workspace(dataset, point, structure, alpha)
    return float(np.mean(_per_group_loss(ws, alpha)))


def lmm_mdpde_score_beta(dataset, point, alpha: float,
                         structure=CovStructure.DIAGONAL) -> np.ndarray:
    ws = lmm_workspace(dataset, point, structure, alpha)
    _, e = _weights(ws, alpha)
    return -(2.0 * e[:, None] * ws.Xd).mean(axis=0)


def lmm_mdpde_score_eta(dataset, point, alpha: float, structure=CovStructure.DIAGONAL,
                        natural: bool = False) -> np.ndarray:
    """As :func:`lmm_mle_score_eta`, for the density power divergence loss."""
    ws = lmm_workspace(dataset, point, structure, alpha)
    c, e = _weights(ws, alpha)
    return _eta_gradient(ws, point.sigma0_sq, point.g_params, structure, c, e, natural)


def per_group_gradients(dataset, point, alpha=None, structure=CovStructure.DIAGONAL,
                        natural: bool = True) -> np.ndarray:
    """Per-group loss gradients ``(n, p + 1 + n_g)``; rows sum to n times
    the averaged score."""
    ws = lmm_workspace(dataset, point, structure, alpha)
    c, e = _weights(ws, alpha)
    gb = -2.0 * e[:, None] * ws.Xd
    if natural:
        g_sigma = c * ws.trVinv - e * np.einsum("ni,ni->n", ws.d, ws.d)
        M = c[:, None, None] * ws.ZVZ - e[:, None, None] * np.einsum("ni,nj->nij", ws.Zd, ws.Zd)
        q = M.shape[1]
        if CovStructure(structure) is CovStructure.DIAGONAL:
            gg = np.diagonal(M, axis1=1, axis2=2)
        else:
            rows, cols = tril_colmajor(q)
            gg = np.where(rows == cols, 1.0, 2.0) * M[:, rows, cols]
        return np.hstack([gb, g_sigma[:, None], gg])
    rows = []
    for i in range(dataset.n):
        sub = LmmWorkspace(ws.G, ws.chol[i:i + 1], ws.logdet[i:i + 1], ws.resid[i:i + 1],
                           ws.d[i:i + 1], ws.quad[i:i + 1], ws.Xd[i:i + 1],
                           ws.Zd[i:i + 1], ws.ZVZ[i:i + 1], ws.trVinv[i:i + 1], alpha)
        rows.append(_eta_gradient(sub, point.sigma0_sq, point.g_params, structure,
                                  c[i:i + 1], e[i:i + 1], False))
    return np.hstack([gb, np.array(rows)])


# --- fitting ---------------------------------------------------------------

def lmm_objective(dataset: GroupedDataset, estimator: EstimatorSpec,
                  structure=CovStructure.DIAGONAL) -> ObjectiveHandle:
    """Loss and gradient on the unconstrained vector.

    For the MDPDE the loss is reported shifted by ``1 + 1/alpha`` so that it
    keeps full relative precision for small ``alpha``.
    """
    p = dataset.p
    alpha = estimator.alpha if estimator.kind is EstimatorKind.MDPDE else None

    def evaluate(theta):
        try:
            point = unpack(theta, p, structure)
            ws = lmm_workspace(dataset, point, structure, alpha)
        except (DegenerateCovariance, OverflowError, ValueError):
            return math.inf, np.full(len(theta), np.nan)
        f = float(np.mean(_per_group_loss(ws, alpha, shifted=True)))
        c, e = _weights(ws, alpha)
        gb = -(2.0 * e[:, None] * ws.Xd).mean(axis=0)
        ge = _eta_gradient(ws, point.sigma0_sq, point.g_params, structure, c, e, False)
        return f, np.concatenate([gb, ge])

    dim = p + 1 + (dataset.q if CovStructure(structure) is CovStructure.DIAGONAL
                   else dataset.q * (dataset.q + 1) // 2)
    return ObjectiveHandle(evaluate, dim)


def default_init(dataset: GroupedDataset, structure=CovStructure.DIAGONAL,
                 gaussian: bool = True) -> ParameterPoint:
    """OLS coefficients, OLS residual variance and ``G = 0.1 I``."""
    X = dataset.stacked_design()
    y = dataset.y.reshape(-1)
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    G0 = 0.1 * np.eye(dataset.q)
    g = extract_g_params(G0, structure) if dataset.q else np.zeros(0)
    if not gaussian:
        return ParameterPoint(beta, None, g)
    dof = max(len(y) - dataset.p, 1)
    s2 = float(np.sum((y - X @ beta) ** 2) / dof)
    s2 = max(s2, 1e-12 * max(1.0, float(np.var(y))))
    return ParameterPoint(beta, s2, g)


def check_rank(dataset: GroupedDataset) -> None:
    rank = dataset.design_rank()
    if rank < dataset.p:
        raise RankDeficientDesign(f"stacked design has rank {rank} < p={dataset.p}")


def fit_lmm(dataset: GroupedDataset, estimator: Optional[EstimatorSpec] = None,
            init: Optional[ParameterPoint] = None, structure=CovStructure.DIAGONAL,
            opts: Optional[OptimizerOptions] = None) -> FitResult:
    """Fit the linear mixed model by MLE or MDPDE.

    Parameters
    ----------
    dataset : GroupedDataset
    estimator : EstimatorSpec, optional
        Defaults to the MLE.
    init : ParameterPoint, optional
        Defaults to :func:`default_init` for the MLE, and to the MLE fit
        itself for the MDPDE.
    structure : CovStructure
    opts : OptimizerOptions, optional

    Returns
    -------
    FitResult
        ``loss`` is the unshifted averaged loss at the returned point.
    """
    estimator = estimator or EstimatorSpec.mle()
    check_rank(dataset)
    if init is None:
        init = default_init(dataset, structure)
        if estimator.kind is EstimatorKind.MDPDE:
            # the power-divergence surface is nearly flat at the OLS variances;
            # start from the likelihood fit instead
            init = fit_lmm(dataset, None, init, structure, opts).point
    objective = lmm_objective(dataset, estimator, structure)
    res = minimize(objective, pack(init, structure), opts)
    point = unpack(res.x, dataset.p, structure)
    if estimator.kind is EstimatorKind.MDPDE:
        loss = res.loss - (1 + 1 / estimator.alpha)
    else:
        loss = res.loss
    return FitResult(point, loss, res.grad_norm, res.iterations, res.converged,
                     res.termination.value, estimator)
