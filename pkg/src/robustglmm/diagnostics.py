"""
Numerical checks of the regularity conditions behind the consistency
results for the linear mixed model, and information matrices.

Variance-component coordinates are natural throughout: ``sigma0_sq``
followed by the entries of ``G`` (its diagonal, or the lower triangle in
column-major order for a full ``G``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .core import (CovStructure, GroupedDataset, ParameterPoint, assemble_G,
                   assemble_V, cholesky, tril_colmajor)
from .errors import InsufficientDraws, UnsupportedDimension
from .lmm import mdpde_constants, per_group_gradients

PSD_RTOL = 1e-8
MAX_KRONECKER_M = 6


@dataclass(frozen=True)
class AssumptionReport:
    """Verdict for one condition.

    ``evidence`` holds the quantities the verdict rests on, for example
    ``rank``, ``min_eigenvalue`` or ``violation_count``.  ``draws`` is the
    Monte-Carlo sample size (0 for exact checks).
    """

    name: str
    holds: bool
    evidence: dict = field(default_factory=dict)
    draws: int = 0

    def line(self) -> str:
        parts = [f"name={self.name}", f"holds={str(self.holds).lower()}"]
        for key, val in self.evidence.items():
            parts.append(f"{key}={val:.6g}" if isinstance(val, float) else f"{key}={val}")
        parts.append(f"draws={self.draws}")
        return " ".join(parts)


@dataclass(frozen=True)
class InformationEstimate:
    """Monte-Carlo estimate of ``E[grad rho grad rho^T]`` averaged over groups."""

    matrix: np.ndarray
    se: np.ndarray                  # elementwise Monte-Carlo standard errors
    min_eigenvalue: float
    min_eigenvalue_se: float
    draws: int
    closed_form_beta: Optional[np.ndarray] = None


def _psd(eigs: np.ndarray) -> bool:
    return bool(eigs.min() >= -PSD_RTOL * max(abs(eigs).max(), np.finfo(float).tiny))


def marginal_covariances(dataset: GroupedDataset, point: ParameterPoint,
                         structure=CovStructure.DIAGONAL) -> np.ndarray:
    """Stack ``(n, m, m)`` of ``V_i = sigma0_sq I + Z_i G Z_i^T``."""
    q = dataset.q
    G = assemble_G(point.g_params, structure, q) if q else np.zeros((0, 0))
    return assemble_V(dataset.Z, point.sigma0_sq, G)


def _inverse_stack(V: np.ndarray) -> np.ndarray:
    L = cholesky(V)
    Li = np.linalg.solve(L, np.broadcast_to(np.eye(V.shape[-1]), V.shape))
    return np.swapaxes(Li, -1, -2) @ Li


def _variance_directions(Z: np.ndarray, structure) -> list:
    """Derivatives of each ``V_i`` with respect to the natural coordinates."""
    n, m, q = Z.shape
    dirs = [np.broadcast_to(np.eye(m), (n, m, m))]
    if CovStructure(structure) is CovStructure.DIAGONAL:
        for r in range(q):
            dirs.append(np.einsum("ni,nj->nij", Z[:, :, r], Z[:, :, r]))
    else:
        for r, c in zip(*tril_colmajor(q)):
            outer = np.einsum("ni,nj->nij", Z[:, :, r], Z[:, :, c])
            dirs.append(outer if r == c else outer + np.swapaxes(outer, 1, 2))
    return dirs


def mle_information_lmm(dataset: GroupedDataset, point: ParameterPoint,
                        structure=CovStructure.DIAGONAL) -> np.ndarray:
    """Fisher information per group, averaged over groups.

    Block diagonal: ``X^T V^{-1} X`` for ``beta`` and
    ``tr(V^{-1} U_j V^{-1} U_k) / 2`` for the variance components, where
    ``U_j`` is the derivative of ``V`` along coordinate ``j``.
    """
    Vinv = _inverse_stack(marginal_covariances(dataset, point, structure))
    X = dataset.X
    Ibb = np.einsum("nji,njk,nkl->il", X, Vinv, X) / dataset.n
    W = [Vinv @ U for U in _variance_directions(dataset.Z, structure)]
    k = len(W)
    Iee = np.empty((k, k))
    for a in range(k):
        for b in range(a, k):
            Iee[a, b] = Iee[b, a] = 0.5 * np.einsum("nij,nji->", W[a], W[b]) / dataset.n
    p = dataset.p
    out = np.zeros((p + k, p + k))
    out[:p, :p] = Ibb
    out[p:, p:] = Iee
    return out


def mdpde_beta_information_closed_form(dataset: GroupedDataset, point: ParameterPoint,
                                       alpha: float, structure=CovStructure.DIAGONAL
                                       ) -> np.ndarray:
    """``alpha^2 L2^2 |V|^{-alpha} (1+2 alpha)^{-(1+m/2)} X^T V^{-1} X``,
    averaged over groups."""
    m = dataset.m
    _, L2 = mdpde_constants(m, alpha)
    V = marginal_covariances(dataset, point, structure)
    _, logdet = np.linalg.slogdet(V)
    Vinv = _inverse_stack(V)
    scale = alpha ** 2 * L2 ** 2 * np.exp(-alpha * logdet) * (1 + 2 * alpha) ** (-(1 + m / 2))
    X = dataset.X
    return np.einsum("n,nji,njk,nkl->il", scale, X, Vinv, X) / dataset.n


def _mc_information(dataset, point, alpha, mc_draws, seed, structure, chunk=256):
    if mc_draws < 2:
        raise InsufficientDraws(f"need at least 2 Monte-Carlo draws, got {mc_draws}")
    n, m = dataset.n, dataset.m
    V = marginal_covariances(dataset, point, structure)
    L = cholesky(V)
    mean = dataset.X @ point.beta
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 7])))
    per_draw = []
    done = 0
    while done < mc_draws:
        b = min(chunk, mc_draws - done)
        z = rng.standard_normal((b, n, m))
        y = mean + np.einsum("nij,bnj->bni", L, z)
        tiled = GroupedDataset(y.reshape(b * n, m),
                               np.broadcast_to(dataset.X, (b,) + dataset.X.shape).reshape(b * n, m, -1),
                               np.broadcast_to(dataset.Z, (b,) + dataset.Z.shape).reshape(b * n, m, -1))
        g = per_group_gradients(tiled, point, alpha, structure).reshape(b, n, -1)
        per_draw.append(np.einsum("bni,bnj->bij", g, g) / n)
        done += b
    S = np.concatenate(per_draw)
    est = S.mean(axis=0)
    se = S.std(axis=0, ddof=1) / np.sqrt(mc_draws)
    eigs, vecs = np.linalg.eigh(est)
    v = vecs[:, 0]
    lam_se = float(np.einsum("i,bij,j->b", v, S, v).std(ddof=1) / np.sqrt(mc_draws))
    return InformationEstimate(est, se, float(eigs[0]), lam_se, mc_draws)


def mdpde_information_lmm(dataset: GroupedDataset, point: ParameterPoint, alpha: float,
                          mc_draws: int = 10_000, seed: int = 0,
                          structure=CovStructure.DIAGONAL) -> InformationEstimate:
    """Monte-Carlo estimate of ``E[grad rho grad rho^T]`` for the MDPDE loss.

    Responses are drawn from the model at ``point`` with the design held
    fixed, and the analytic per-group gradient is used.  The ``beta`` block
    of the closed form is attached for comparison.

    Raises
    ------
    InsufficientDraws
        If ``mc_draws < 2``.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    est = _mc_information(dataset, point, alpha, mc_draws, seed, structure)
    closed = mdpde_beta_information_closed_form(dataset, point, alpha, structure)
    return InformationEstimate(est.matrix, est.se, est.min_eigenvalue,
                               est.min_eigenvalue_se, est.draws, closed)


# --- conditions -----------------------------------------------------------

def check_A3(dataset: GroupedDataset, point: ParameterPoint, alpha: Optional[float] = None,
             mc_draws: int = 10_000, seed: int = 0,
             structure=CovStructure.DIAGONAL) -> AssumptionReport:
    """Information matrix finite and positive definite at ``point``.

    Exact for the MLE (``alpha=None``); for the MDPDE the Monte-Carlo
    estimate must have its smallest eigenvalue above 3 standard errors.
    """
    if alpha is None:
        eigs = np.linalg.eigvalsh(mle_information_lmm(dataset, point, structure))
        holds = bool(np.all(np.isfinite(eigs)) and eigs[0] > PSD_RTOL * eigs[-1])
        return AssumptionReport("A3", holds, {"min_eigenvalue": float(eigs[0])})
    est = mdpde_information_lmm(dataset, point, alpha, mc_draws, seed, structure)
    return AssumptionReport("A3", est.min_eigenvalue > 3 * est.min_eigenvalue_se,
                            {"min_eigenvalue": est.min_eigenvalue,
                             "min_eigenvalue_se": est.min_eigenvalue_se}, mc_draws)


def check_B1(dataset: GroupedDataset, point: ParameterPoint,
             structure=CovStructure.DIAGONAL) -> AssumptionReport:
    """Every ``V_i`` positive definite and the stacked design of full column rank."""
    V = marginal_covariances(dataset, point, structure)
    failed = 0
    for Vi in V:
        try:
            np.linalg.cholesky(Vi)
        except np.linalg.LinAlgError:
            failed += 1
    rank = dataset.design_rank()
    return AssumptionReport("B1", failed == 0 and rank == dataset.p,
                            {"rank": rank, "p": dataset.p, "non_pd_groups": failed})


def check_B3(dataset: GroupedDataset, point: ParameterPoint, alpha: float,
             n_probe: Optional[int] = None,
             structure=CovStructure.DIAGONAL) -> AssumptionReport:
    """Per group, ``X^T V^{-1} X - alpha X^T d d^T X`` must be PSD.

    Parameters
    ----------
    n_probe : int, optional
        Examine only the first ``n_probe`` groups (all by default).
    """
    if n_probe is not None:
        dataset = GroupedDataset(dataset.y[:n_probe], dataset.X[:n_probe], dataset.Z[:n_probe])
    V = marginal_covariances(dataset, point, structure)
    L = cholesky(V)
    WX = np.linalg.solve(L, dataset.X)
    wr = np.linalg.solve(L, (dataset.y - dataset.X @ point.beta)[:, :, None])
    A = np.swapaxes(WX, 1, 2) @ WX
    b = (np.swapaxes(WX, 1, 2) @ wr)[:, :, 0]          # X^T V^{-1} r
    M = A - alpha * np.einsum("ni,nj->nij", b, b)
    eigs = np.linalg.eigvalsh(M)
    bad = sum(not _psd(e) for e in eigs)
    scale = np.abs(eigs).max(axis=1)
    return AssumptionReport("B3", bad == 0,
                            {"violation_count": bad, "groups": dataset.n,
                             "min_relative_eigenvalue": float((eigs[:, 0] / scale).min())})


def b3_first_violation(dataset: GroupedDataset, point: ParameterPoint,
                       alphas: Sequence[float], structure=CovStructure.DIAGONAL):
    """Smallest ``alpha`` in the sorted grid at which B3 fails, or ``None``."""
    for a in sorted(alphas):
        if not check_B3(dataset, point, a, structure=structure).holds:
            return a
    return None


def _as_stack(V) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    if V.ndim == 2:
        V = V[None]
    if V.shape[-1] > MAX_KRONECKER_M:
        raise UnsupportedDimension(
            f"explicit m^2 x m^2 construction limited to m <= {MAX_KRONECKER_M}, got m={V.shape[-1]}")
    return V


def b4_matrix(V: np.ndarray) -> np.ndarray:
    """``(V^{-1} kron V^{-1}) vec(V) vec(V^{-1})^T`` for one ``(m, m)`` matrix."""
    Vinv = _inverse_stack(np.asarray(V, float)[None])[0]
    vec = lambda A: A.reshape(-1, order="F")
    return np.kron(Vinv, Vinv) @ np.outer(vec(V), vec(Vinv))


def check_B4(V) -> AssumptionReport:
    """PSD test of the symmetric part of :func:`b4_matrix`.

    ``V`` is a single marginal covariance or a stack of them (one per
    group); the condition must hold for each.
    """
    V = _as_stack(V)
    bad = 0
    worst = np.inf
    for Vi in V:
        K = b4_matrix(Vi)
        eigs = np.linalg.eigvalsh(0.5 * (K + K.T))
        bad += not _psd(eigs)
        worst = min(worst, float(eigs[0]))
    return AssumptionReport("B4", bad == 0,
                            {"violation_count": bad, "min_eigenvalue": worst})


def _sym_coordinates(d: np.ndarray) -> np.ndarray:
    """Coordinates of ``vec(d d^T)`` in an orthonormal basis of symmetric matrices."""
    m = d.shape[-1]
    i, j = np.triu_indices(m)
    w = np.where(i == j, 1.0, np.sqrt(2.0))
    return d[..., i] * d[..., j] * w


def b5_matrix(V: np.ndarray, alpha: float, mc_draws: int, seed: int = 0):
    """Monte-Carlo ``E[exp(-alpha r^T V^{-1} r) (d d^T) kron (d d^T)]`` with
    ``r ~ N(0, V)``, ``d = V^{-1} r``.

    Returns ``(full, sym, per_draw_sym)`` where ``full`` is the ``m^2 x m^2``
    estimate and ``sym`` its restriction to the symmetric-matrix subspace.
    """
    if mc_draws < 2:
        raise InsufficientDraws(f"need at least 2 Monte-Carlo draws, got {mc_draws}")
    V = np.asarray(V, float)
    m = V.shape[0]
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 5])))
    z = rng.standard_normal((mc_draws, m))
    L = cholesky(V)
    d = solve_triangular(L.T, z.T, lower=False).T      # V^{-1} L z
    w = np.exp(-alpha * np.einsum("bi,bi->b", z, z))
    dd = np.einsum("bi,bj->bij", d, d).reshape(mc_draws, -1)
    full = np.einsum("b,bi,bj->ij", w, dd, dd) / mc_draws
    ks = _sym_coordinates(d)
    sym = np.einsum("b,bi,bj->ij", w, ks, ks) / mc_draws
    return full, sym, (w, ks)


def check_B5(V, alpha: float, mc_draws: int = 10_000, seed: int = 0) -> AssumptionReport:
    """Positive definiteness of the B5 matrix at ``V``, judged at 3 Monte-Carlo SEs.

    ``(d d^T) kron (d d^T)`` annihilates antisymmetric directions, so the
    matrix has rank at most ``m(m+1)/2``; definiteness is tested on the
    subspace of symmetric matrices.  ``V`` may be a stack, one per group.

    Raises
    ------
    InsufficientDraws
        If ``mc_draws < 2``.
    UnsupportedDimension
        If ``m > 6``.
    """
    if mc_draws < 2:
        raise InsufficientDraws(f"need at least 2 Monte-Carlo draws, got {mc_draws}")
    V = _as_stack(V)
    bad = 0
    worst, worst_se = np.inf, 0.0
    for g, Vi in enumerate(V):
        _, sym, (w, ks) = b5_matrix(Vi, alpha, mc_draws, seed + g)
        eigs, vecs = np.linalg.eigh(sym)
        v = vecs[:, 0]
        se = float((w * (ks @ v) ** 2).std(ddof=1) / np.sqrt(mc_draws))
        if not eigs[0] > 3 * se:
            bad += 1
        if eigs[0] < worst:
            worst, worst_se = float(eigs[0]), se
    return AssumptionReport("B5", bad == 0,
                            {"violation_count": bad, "min_eigenvalue": worst,
                             "min_eigenvalue_se": worst_se}, mc_draws)
