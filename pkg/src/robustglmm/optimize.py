"""
BFGS with a backtracking Armijo line search, plus a central-difference
gradient used both as a test oracle and by the logistic objectives.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteObjective


class Termination(str, enum.Enum):
    GRAD_TOL = "GradTol"
    STEP_TOL = "StepTol"
    MAX_ITER = "MaxIter"
    LINE_SEARCH_FAIL = "LineSearchFail"


@dataclass(frozen=True)
class OptimizerOptions:
    gtol: float = 1e-6
    step_tol: float = 1e-10
    max_iter: int = 500
    n_starts: int = 1
    c1: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 60
    perturbation: float = 0.1
    # for losses bounded below by zero: scale gtol by min(1, loss) and never
    # accept a point where the loss has numerically reached zero, since its
    # infimum is then only approached at infinity
    loss_relative_gtol: bool = False
    loss_floor: float = 1e-10


@dataclass(frozen=True)
class ObjectiveHandle:
    """``eval(x) -> (loss, gradient)`` on an unconstrained vector of length
    ``dim``.  Must be reentrant."""

    eval: Callable[[np.ndarray], tuple]
    dim: int


@dataclass(frozen=True)
class OptimizeResult:
    x: np.ndarray
    loss: float
    grad: np.ndarray
    iterations: int
    termination: Termination
    n_evals: int

    @property
    def grad_norm(self) -> float:
        return float(np.max(np.abs(self.grad))) if self.grad.size else 0.0

    @property
    def converged(self) -> bool:
        return self.termination in (Termination.GRAD_TOL, Termination.STEP_TOL)


def _finite(f, g) -> bool:
    return np.isfinite(f) and np.all(np.isfinite(g))


def _bfgs(objective: ObjectiveHandle, x0, opts: OptimizerOptions) -> OptimizeResult:
    x = np.array(x0, dtype=float)
    f, g = objective.eval(x)
    f = float(f)
    g = np.asarray(g, dtype=float)
    n_evals = 1
    if not _finite(f, g):
        raise NonFiniteObjective(f"objective not finite at the initial point: {f}")
    n = x.size
    H = np.eye(n)
    scaled = False
    it = 0
    termination = Termination.MAX_ITER

    def small(grad, f):
        if not opts.loss_relative_gtol:
            return np.max(np.abs(grad)) <= opts.gtol
        return f > opts.loss_floor and np.max(np.abs(grad)) <= opts.gtol * min(1.0, f)

    def at_floor(f):
        return opts.loss_relative_gtol and f <= opts.loss_floor

    while True:
        if n == 0 or small(g, f):
            termination = Termination.GRAD_TOL
            break
        if it >= opts.max_iter:
            termination = Termination.MAX_ITER
            break
        direction = -H @ g
        slope = float(g @ direction)
        if not slope < 0:
            # H lost positive definiteness numerically; fall back to steepest descent
            H = np.eye(n)
            scaled = False
            direction = -g
            slope = -float(g @ g)
        step = 1.0
        accepted = False
        for _ in range(opts.max_backtracks):
            x_new = x + step * direction
            f_new, g_new = objective.eval(x_new)
            n_evals += 1
            f_new = float(f_new)
            if _finite(f_new, g_new) and f_new <= f + opts.c1 * step * slope:
                accepted = True
                break
            step *= opts.shrink
        if not accepted:
            if scaled or not np.allclose(H, np.eye(n)):
                # one restart from a fresh Hessian approximation before giving up
                H = np.eye(n)
                scaled = False
                continue
            termination = Termination.LINE_SEARCH_FAIL
            break
        g_new = np.asarray(g_new, dtype=float)
        s = x_new - x
        yk = g_new - g
        x, f, g = x_new, f_new, g_new
        it += 1
        sy = float(s @ yk)
        if sy > 1e-12 * np.sqrt(float(s @ s) * float(yk @ yk)):
            if not scaled:
                H = np.eye(n) * (sy / float(yk @ yk))
                scaled = True
            rho = 1.0 / sy
            Hy = H @ yk
            H = (H - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                 + (rho * rho * float(yk @ Hy) + rho) * np.outer(s, s))
        if (np.max(np.abs(s)) <= opts.step_tol * (1.0 + np.max(np.abs(x)))
                and not at_floor(f)):
            termination = Termination.GRAD_TOL if small(g, f) else Termination.STEP_TOL
            break
    return OptimizeResult(x, f, g, it, termination, n_evals)


def minimize(objective: ObjectiveHandle, init, opts: Optional[OptimizerOptions] = None
             ) -> OptimizeResult:
    """Minimize a smooth objective from ``init``.

    With ``opts.n_starts == 3`` two extra starts at ``init +/- perturbation``
    (applied to every coordinate) are run and the lowest loss is kept; ties
    go to the earliest start, so the result is deterministic.

    Raises
    ------
    NonFiniteObjective
        If the objective is not finite at ``init``.
    """
    opts = opts or OptimizerOptions()
    init = np.asarray(init, dtype=float)
    if init.shape != (objective.dim,):
        raise ValueError(f"init has shape {init.shape}, expected ({objective.dim},)")
    if not np.all(np.isfinite(init)):
        raise NonFiniteObjective("non-finite initial point")
    best = _bfgs(objective, init, opts)
    if opts.n_starts > 1:
        starts = [init + opts.perturbation, init - opts.perturbation]
        for x0 in starts[:opts.n_starts - 1]:
            try:
                res = _bfgs(objective, x0, opts)
            except NonFiniteObjective:
                continue
            if res.loss < best.loss:
                best = res
    return best


def finite_diff_gradient(loss: Callable[[np.ndarray], float], x, h: float = 1e-6
                         ) -> np.ndarray:
    """Central differences with per-coordinate step ``h * max(1, |x_j|)``."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for j in range(x.size):
        hj = h * max(1.0, abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += hj
        xm[j] -= hj
        fp, fm = float(loss(xp)), float(loss(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteObjective(f"loss not finite near coordinate {j}")
        grad[j] = (fp - fm) / (xp[j] - xm[j])
    return grad
