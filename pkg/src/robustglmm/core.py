"""
Data model and covariance primitives shared by the estimators.

Arrays are stacked by group: ``y`` is ``(n, m)``, ``X`` is ``(n, m, p)`` and
``Z`` is ``(n, m, q)``.  All covariance algebra goes through Cholesky factors;
no routine here forms an explicit matrix inverse.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import DatasetFormatError, DegenerateCovariance

LOG_2PI = math.log(2.0 * math.pi)
JITTER = 1e-10


class Family(str, enum.Enum):
    GAUSSIAN = "gaussian"
    BERNOULLI = "bernoulli"


class CovStructure(str, enum.Enum):
    DIAGONAL = "diagonal"
    FULL = "full"


class EstimatorKind(str, enum.Enum):
    MLE = "mle"
    MDPDE = "mdpde"


class Group(NamedTuple):
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray


@dataclass(frozen=True)
class GroupedDataset:
    """n independent groups of m observations each.

    ``seed`` optionally records the RNG key the data were drawn from, so that
    derived operations (contamination) can stay deterministic.
    """

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    seed: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        Z = np.asarray(self.Z, dtype=float)
        if y.ndim != 2 or X.ndim != 3 or Z.ndim != 3:
            raise ValueError("expected y (n, m), X (n, m, p), Z (n, m, q)")
        if X.shape[:2] != y.shape or Z.shape[:2] != y.shape:
            raise ValueError(
                f"inconsistent shapes y{y.shape} X{X.shape} Z{Z.shape}")
        for a in (y, X, Z):
            a.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)

    @classmethod
    def from_groups(cls, groups: Sequence[Group], seed=None) -> "GroupedDataset":
        if not groups:
            raise ValueError("need at least one group")
        shapes = {(np.shape(g.X), np.shape(g.Z)) for g in groups}
        if len(shapes) != 1:
            raise ValueError("all groups must share m, p and q")
        return cls(np.stack([np.asarray(g.y, float) for g in groups]),
                   np.stack([np.asarray(g.X, float) for g in groups]),
                   np.stack([np.asarray(g.Z, float) for g in groups]),
                   seed=seed)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def m(self) -> int:
        return self.y.shape[1]

    @property
    def p(self) -> int:
        return self.X.shape[2]

    @property
    def q(self) -> int:
        return self.Z.shape[2]

    @property
    def groups(self) -> list:
        return [Group(self.y[i], self.X[i], self.Z[i]) for i in range(self.n)]

    def replace(self, **changes) -> "GroupedDataset":
        kw = dict(y=self.y, X=self.X, Z=self.Z, seed=self.seed)
        kw.update(changes)
        return GroupedDataset(**kw)

    def stacked_design(self) -> np.ndarray:
        return self.X.reshape(-1, self.p)

    def design_rank(self) -> int:
        return int(np.linalg.matrix_rank(self.stacked_design()))


@dataclass(frozen=True)
class ModelSpec:
    family: Family = Family.GAUSSIAN
    cov_structure: CovStructure = CovStructure.DIAGONAL
    m: int = 6
    p: int = 5
    q: int = 2

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "cov_structure", CovStructure(self.cov_structure))

    @property
    def n_g_params(self) -> int:
        return n_g_params(self.q, self.cov_structure)


@dataclass(frozen=True)
class EstimatorSpec:
    kind: EstimatorKind = EstimatorKind.MLE
    alpha: Optional[float] = None

    def __post_init__(self):
        kind = EstimatorKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is EstimatorKind.MDPDE:
            if self.alpha is None or not self.alpha > 0:
                raise ValueError("MDPDE needs alpha > 0")
            object.__setattr__(self, "alpha", float(self.alpha))
        elif self.alpha is not None:
            raise ValueError("alpha is only meaningful for MDPDE")

    @classmethod
    def mle(cls) -> "EstimatorSpec":
        return cls(EstimatorKind.MLE)

    @classmethod
    def mdpde(cls, alpha: float) -> "EstimatorSpec":
        return cls(EstimatorKind.MDPDE, alpha)

    @property
    def label(self) -> str:
        if self.kind is EstimatorKind.MLE:
            return "MLE"
        return f"MDPDE(alpha={self.alpha:g})"


@dataclass(frozen=True)
class ParameterPoint:
    """Fixed effects plus variance components on their natural scale.

    ``g_params`` holds the diagonal variances for a diagonal ``G`` and the
    log-Cholesky vector (column-major lower triangle, log diagonal) for a
    full ``G``.  ``sigma0_sq`` is ``None`` for the Bernoulli family.
    """

    beta: np.ndarray
    sigma0_sq: Optional[float]
    g_params: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, float).reshape(-1))
        object.__setattr__(self, "g_params",
                           np.asarray(self.g_params, float).reshape(-1))
        if self.sigma0_sq is not None:
            s = float(self.sigma0_sq)
            if not s > 0:
                raise ValueError("sigma0_sq must be positive")
            object.__setattr__(self, "sigma0_sq", s)


def n_g_params(q: int, structure: CovStructure) -> int:
    if CovStructure(structure) is CovStructure.DIAGONAL:
        return q
    return q * (q + 1) // 2


def tril_colmajor(q: int):
    """Row/column indices of the lower triangle in column-major order."""
    r, c = np.triu_indices(q)
    return c, r


def cholesky(V: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``V`` (or a stack of matrices).

    On failure the factorization is retried once with ``1e-10 * trace/m``
    added to the diagonal before giving up.
    """
    V = np.asarray(V, dtype=float)
    try:
        L = np.linalg.cholesky(V)
        if np.all(np.isfinite(L)):
            return L
    except np.linalg.LinAlgError:
        pass
    m = V.shape[-1]
    scale = np.trace(V, axis1=-2, axis2=-1)[..., None, None] / m
    try:
        L = np.linalg.cholesky(V + JITTER * scale * np.eye(m))
    except np.linalg.LinAlgError as err:
        raise DegenerateCovariance(str(err)) from None
    if not np.all(np.isfinite(L)):
        raise DegenerateCovariance("non-finite Cholesky factor")
    return L


def logchol_to_L(theta: np.ndarray, q: int) -> np.ndarray:
    L = np.zeros((q, q))
    rows, cols = tril_colmajor(q)
    L[rows, cols] = theta
    idx = np.arange(q)
    L[idx, idx] = np.exp(L[idx, idx])
    return L


def assemble_G(g_params, structure=CovStructure.DIAGONAL, q: Optional[int] = None):
    """Random-effect covariance ``G`` from its parameter vector.

    Parameters
    ----------
    g_params : array_like
        Diagonal variances (``DIAGONAL``) or log-Cholesky entries (``FULL``).
    structure : CovStructure
    q : int, optional
        Dimension; inferred from the length of ``g_params`` when omitted.

    Raises
    ------
    DegenerateCovariance
        If the resulting matrix is not numerically positive definite.
    """
    structure = CovStructure(structure)
    g = np.asarray(g_params, dtype=float).reshape(-1)
    if structure is CovStructure.DIAGONAL:
        if q is not None and len(g) != q:
            raise ValueError(f"expected {q} diagonal variances, got {len(g)}")
        if not np.all(np.isfinite(g)) or np.any(g <= 0):
            raise DegenerateCovariance(f"non-positive variance in {g}")
        G = np.diag(g)
    else:
        if q is None:
            q = int(round((math.sqrt(8 * len(g) + 1) - 1) / 2))
        if len(g) != q * (q + 1) // 2:
            raise ValueError(f"expected {q * (q + 1) // 2} log-Cholesky entries")
        L = logchol_to_L(g, q)
        G = L @ L.T
    if G.size:
        cholesky(G)
    return G


def extract_g_params(G, structure=CovStructure.DIAGONAL) -> np.ndarray:
    """Inverse of :func:`assemble_G`."""
    G = np.asarray(G, dtype=float)
    if CovStructure(structure) is CovStructure.DIAGONAL:
        return np.diag(G).copy()
    q = G.shape[0]
    L = cholesky(G)
    idx = np.arange(q)
    L[idx, idx] = np.log(L[idx, idx])
    return L[tril_colmajor(q)]


def assemble_V(Z, sigma0_sq: float, G) -> np.ndarray:
    """Marginal covariance ``sigma0_sq * I + Z G Z^T``; ``Z`` may be stacked."""
    Z = np.asarray(Z, dtype=float)
    G = np.asarray(G, dtype=float)
    m, q = Z.shape[-2:]
    if G.shape != (q, q):
        raise ValueError(f"G has shape {G.shape}, expected {(q, q)}")
    V = Z @ G @ np.swapaxes(Z, -1, -2)
    V = 0.5 * (V + np.swapaxes(V, -1, -2))
    return V + sigma0_sq * np.eye(m)


def _forward(L, b):
    """Solve ``L x = b`` for lower-triangular (possibly stacked) ``L``."""
    if L.ndim == 2:
        from scipy.linalg import solve_triangular
        return solve_triangular(L, b, lower=True)
    return np.linalg.solve(L, b)


def mahalanobis_sq(y, mean, V) -> float:
    """``(y - mean)^T V^{-1} (y - mean)`` via a Cholesky solve."""
    L = cholesky(V)
    w = _forward(L, np.asarray(y, float) - np.asarray(mean, float))
    return float(w @ w)


def mvn_logpdf(y, mean, V) -> float:
    r = np.asarray(y, float) - np.asarray(mean, float)
    L = cholesky(V)
    w = _forward(L, r)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * (len(r) * LOG_2PI + logdet + w @ w))


# --- CSV ------------------------------------------------------------------

def write_dataset_csv(dataset: GroupedDataset, path) -> None:
    p, q = dataset.p, dataset.q
    header = ["group", "y"] + [f"x{k + 1}" for k in range(p)] \
        + [f"z{k + 1}" for k in range(q)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.n):
            for j in range(dataset.m):
                row = [str(i), repr(float(dataset.y[i, j]))]
                row += [repr(float(v)) for v in dataset.X[i, j]]
                row += [repr(float(v)) for v in dataset.Z[i, j]]
                w.writerow(row)


def read_dataset_csv(path) -> GroupedDataset:
    """Read the ``group,y,x1..xp,z1..zq`` format; groups must be contiguous
    and all of the same size."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["group", "y"]:
        raise DatasetFormatError(f"{path}: header must start with 'group,y'")
    xcols = [h for h in header[2:] if h.startswith("x")]
    zcols = [h for h in header[2:] if h.startswith("z")]
    expect = [f"x{k + 1}" for k in range(len(xcols))] \
        + [f"z{k + 1}" for k in range(len(zcols))]
    if header[2:] != expect or not xcols:
        raise DatasetFormatError(f"{path}: bad column layout {header}")
    p = len(xcols)
    ids, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DatasetFormatError(f"{path}:{lineno}: expected {len(header)} fields")
        try:
            ids.append(int(row[0]))
            values.append([float(v) for v in row[1:]])
        except ValueError as err:
            raise DatasetFormatError(f"{path}:{lineno}: {err}") from None
    if not ids:
        raise DatasetFormatError(f"{path}: no data rows")
    ids = np.asarray(ids)
    if np.any(np.diff(ids) < 0):
        raise DatasetFormatError(f"{path}: rows not sorted by group id")
    _, counts = np.unique(ids, return_counts=True)
    if np.any(counts != counts[0]):
        raise DatasetFormatError(f"{path}: ragged groups (sizes {sorted(set(counts))})")
    n, m = len(counts), int(counts[0])
    vals = np.asarray(values).reshape(n, m, -1)
    return GroupedDataset(vals[:, :, 0], vals[:, :, 1:1 + p], vals[:, :, 1 + p:])


# --- unconstrained coordinates -------------------------------------------

def g_unconstrained(g_params, structure) -> np.ndarray:
    g = np.asarray(g_params, float)
    if CovStructure(structure) is CovStructure.DIAGONAL:
        return np.log(g)
    return g.copy()


def g_natural(g_free, structure) -> np.ndarray:
    g = np.asarray(g_free, float)
    if CovStructure(structure) is CovStructure.DIAGONAL:
        # overflow yields inf, which the covariance factorization rejects
        with np.errstate(over="ignore"):
            return np.exp(g)
    return g.copy()


def pack(point: ParameterPoint, structure) -> np.ndarray:
    """Optimizer vector ``[beta, log sigma0_sq?, unconstrained g]``."""
    parts = [point.beta]
    if point.sigma0_sq is not None:
        parts.append([math.log(point.sigma0_sq)])
    parts.append(g_unconstrained(point.g_params, structure))
    return np.concatenate(parts)


def unpack(theta, p: int, structure, gaussian: bool = True) -> ParameterPoint:
    theta = np.asarray(theta, float)
    beta = theta[:p]
    if gaussian:
        return ParameterPoint(beta, math.exp(theta[p]),
                              g_natural(theta[p + 1:], structure))
    return ParameterPoint(beta, None, g_natural(theta[p:], structure))


@dataclass(frozen=True)
class FitResult:
    point: ParameterPoint
    loss: float
    grad_norm: float
    iterations: int
    converged: bool
    termination: str
    estimator: Optional[EstimatorSpec] = None

    def G(self, structure=CovStructure.DIAGONAL) -> np.ndarray:
        return assemble_G(self.point.g_params, structure, None) \
            if self.point.g_params.size else np.zeros((0, 0))
