"""Exception hierarchy shared by every module of the package."""


class RobustGLMMError(Exception):
    """Base class; ``str(type(err).__name__)`` is the machine-readable class."""


class DegenerateCovariance(RobustGLMMError):
    """A covariance matrix failed its Cholesky factorization (after jitter)."""


class RankDeficientDesign(RobustGLMMError):
    pass


class NonFiniteObjective(RobustGLMMError):
    pass


class InnerModeDivergence(RobustGLMMError):
    """The inner Newton search for the random-effect mode did not converge."""


class EnumerationTooLarge(RobustGLMMError):
    pass


class ExperimentDegenerate(RobustGLMMError):
    """More than 10% of the fits in one experiment cell failed."""


class InsufficientGrid(RobustGLMMError):
    pass


class InsufficientDraws(RobustGLMMError):
    pass


class DatasetFormatError(RobustGLMMError):
    pass


class ConfigError(RobustGLMMError):
    pass


class UnsupportedDimension(RobustGLMMError):
    """An explicit Kronecker construction was requested for m > 6."""
