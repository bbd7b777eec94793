"""Exception hierarchy and warning categories shared across the package."""


class GensftError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(GensftError):
    """Operands have incompatible shapes."""


class NonPositiveDepth(GensftError):
    """A point fell behind (or onto) a perspective camera plane."""


class DegenerateMatrix(GensftError):
    """Matrix does not determine a unique nearest rotation."""


class DegenerateConfiguration(GensftError):
    """Point set too degenerate for rigid alignment (e.g. collinear)."""


class DegenerateCloud(GensftError):
    """2D point set too degenerate for boundary extraction."""


class InsufficientSamples(GensftError):
    """Too few samples to build a shape model."""


class InconsistentPointCounts(GensftError):
    """Population samples disagree on point count."""


class ParseError(GensftError):
    """A data file failed to parse; message carries field diagnostics."""


class SolverInfeasible(GensftError):
    """The conic backend reported the problem infeasible or unbounded."""


class ConfigInfeasible(GensftError):
    """Scenario configuration cannot be realised (e.g. more correspondences than points)."""


class ZeroVarianceWarning(UserWarning):
    """Shape population has no variation; a zero basis was substituted."""


class GimbalWarning(UserWarning):
    """Euler decomposition near gimbal lock; angle values are unstable."""


class HighRankWarning(UserWarning):
    """SDP solution is not numerically rank one; extraction is approximate."""


class SignAmbiguityWarning(UserWarning):
    """Extracted rotation block had negative determinant; sign resolved by cost."""


class NonConvergenceWarning(UserWarning):
    """Iterative refinement hit its iteration cap before the pair set settled."""
