"""Exception and warning types raised by phisd."""


class PhisdError(Exception):
    """Base class for all library errors."""


class ContractViolation(PhisdError, ValueError):
    """Inputs violate a documented precondition (shape, symmetry, range)."""


class DefinitenessError(PhisdError, ValueError):
    """A matrix that must be symmetric positive definite is not."""


class RankDeficiencyError(PhisdError, ValueError):
    """Orthonormalization met a (numerically) dependent column."""

    def __init__(self, column, norm):
        self.column = column
        self.norm = norm
        super().__init__(
            f"column {column} is numerically dependent on earlier columns "
            f"(M-norm after projection {norm:.3e})"
        )


class FrameCollapseError(RankDeficiencyError):
    """The frame lost rank during the inner eigenvector iteration.

    Usually the frame step size ``tau`` is too large for the spectrum of
    ``M^{-1} H``.
    """

    def __init__(self, column, norm):
        super().__init__(column, norm)
        self.args = (str(self.args[0]) + "; frame step size tau is probably too large",)


class ParameterError(PhisdError, ValueError):
    """A preconditioner or solver parameter is infeasible."""


class ConfigError(PhisdError, ValueError):
    """An experiment configuration failed validation."""


class DegenerateSpectrumWarning(UserWarning):
    """A generalized eigenvalue lies within the degeneracy tolerance of zero."""
