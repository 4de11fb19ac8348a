"""Exception types shared across the package."""


class ProjkitError(Exception):
    """Base class for numerical and modeling failures raised by projkit."""


class SingularMatrixError(ProjkitError):
    """A linear system is rank deficient and no regularization was requested."""


class EmptyScreenError(ProjkitError):
    """Correlation screening discarded every feature."""


class ConvergenceError(ProjkitError):
    """An iterative solver failed to reach its tolerance."""
