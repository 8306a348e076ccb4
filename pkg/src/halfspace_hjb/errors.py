"""Exception types. Each carries the fixed message used in diagnostics."""


class HalfSpaceError(ValueError):
    """Base class for all package errors."""


class ModelError(HalfSpaceError):
    pass


class KernelDomainError(HalfSpaceError):
    def __init__(self, msg: str = "kernel domain violation"):
        super().__init__(msg)


class QuadratureError(HalfSpaceError):
    def __init__(self, msg: str = "quadrature underresolved"):
        super().__init__(msg)


class BoundaryGradientError(HalfSpaceError):
    def __init__(self, msg: str = "gradient requested on boundary"):
        super().__init__(msg)


class GradingError(HalfSpaceError):
    def __init__(self, msg: str = "grading insufficient"):
        super().__init__(msg)


class NoContractionError(HalfSpaceError):
    def __init__(self, msg: str = "no contraction: check β / constants"):
        super().__init__(msg)


class InadmissibleControlError(HalfSpaceError):
    def __init__(self, msg: str = "inadmissible control"):
        super().__init__(msg)


class DomainError(HalfSpaceError):
    def __init__(self, msg: str = "initial state outside domain"):
        super().__init__(msg)


class PositivityError(HalfSpaceError):
    def __init__(self, msg: str = "principal eigenvector positivity failed (refine n_modes)"):
        super().__init__(msg)


class GridTooSmallWarning(UserWarning):
    """Quadrature mass fell outside the solver grid and was extrapolated flat."""


class ContractionWarning(UserWarning):
    """Observed Picard ratio lies in (1/2, 1)."""
