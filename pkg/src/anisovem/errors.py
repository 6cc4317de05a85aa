"""Exception hierarchy shared by all modules."""


class AnisoVemError(Exception):
    """Base class for every error raised by the package."""


class DegenerateElement(AnisoVemError):
    """Polygon with (numerically) zero area."""


class NotSPD(AnisoVemError):
    """Symmetric 2x2 matrix that is not positive definite."""


class ClipFailed(AnisoVemError):
    """Cutting line does not split the polygon interior."""


class NotConvex(AnisoVemError):
    pass


class UnsupportedDegree(AnisoVemError):
    pass


class IllConditionedElement(AnisoVemError):
    """Monomial Gram matrix of a cell is rank deficient."""


class SolveFailed(AnisoVemError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class MissingGTensor(AnisoVemError):
    """An anisotropic estimator was requested before gradient recovery."""


class InsufficientData(AnisoVemError):
    pass
