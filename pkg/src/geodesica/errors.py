"""Exception hierarchy shared by every module."""


class GeodesicaError(Exception):
    """Base class for all library errors."""


class NumericalFault(GeodesicaError):
    def __init__(self, message, indices=None):
        super().__init__(message)
        self.indices = indices


class DegenerateMetric(GeodesicaError):
    """The induced metric is singular, i.e. the immersion condition fails."""


class OutOfBounds(GeodesicaError):
    pass


class TrajectoryEscapedDomain(GeodesicaError):
    def __init__(self, message, exit_lambda=None):
        super().__init__(message)
        self.exit_lambda = exit_lambda


class SegmentEscapedDomain(GeodesicaError):
    pass


class DiagonalSample(GeodesicaError):
    """Pair too close to the diagonal p = q where the distance is not differentiable."""


class FlatManifold(GeodesicaError):
    """Curvature vanishes; curvature-based sampling has no target density."""


class StalledFlow(GeodesicaError):
    pass


class NonFiniteLoss(GeodesicaError):
    def __init__(self, message, last_good=None, update=None):
        super().__init__(message)
        self.last_good = last_good
        self.update = update


class IoFault(GeodesicaError):
    pass


class SchemaMismatch(GeodesicaError):
    pass


class ManifoldMismatch(GeodesicaError):
    pass


class ConfigError(GeodesicaError):
    pass
