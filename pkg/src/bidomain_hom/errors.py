"""Exception hierarchy shared by all modules."""


class BidomainHomError(Exception):
    """Base class for every error raised by the package."""


# geometry
class GeometryError(BidomainHomError, ValueError):
    pass


class DisconnectedRegion(GeometryError):
    pass


class InvalidFraction(GeometryError):
    pass


class IncommensurateResolution(GeometryError):
    pass


class ResolutionMismatch(BidomainHomError, ValueError):
    pass


# linear algebra / solvers
class SolverDivergence(BidomainHomError, RuntimeError):
    pass


class SingularSystem(BidomainHomError, RuntimeError):
    pass


class LinearSolveFailure(BidomainHomError, RuntimeError):
    pass


class StabilityBreach(BidomainHomError, RuntimeError):
    pass


# homogenization
class MismatchedCorrectors(BidomainHomError, ValueError):
    pass


class InconsistentDoubleIntegral(BidomainHomError, RuntimeError):
    pass


class NotPositiveDefinite(BidomainHomError, ValueError):
    pass


# membrane model
class InvalidParameter(BidomainHomError, ValueError):
    pass


class AssumptionViolated(BidomainHomError):
    """A sampled structural inequality failed; ``witness`` holds the offending point."""

    def __init__(self, message, witness=None, condition=None):
        super().__init__(message)
        self.witness = witness
        self.condition = condition


# DNS
class NoInterface(BidomainHomError, ValueError):
    pass


# configuration
class ConfigError(BidomainHomError, ValueError):
    pass


class ParseError(ConfigError):
    pass


class ValidationError(ConfigError):
    def __init__(self, key, reason):
        super().__init__(f"{key}: {reason}")
        self.key = key
        self.reason = reason
