"""Exception hierarchy shared across the package."""


class OcromError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatch(OcromError):
    pass


class SingularMatrix(OcromError):
    pass


class NotSymmetric(OcromError):
    pass


class ConvergenceFailure(OcromError):
    pass


class ParseError(OcromError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InvariantViolation(OcromError):
    pass


class DegenerateGeometry(OcromError):
    pass


class NonIntersectingBranches(OcromError):
    pass


class UnknownTag(OcromError):
    pass


class ParameterOutOfDomain(OcromError):
    pass


class NewtonDiverged(OcromError):
    pass


class SolverFailure(OcromError):
    pass


class AllSnapshotsFailed(OcromError):
    pass


class RankDeficiency(Warning):
    """Snapshot set has lower numerical rank than the requested mode count."""


class ConfigError(OcromError):
    pass


class MissingArtifact(OcromError):
    pass


class IoError(OcromError):
    pass
