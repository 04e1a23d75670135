"""Exception hierarchy shared by all modules."""


class OpDefectError(Exception):
    """Base class for every error raised by this package."""


class NotSelfAdjoint(OpDefectError, ValueError):
    pass


class NotPSD(OpDefectError, ValueError):
    pass


class ZeroVector(OpDefectError, ValueError):
    pass


class NotContraction(OpDefectError, ValueError):
    pass


class LambdaOutOfRange(OpDefectError, ValueError):
    pass


class DimensionMismatch(OpDefectError, ValueError):
    pass


class KernelMismatch(OpDefectError, ValueError):
    pass


class DegenerateDiagonal(OpDefectError, ValueError):
    pass


class MissingTruth(OpDefectError, ValueError):
    pass


class KappaViolated(OpDefectError, ValueError):
    pass


class AssumptionMViolated(OpDefectError, ValueError):
    pass


class NotIid(OpDefectError, ValueError):
    pass


class NotColumnContraction(OpDefectError, ValueError):
    pass


class BudgetExceeded(OpDefectError, ValueError):
    pass


class NotPrefixClosed(OpDefectError, ValueError):
    pass


class DepthExceeded(OpDefectError, ValueError):
    pass


class EmptyFrontier(OpDefectError, ValueError):
    pass


class EmptyDictionary(OpDefectError, ValueError):
    pass


class PTooLarge(OpDefectError, ValueError):
    pass


class ConfigError(OpDefectError, ValueError):
    """Raised for malformed experiment configs; carries the offending key and line."""

    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.key = key
        self.line = line


class ExperimentError(OpDefectError, RuntimeError):
    pass
