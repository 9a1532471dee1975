"""Exception types raised across the package."""


class OdometryError(Exception):
    """Base class for all errors raised by ctlo."""


class AngleNearPi(OdometryError, ValueError):
    """Rotation angle too close to pi for the principal-branch log."""


class NonPositiveDt(OdometryError, ValueError):
    pass


class TauOutOfRange(OdometryError, ValueError):
    pass


class TauBeforeKnot(OdometryError, ValueError):
    pass


class EmptyFrame(OdometryError, ValueError):
    pass


class EmptyMap(OdometryError, ValueError):
    pass


class DegenerateNeighborhood(OdometryError, ValueError):
    pass


class ZeroRangePoint(OdometryError, ValueError):
    pass


class MissingDoppler(OdometryError, ValueError):
    pass


class FactorOutsideWindow(OdometryError, ValueError):
    pass


class IndefiniteHessian(OdometryError, ArithmeticError):
    pass


class DivergenceDetected(OdometryError, RuntimeError):
    pass


class MalformedRecord(OdometryError, ValueError):
    pass


class TimestampOutOfRange(OdometryError, ValueError):
    pass


class ReaderError(OdometryError, IOError):
    pass


class SequenceTooShort(OdometryError, ValueError):
    pass


class NoTrajectoryCoverage(OdometryError, ValueError):
    pass
