"""Exception types raised across the package."""


class GqsgdError(Exception):
    """Base class for all package errors."""


class InvalidArgument(GqsgdError, ValueError):
    pass


class InvalidInput(GqsgdError, ValueError):
    pass


class PreconditionViolation(GqsgdError, ValueError):
    pass


class CorruptPayload(GqsgdError, ValueError):
    pass


class OverflowDetected(GqsgdError, ArithmeticError):
    pass


class RefusedConfiguration(GqsgdError, ValueError):
    """Configuration cannot run without risking integer overflow."""


class ProtocolError(GqsgdError):
    pass


class AbortedCollective(GqsgdError):
    """A worker failed; the whole collective is abandoned."""


class Diverged(GqsgdError, ArithmeticError):
    pass


class UndefinedRelativeError(GqsgdError, ZeroDivisionError):
    pass
