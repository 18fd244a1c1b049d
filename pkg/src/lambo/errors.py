"""Exception types shared across the package."""


class LamboError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(LamboError, ValueError):
    pass


class NonFinite(LamboError, FloatingPointError):
    pass


class NotScalar(LamboError, ValueError):
    pass


class ConfigError(LamboError, ValueError):
    pass


class UnknownPrompt(LamboError, ValueError):
    pass


class OracleTooLarge(LamboError):
    pass


class Infeasible(LamboError):
    pass


class CheckpointError(LamboError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionUnsupported(CheckpointError):
    pass


class TruncatedFile(CheckpointError):
    pass


class OffsetOverlap(CheckpointError):
    pass
