"""Exception hierarchy.

``ConfigError`` maps to CLI exit code 2; everything deriving from
``RuntimeFailure`` maps to exit code 3.
"""


class PcottaError(Exception):
    """Base class for all package errors."""


class ContractError(PcottaError, ValueError):
    """A documented precondition was violated by the caller."""


class ShapeError(ContractError):
    """Array shapes are incompatible."""


class SizeError(ContractError):
    """A count or size argument is out of range for the given data."""


class ParseError(PcottaError, ValueError):
    """A text file could not be parsed."""


class ConfigError(PcottaError, ValueError):
    """Invalid configuration, unknown key, or mismatched artifact dimensions."""


class TapeError(PcottaError, RuntimeError):
    """Misuse of a compute tape (e.g. backward twice)."""


class RuntimeFailure(PcottaError, RuntimeError):
    """A run failed for numerical or runtime reasons."""


class EstimationError(RuntimeFailure):
    """Prototype estimation hit an empty (domain, task) cell."""


class TrainingError(RuntimeFailure):
    """Pretraining diverged."""


class AdaptationError(RuntimeFailure):
    """A test-time adaptation step failed."""


class InvariantViolation(RuntimeFailure):
    """A frozen quantity changed during adaptation."""
