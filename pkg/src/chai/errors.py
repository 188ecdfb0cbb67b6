"""Exception types shared across the package."""


class ChaiError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ChaiError, ValueError):
    """Array dimensions do not line up for the requested operation."""


class ConfigError(ChaiError, ValueError):
    """A model configuration violates its invariants."""


class ValidationError(ChaiError, ValueError):
    """Bad arguments or inputs supplied by a caller (CLI exit code 2)."""


class ContractError(ChaiError, RuntimeError):
    """An internal contract was violated (pruned/unpruned mismatch, empty
    softmax row, plan inconsistency)."""


class ModeMismatchError(ContractError):
    """An attention kernel was handed a cache in the wrong pruning state."""


class InsufficientTraceError(ValidationError):
    """A trace does not cover the requested step window."""


class WeightFileError(ChaiError, ValueError):
    """Base class for weight-file parsing failures."""


class BadMagicError(WeightFileError):
    """The file does not start with the expected magic bytes."""


class TruncatedWeightsError(WeightFileError):
    """The file ended before the declared header or payload was complete."""


class HeaderMismatchError(WeightFileError):
    """The header's tensor manifest disagrees with its declared config."""
