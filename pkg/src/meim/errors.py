"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Operands have incompatible shapes; the message names the offending axis."""


class ValidationError(ValueError):
    """Numerical input violates a contract (e.g. a target row does not sum to one)."""


class ConfigError(ValueError):
    """Inconsistent model or run configuration."""


class IdLookupError(LookupError):
    """Entity or relation id outside the vocabulary range."""


class ParseError(ValueError):
    """Malformed dataset line; the message carries file name and line number."""


class CheckpointError(RuntimeError):
    """Corrupt, truncated, or version-incompatible checkpoint/cache payload."""


class EvaluationError(RuntimeError):
    """Evaluation cannot proceed (e.g. NaN scores)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; the message names the batch."""
