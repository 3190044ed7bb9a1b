"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(ValueError):
    """An input or evaluation produced NaN or infinity where finiteness is required."""


class FormatError(ValueError):
    """A file (matrix, manifest, checkpoint) is malformed; message carries context."""


class ConfigError(ValueError):
    """A configuration document or override is invalid."""


class DatasetError(ValueError):
    """A dataset violates a structural invariant (dims, label ranges, disjointness)."""


class StatsNotSeenError(RuntimeError):
    """Eval-mode normalization requested before any training batch set the statistics."""


class NumericAbort(RuntimeError):
    """Training hit a non-finite quantity; message names the term and iteration."""
