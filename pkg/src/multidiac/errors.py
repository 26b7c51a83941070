"""Shared exception types."""


class ShapeError(ValueError):
    """Tensor or sequence shapes are incompatible with an operation."""


class NumericError(ArithmeticError):
    """Non-finite values or other numeric-domain violations."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class MalformedInputError(ValueError):
    """Input text violates structural preconditions (e.g. stray diacritic)."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class IngestError(ValueError):
    """Audio file does not satisfy the ingest contract (rate, channels, codec)."""


class FormatError(ValueError):
    """On-disk container is truncated or structurally invalid."""


class ManifestError(ValueError):
    """Manifest parsing or cross-manifest alignment failure."""


class FingerprintError(ValueError):
    """Checkpoint config fingerprint does not match the supplied config."""


class InvariantViolation(RuntimeError):
    """A post-processing invariant was violated for a sample."""

    def __init__(self, invariant, message):
        super().__init__(f"invariant {invariant}: {message}")
        self.invariant = invariant
