"""Exception hierarchy shared by every module."""


class SparseCotError(Exception):
    """Base class for all package errors."""


class DimensionError(SparseCotError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(SparseCotError, ValueError):
    """A parameter or configuration value is out of range."""


class PatternSyntaxError(ConfigError):
    """A mask pattern spec string could not be parsed."""

    def __init__(self, token, message=None):
        self.token = token
        super().__init__(message or f"bad pattern token {token!r}")


class AdmissibilityError(SparseCotError, ValueError):
    """A score row has no admissible (unmasked) position."""


class NondifferentiableError(SparseCotError, ValueError):
    """Sparsemax was asked for a Jacobian at a support boundary."""


class VocabularyError(SparseCotError, IndexError):
    """A token id falls outside the vocabulary."""


class OracleSizeError(SparseCotError, ValueError):
    """Input too large for a brute-force oracle."""


class TrainingError(SparseCotError, RuntimeError):
    """Training diverged."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"loss became non-finite at step {step}")


class CheckpointError(SparseCotError, ValueError):
    """A checkpoint file is malformed."""
