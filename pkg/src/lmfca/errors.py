"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """An operation was called with tensors that violate its shape contract."""


class DegenerateInputError(ValueError):
    """Input is formally valid but carries no usable signal (all-zero reference, silent clean, ...)."""


class GenerationError(RuntimeError):
    """Scene or RIR synthesis could not satisfy its geometric constraints."""


class ConfigError(ValueError):
    """Bad configuration: unknown keys, out-of-range values, empty input directories."""


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable or inconsistent with the requested model."""


class AudioFormatError(ValueError):
    """WAV file has an unsupported encoding or a sample rate other than 16 kHz."""
