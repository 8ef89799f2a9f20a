"""Exception hierarchy shared across the package."""


class ValorError(Exception):
    pass


class ConfigError(ValorError, ValueError):
    """Invalid configuration or a modality/group/variant mismatch."""


class ContractError(ValorError, ValueError):
    """A documented precondition of an operation was violated."""


class InputError(ValorError, ValueError):
    """Malformed raw input (waveforms, spectrograms, frames)."""


class DimensionError(ValorError, ValueError):
    pass


class NumericError(ValorError, FloatingPointError):
    pass


class CheckpointError(ValorError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass
