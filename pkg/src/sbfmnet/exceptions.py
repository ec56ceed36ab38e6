class SBFMError(Exception):
    """Base class for errors raised by sbfmnet."""


class DimensionError(SBFMError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(SBFMError, RuntimeError):
    """An operation was called outside its preconditions."""


class ConfigError(SBFMError, ValueError):
    """Invalid or mutually inconsistent configuration."""


class IngestError(SBFMError, OSError):
    """A dataset file is missing or malformed."""


class CheckpointError(SBFMError, ValueError):
    """A checkpoint file is corrupt or does not match the expected model."""
