"""Exception types shared across the package."""


class NetableError(Exception):
    """Base class for all package errors."""


class ShapeError(NetableError):
    """Operation inputs do not conform to the op's shape rules."""


class ContractError(NetableError):
    """An API precondition was violated by the caller."""


class ConfigError(NetableError):
    """Invalid or inconsistent configuration value."""


class DataError(NetableError):
    """Malformed, missing, or internally inconsistent data."""


class RetrievalError(NetableError):
    """Retrieval was impossible: empty entity table or no row representation."""


class CheckpointError(NetableError):
    """Checkpoint file is corrupt or does not match the model."""


class DivergenceError(NetableError):
    """Training produced a non-finite value."""
