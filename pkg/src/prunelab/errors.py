"""Exception types shared across the package."""


class PruneLabError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PruneLabError):
    """Tensor shapes do not line up for the requested operation."""


class LayoutError(PruneLabError):
    """A mask, plan, or module does not match the model's structural layout."""


class ContractError(PruneLabError):
    """An operation was called outside its stated preconditions."""


class DataError(PruneLabError):
    """Dataset is missing, empty, or too small for the requested operation."""


class ConfigError(PruneLabError):
    """A config file or config value is invalid."""


class CheckpointError(PruneLabError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class BadVersionError(CheckpointError):
    """File declares an unsupported format version."""


class BadChecksumError(CheckpointError):
    """File content does not match its trailing checksum (corrupt or truncated)."""


class CompatibilityError(PruneLabError):
    """Two checkpoints disagree on the foundation-side pruning plan."""
