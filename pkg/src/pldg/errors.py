"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or argument (shape, range, schema)."""


class DataError(ValueError):
    """Malformed or non-finite input data, missing files."""


class ConsistencyError(RuntimeError):
    """Internal bookkeeping disagreement, e.g. misaligned sample ids."""


class TrainingError(RuntimeError):
    """Training aborted: non-finite loss, failed clustering."""


class LoadError(RuntimeError):
    """Checkpoint cannot be restored into the requested configuration."""
