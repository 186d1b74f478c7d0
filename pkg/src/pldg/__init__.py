"""Prompt-driven latent domain generalization on a small vision transformer."""

from pldg.errors import (
    ConfigError,
    ConsistencyError,
    DataError,
    LoadError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConsistencyError",
    "DataError",
    "LoadError",
    "TrainingError",
    "__version__",
]
