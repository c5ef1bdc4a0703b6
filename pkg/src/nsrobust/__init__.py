"""Noise-to-signal-ratio regularized training for piecewise-linear networks."""

from nsrobust.errors import (
    ArgumentError,
    ChecksumError,
    ContractError,
    DimensionError,
    FormatVersionError,
    IngestionError,
    InputError,
    MalformedModelError,
    PersistenceError,
    StateError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "ChecksumError",
    "ContractError",
    "DimensionError",
    "FormatVersionError",
    "IngestionError",
    "InputError",
    "MalformedModelError",
    "PersistenceError",
    "StateError",
    "TrainingError",
]
