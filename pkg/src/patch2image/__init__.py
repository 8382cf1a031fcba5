"""patch2image: patch classifiers that become whole-image classifiers.

A small, dependency-light stack for training convolutional patch
classifiers on synthetic mammogram-like phantoms, converting them into
fully convolutional whole-image scorers whose output provably equals a
sliding window of the original patch net, and measuring what survives a
domain shift. numpy is the only numeric dependency; every gradient,
metric, and file format here is implemented from first principles so it
can be checked against independent oracles.
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DegenerateBatchError,
    DimensionError,
    EquivalenceError,
    NumericError,
    ParseError,
    Patch2ImageError,
    UsageError,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DegenerateBatchError",
    "DimensionError",
    "EquivalenceError",
    "NumericError",
    "ParseError",
    "Patch2ImageError",
    "UsageError",
    "__version__",
]
