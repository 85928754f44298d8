"""Volumetric predictive intervals: synthetic phantoms, multi-head 3D
segmentation nets, interval constructors, conformal-style calibration and
benchmark metrics."""

__version__ = "0.1.0"

from volpi.errors import (
    ConfigError,
    FormatError,
    MissingArtifactError,
    NumericalError,
    ShapeError,
)

__all__ = [
    "ConfigError",
    "FormatError",
    "MissingArtifactError",
    "NumericalError",
    "ShapeError",
    "__version__",
]
