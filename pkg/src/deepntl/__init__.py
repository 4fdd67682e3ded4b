"""Reconstruct VIIRS-like nighttime light from DMSP imagery.

Submodules: ``raster`` (grids and file formats), ``calib``
(inter-calibration), ``dataset`` (cleaning, sampling, synthetic scenes),
``autodiff`` (reverse-mode tensors), ``model``, ``train``, ``metrics`` and
``pipeline`` (tiled inference).
"""
from .errors import (AsciiGridError, CheckpointError, ConfigError, DataError,
                     InsufficientLitAreaError, RasterFormatError, ShapeError, SingularFitError,
                     TrainingError, UndefinedCorrelationError)
from .raster import Mask, Raster, TileRef, load_raster, parse_ascii_grid, save_raster

__version__ = "0.1.0"

__all__ = [
    "AsciiGridError", "CheckpointError", "ConfigError", "DataError", "InsufficientLitAreaError",
    "Mask", "Raster", "RasterFormatError", "ShapeError", "SingularFitError", "TileRef",
    "TrainingError", "UndefinedCorrelationError", "load_raster", "parse_ascii_grid",
    "save_raster", "__version__",
]
