"""Maritime obstacle-detection segmentation toolkit.

Light-weight encoder/mixer/decoder segmentation models for surface vehicles,
their training losses, a detection-benchmark evaluation protocol, block-level
cost profiling, and a synthetic scene generator for desk-scale experiments.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DatasetError, ShapeError

__all__ = ["ConfigError", "DatasetError", "ShapeError", "__version__"]
