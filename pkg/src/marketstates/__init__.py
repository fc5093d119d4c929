"""Market states of sector correlation matrices and the sector pairs that drive them."""

from .errors import PipelineError

__version__ = "0.1.0"

__all__ = ["PipelineError", "__version__"]
