"""Speech emotion recognition with audio-text fusion on a numpy autodiff engine."""

from .models import Model, ModelSpec, late_fuse
from .tensor import DimensionError, Tensor

__version__ = "0.1.0"

__all__ = ["DimensionError", "Model", "ModelSpec", "Tensor", "late_fuse", "__version__"]
