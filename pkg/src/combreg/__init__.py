"""Shape-prior and adversarial regularization for multi-structure segmentation, at desk scale."""

from .autodiff import ContractError, ShapeError, Tensor
from .synth import ConfigurationError, GenerationError

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "ContractError", "GenerationError", "ShapeError", "Tensor", "__version__"]
