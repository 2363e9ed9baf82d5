"""U-shaped segmentation network with multi-axis external weights, on a small numpy autodiff engine."""

from .network import NetworkConfig, build_network, parameter_count
from .tensor import ShapeError, Tensor, no_grad

__all__ = ["NetworkConfig", "ShapeError", "Tensor", "build_network", "no_grad", "parameter_count"]
