"""Camera/LiDAR road segmentation with skip-cross fusion, built on a small numpy autodiff engine."""
from .tensor import ShapeError, TapeError, Tensor, no_grad, parameter, tensor
from .model import (
    ALL_STRATEGIES,
    STRATEGIES,
    CheckpointError,
    FusionTopology,
    SkipcrossNet,
    TopologyError,
    build,
    configure_strategy,
    count_cross_weights,
    load_weights,
    param_count,
    save_weights,
)

__version__ = "0.1.0"

__all__ = [
    "ALL_STRATEGIES",
    "STRATEGIES",
    "CheckpointError",
    "FusionTopology",
    "ShapeError",
    "SkipcrossNet",
    "TapeError",
    "Tensor",
    "TopologyError",
    "build",
    "configure_strategy",
    "count_cross_weights",
    "load_weights",
    "no_grad",
    "param_count",
    "parameter",
    "save_weights",
    "tensor",
]
