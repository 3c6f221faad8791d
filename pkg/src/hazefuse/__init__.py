"""hazefuse: depth-guided single-image dehazing testbed."""

from .dehazenet import NetConfig
from .fusion import FusionConfig
from .hazesim import HazeParams, HazyPair, Scene
from .params import ParamSet
from .tensor import Tape, Tensor
from .trainer import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "FusionConfig",
    "HazeParams",
    "HazyPair",
    "NetConfig",
    "ParamSet",
    "Scene",
    "Tape",
    "Tensor",
    "TrainConfig",
    "__version__",
]
