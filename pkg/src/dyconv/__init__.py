"""Dynamic convolution: attention over K parallel kernels, with a small
autodiff engine, an analytic Mult-Adds model and desk-scale training."""

from .cost import CostReport, LayerSpec, NetworkSpec, mobilenet_v2_spec, network_madds
from .dynamic import AggregationMode, DynamicConv2d, DynamicPerceptron
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    DyConvError,
    FormatError,
    InvariantError,
    ShapeError,
    StateError,
)
from .models import DYCNN, ModelConfig, build_model
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"
