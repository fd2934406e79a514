from advcloud.engine import ops
from advcloud.engine.nn import BatchNorm2d, Conv2d, ConvBNReLU, Module, Parameter
from advcloud.engine.optim import AdamW, AdamWState, adamw_step
from advcloud.engine.rng import seeded_rng, stream_key
from advcloud.engine.tensor import Graph, ShapeError, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "ops", "Tensor", "Graph", "ShapeError", "backward", "no_grad", "is_grad_enabled",
    "Module", "Parameter", "Conv2d", "BatchNorm2d", "ConvBNReLU",
    "AdamW", "AdamWState", "adamw_step", "seeded_rng", "stream_key",
]
