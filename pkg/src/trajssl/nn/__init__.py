from trajssl.nn.model import HeadSpec, Model, ModelConfig, Params, head_forward, make_head
from trajssl.nn.optim import OptimizerState, optimizer_step
from trajssl.nn.tensor import Tensor

__all__ = [
    "HeadSpec", "Model", "ModelConfig", "OptimizerState", "Params", "Tensor",
    "head_forward", "make_head", "optimizer_step",
]
