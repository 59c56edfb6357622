"""Models, normalization layers and checkpoints."""

from dpsgd.nn.checkpoint import load_checkpoint, save_checkpoint
from dpsgd.nn.layers import group_norm_forward, weight_standardize
from dpsgd.nn.models import (
    ModelParams,
    ModelSpec,
    accuracy,
    cross_entropy,
    forward,
    init_params,
    layout,
    loss,
    loss_and_per_example_grads,
    param_count,
    per_example_grads,
    zero_params,
)

__all__ = [
    "ModelParams",
    "ModelSpec",
    "accuracy",
    "cross_entropy",
    "forward",
    "group_norm_forward",
    "init_params",
    "layout",
    "load_checkpoint",
    "loss",
    "loss_and_per_example_grads",
    "param_count",
    "per_example_grads",
    "save_checkpoint",
    "weight_standardize",
    "zero_params",
]
