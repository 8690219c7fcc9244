from .core import DEFAULT_DTYPE, VERIFY_DTYPE, Node, Tape, Tensor, backward
from .ops import (
    add,
    batchnorm,
    bce_loss,
    channel_max,
    channel_mean,
    concat_channels,
    conv2d,
    depthwise_conv2d,
    mul,
    relu6,
    scale,
    sigmoid,
    soft_dice_loss,
    total,
    upsample_bilinear,
)
from .gradcheck import check_gradients, numerical_grad, rel_error
from .optim import Adam, AdamState, adam_step

__all__ = [
    "DEFAULT_DTYPE",
    "VERIFY_DTYPE",
    "Adam",
    "AdamState",
    "Node",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "batchnorm",
    "bce_loss",
    "channel_max",
    "check_gradients",
    "channel_mean",
    "concat_channels",
    "conv2d",
    "depthwise_conv2d",
    "mul",
    "numerical_grad",
    "rel_error",
    "relu6",
    "scale",
    "sigmoid",
    "soft_dice_loss",
    "total",
    "upsample_bilinear",
]
