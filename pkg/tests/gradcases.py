"""Finite-difference gradient cases shared by the unit and acceptance suites.

Every case builds fresh 64-bit inputs from a seed and returns ``(fn, inputs)``
for :func:`dualseg.tensor.check_gradients`.
"""

import numpy as np

from dualseg.model import MeanMaxBlock
from dualseg.tensor import Tensor, ops

F64 = np.float64


def _t(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=F64), requires_grad=grad)


def _away_from(x, points, gap=1e-3):
    for p in points:
        close = np.abs(x - p) < gap
        x = np.where(close, p + np.sign(x - p + 1e-12) * gap * 2, x)
    return x


def _distinct(rng, shape):
    vals = (rng.permutation(int(np.prod(shape))) * 0.01 - 0.5).reshape(shape)
    return vals + rng.uniform(0, 1e-3, size=shape)


def conv_s1(rng):
    x, w, b = _t(rng.standard_normal((2, 3, 6, 6))), _t(rng.standard_normal((4, 3, 3, 3))), _t(rng.standard_normal(4))
    return (lambda x, w, b: ops.conv2d(x, w, b, stride=1, pad=1)), [x, w, b]


def conv_s2(rng):
    x, w = _t(rng.standard_normal((2, 3, 7, 6))), _t(rng.standard_normal((2, 3, 3, 3)))
    return (lambda x, w: ops.conv2d(x, w, None, stride=2, pad=1)), [x, w]


def conv_1x1(rng):
    x, w, b = _t(rng.standard_normal((2, 5, 4, 4))), _t(rng.standard_normal((3, 5, 1, 1))), _t(rng.standard_normal(3))
    return (lambda x, w, b: ops.conv2d(x, w, b)), [x, w, b]


def depthwise_s1(rng):
    x, w = _t(rng.standard_normal((2, 4, 6, 6))), _t(rng.standard_normal((4, 1, 3, 3)))
    return (lambda x, w: ops.depthwise_conv2d(x, w, stride=1, pad=1)), [x, w]


def depthwise_s2(rng):
    x, w = _t(rng.standard_normal((1, 3, 8, 7))), _t(rng.standard_normal((3, 1, 3, 3)))
    return (lambda x, w: ops.depthwise_conv2d(x, w, stride=2, pad=1)), [x, w]


def channel_mean(rng):
    return ops.channel_mean, [_t(rng.standard_normal((2, 5, 4, 4)))]


def channel_max(rng):
    return ops.channel_max, [_t(_distinct(rng, (2, 5, 4, 4)))]


def concat(rng):
    return ops.concat_channels, [_t(rng.standard_normal((2, 2, 3, 3))), _t(rng.standard_normal((2, 3, 3, 3)))]


def relu6(rng):
    x = _away_from(rng.uniform(-2, 8, size=(2, 3, 4, 4)), (0.0, 6.0))
    return ops.relu6, [_t(x)]


def sigmoid(rng):
    return ops.sigmoid, [_t(rng.standard_normal((2, 3, 4, 4)) * 3)]


def add_broadcast(rng):
    return ops.add, [_t(rng.standard_normal((2, 3, 4, 4))), _t(rng.standard_normal((1, 3, 1, 1)))]


def mul_broadcast(rng):
    return ops.mul, [_t(rng.standard_normal((2, 3, 4, 4))), _t(rng.standard_normal((2, 1, 4, 4)))]


def scale(rng):
    return (lambda x: ops.scale(x, -1.7)), [_t(rng.standard_normal((1, 2, 3, 3)))]


def total(rng):
    return ops.total, [_t(rng.standard_normal((2, 3, 2, 2)))]


def batchnorm_train(rng):
    c = 3
    x, g, b = _t(rng.standard_normal((4, c, 3, 3)) * 2 + 1), _t(rng.uniform(0.5, 2, c)), _t(rng.standard_normal(c))

    def fn(x, g, b):
        return ops.batchnorm(x, g, b, np.zeros(c), np.ones(c), training=True)

    return fn, [x, g, b]


def batchnorm_eval(rng):
    c = 3
    rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2, c)
    x, g, b = _t(rng.standard_normal((2, c, 3, 3))), _t(rng.uniform(0.5, 2, c)), _t(rng.standard_normal(c))
    return (lambda x, g, b: ops.batchnorm(x, g, b, rm, rv, training=False)), [x, g, b]


def upsample(rng):
    return ops.upsample_bilinear, [_t(rng.standard_normal((2, 2, 3, 4)))]


def soft_dice(rng):
    pred = _t(rng.uniform(0.05, 0.95, size=(2, 1, 5, 5)))
    target = (rng.random((2, 1, 5, 5)) > 0.5).astype(F64)
    return (lambda p: ops.soft_dice_loss(p, target)), [pred]


def bce(rng):
    pred = _t(rng.uniform(0.05, 0.95, size=(2, 1, 5, 5)))
    target = (rng.random((2, 1, 5, 5)) > 0.5).astype(F64)
    return (lambda p: ops.bce_loss(p, target)), [pred]


def mm_block(rng):
    block = MeanMaxBlock(rng, 4, dtype=F64)
    x = _t(rng.standard_normal((2, 4, 5, 5)))
    params = [p for _, p in block.named_parameters()]
    for p in params:
        p.requires_grad = True
    return (lambda x, *_: block(x)), [x] + params


PRIMITIVES = {
    "conv2d_stride1_bias": conv_s1,
    "conv2d_stride2": conv_s2,
    "conv2d_1x1": conv_1x1,
    "depthwise_stride1": depthwise_s1,
    "depthwise_stride2": depthwise_s2,
    "channel_mean": channel_mean,
    "channel_max": channel_max,
    "concat_channels": concat,
    "relu6": relu6,
    "sigmoid": sigmoid,
    "add": add_broadcast,
    "mul": mul_broadcast,
    "scale": scale,
    "total": total,
    "batchnorm_train": batchnorm_train,
    "batchnorm_eval": batchnorm_eval,
    "upsample_bilinear": upsample,
    "soft_dice_loss": soft_dice,
    "bce_loss": bce,
    "mm_block": mm_block,
}
