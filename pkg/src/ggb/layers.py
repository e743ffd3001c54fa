"""Parameter initialisation and the small conv blocks shared by all networks."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, conv2d, deconv2d, leaky_relu, reshape, sigmoid, spatial_mean, tanh

INIT_STD = 0.02
# sigmoid(12) < 1 - 6e-6, so float32 scores never round to exactly 0 or 1
LOGIT_BOUND = 12.0


def normal_param(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float32, name=None) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True, dtype=dtype, name=name)


def zero_param(shape, dtype=np.float32, name=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, dtype=dtype, name=name)


def add_conv(params: dict, rng, prefix: str, c_out: int, c_in: int, k: int, dtype, std=INIT_STD):
    params[f"{prefix}.w"] = normal_param(rng, (c_out, c_in, k, k), std, dtype, f"{prefix}.w")
    params[f"{prefix}.b"] = zero_param((c_out,), dtype, f"{prefix}.b")


def add_deconv(params: dict, rng, prefix: str, c_in: int, c_out: int, k: int, dtype, std=INIT_STD):
    params[f"{prefix}.w"] = normal_param(rng, (c_in, c_out, k, k), std, dtype, f"{prefix}.w")
    params[f"{prefix}.b"] = zero_param((c_out,), dtype, f"{prefix}.b")


def conv(params, prefix: str, x: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return conv2d(x, params[f"{prefix}.w"], params[f"{prefix}.b"], stride, padding)


def deconv(params, prefix: str, x: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return deconv2d(x, params[f"{prefix}.w"], params[f"{prefix}.b"], stride, padding)


def score_head(params, prefix: str, feat: Tensor) -> Tensor:
    """Global average pool, 1x1 projection, bounded logit, sigmoid. Returns (batch, 1)."""
    pooled = spatial_mean(feat)
    logit = conv(params, prefix, pooled)
    bounded = tanh(logit * (1.0 / LOGIT_BOUND)) * LOGIT_BOUND
    return sigmoid(reshape(bounded, (feat.shape[0], 1)))


def conv_stack(params, prefix: str, x: Tensor, n: int, stride: int, padding: int, slope: float) -> Tensor:
    for i in range(1, n + 1):
        x = leaky_relu(conv(params, f"{prefix}{i}", x, stride, padding), slope)
    return x


def count(params) -> int:
    return int(sum(t.size for t in params.values()))
