"""U-Net-like generator emitting an image at every decoder level.

Encoder layer k (1..N) halves the resolution; decoder layer n (1..N) doubles
it and produces the feature ``g^n`` at ``resolution / 2^(N-n)``. Decoder
layer n > 1 consumes ``concat(g^(n-1), e^(N-n+1))``. A 1x1 conv + tanh head
turns each ``g^n`` into the level image ``x̂^n``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import add_conv, add_deconv, conv, count, deconv
from .tensor import ShapeError, Tensor, concat, leaky_relu, relu, tanh

ENCODER_SLOPE = 0.2


def encoder_channels(depth: int, base: int, cap: int) -> list[int]:
    return [min(base * 2**k, cap) for k in range(depth)]


def decoder_channels(depth: int, base: int, cap: int) -> list[int]:
    """Output channels of g^1..g^N, mirroring the encoder."""
    enc = encoder_channels(depth, base, cap)
    return [enc[depth - n - 1] for n in range(1, depth)] + [base]


@dataclass
class GeneratorParams:
    depth: int
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def replace(self, tensors: dict[str, Tensor]) -> GeneratorParams:
        return GeneratorParams(self.depth, dict(tensors))

    @property
    def num_parameters(self) -> int:
        return count(self.tensors)


def init_generator(rng: np.random.Generator, depth: int, in_channels: int = 6, out_channels: int = 3,
                   base: int = 16, cap: int = 64, dtype=np.float32) -> GeneratorParams:
    enc = encoder_channels(depth, base, cap)
    dec = decoder_channels(depth, base, cap)
    p: dict[str, Tensor] = {}
    c_prev = in_channels
    for k in range(1, depth + 1):
        add_conv(p, rng, f"enc{k}", enc[k - 1], c_prev, 4, dtype)
        c_prev = enc[k - 1]
    for n in range(1, depth + 1):
        c_in = enc[depth - 1] if n == 1 else dec[n - 2] + enc[depth - n]
        add_deconv(p, rng, f"dec{n}", c_in, dec[n - 1], 4, dtype)
        add_conv(p, rng, f"head{n}", out_channels, dec[n - 1], 1, dtype)
    return GeneratorParams(depth, p)


@dataclass
class DecodeTrace:
    features: dict[int, Tensor]
    images: dict[int, Tensor]

    @property
    def final(self) -> Tensor:
        return self.images[max(self.images)]


def generate(params: GeneratorParams, x: Tensor, label_map: Tensor) -> DecodeTrace:
    """Run G on ``x`` conditioned on the label map ``M_c``."""
    depth = params.depth
    if x.ndim != 4 or label_map.ndim != 4:
        raise ShapeError("generate expects NCHW tensors")
    if x.shape[0] != label_map.shape[0] or x.shape[2:] != label_map.shape[2:]:
        raise ShapeError(f"x {x.shape} and label map {label_map.shape} must share batch and spatial size")
    res = x.shape[2]
    if x.shape[3] != res or res % (1 << depth):
        raise ShapeError(f"input resolution {x.shape[2:]} must be square and divisible by 2^{depth}")
    p = params.tensors
    h = concat([x, label_map], axis=1)
    skips = []
    for k in range(1, depth + 1):
        h = leaky_relu(conv(p, f"enc{k}", h, 2, 1), ENCODER_SLOPE)
        skips.append(h)
    features, images = {}, {}
    g = skips[-1]
    for n in range(1, depth + 1):
        inp = g if n == 1 else concat([g, skips[depth - n]], axis=1)
        g = relu(deconv(p, f"dec{n}", inp, 2, 1))
        features[n] = g
        images[n] = tanh(conv(p, f"head{n}", g))
    return DecodeTrace(features, images)


def final_stage_names(depth: int) -> tuple[str, ...]:
    return (f"dec{depth}.w", f"dec{depth}.b", f"head{depth}.w", f"head{depth}.b")


def generator_parameters_partition(params: GeneratorParams) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    """Split into (layers producing g^N and x̂^N, everything else)."""
    final = set(final_stage_names(params.depth))
    first = {k: v for k, v in params.tensors.items() if k in final}
    rest = {k: v for k, v in params.tensors.items() if k not in final}
    return first, rest
