"""Global discriminator D and the per-level guiding blocks.

A guiding block at decoder level n owns a shared feature encoder ``f``
(two 4x4 stride-2 convs), an appearance discriminator judging ``f(y^n)``
against ``f(x̂^n)``, and a variation discriminator judging the residuals
``f(x^n) - f(y^n)`` against ``f(x^n) - f(x̂^n)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import add_conv, conv_stack, count, score_head
from .tensor import ShapeError, Tensor

SLOPE = 0.2


@dataclass
class GlobalDiscriminator:
    tensors: dict[str, Tensor] = field(default_factory=dict)
    num_layers: int = 5

    def replace(self, tensors) -> GlobalDiscriminator:
        return GlobalDiscriminator(dict(tensors), self.num_layers)


def init_global_discriminator(rng: np.random.Generator, in_channels: int = 3, base: int = 16, cap: int = 64,
                              num_layers: int = 5, dtype=np.float32) -> GlobalDiscriminator:
    p: dict[str, Tensor] = {}
    c = in_channels
    for i in range(1, num_layers + 1):
        c_out = min(base * 2 ** (i - 1), cap)
        add_conv(p, rng, f"conv{i}", c_out, c, 4, dtype)
        c = c_out
    add_conv(p, rng, "head", 1, c, 1, dtype)
    return GlobalDiscriminator(p, num_layers)


def global_score(d: GlobalDiscriminator, image: Tensor) -> Tensor:
    if image.ndim != 4:
        raise ShapeError(f"global_score expects NCHW, got {image.shape}")
    if image.shape[2] < 2**d.num_layers:
        raise ShapeError(f"image of {image.shape[2]} px too small for {d.num_layers} stride-2 layers")
    feat = conv_stack(d.tensors, "conv", image, d.num_layers, 2, 1, SLOPE)
    return score_head(d.tensors, "head", feat)


@dataclass
class GGB:
    """Parameters and weights of the guiding block attached at ``level``."""

    level: int
    tensors: dict[str, Tensor] = field(default_factory=dict)
    lambda_rapd: float = 0.01
    lambda_nvtd: float = 0.01
    use_rapd: bool = True
    use_nvtd: bool = True
    f_slope: float = SLOPE

    def replace(self, tensors) -> GGB:
        return GGB(self.level, dict(tensors), self.lambda_rapd, self.lambda_nvtd, self.use_rapd, self.use_nvtd,
                   self.f_slope)

    @property
    def num_parameters(self) -> int:
        return count(self.tensors)


def init_ggb(rng: np.random.Generator, level: int, in_channels: int = 3, feat_channels: tuple[int, int] = (16, 32),
             disc_channels: int = 32, use_rapd: bool = True, use_nvtd: bool = True, lambda_rapd: float = 0.01,
             lambda_nvtd: float = 0.01, dtype=np.float32) -> GGB:
    p: dict[str, Tensor] = {}
    add_conv(p, rng, "f1", feat_channels[0], in_channels, 4, dtype)
    add_conv(p, rng, "f2", feat_channels[1], feat_channels[0], 4, dtype)
    for disc, used in (("rapd", use_rapd), ("nvtd", use_nvtd)):
        if not used:
            continue
        c = feat_channels[1]
        for i in range(1, 4):
            add_conv(p, rng, f"{disc}{i}", disc_channels, c, 3, dtype)
            c = disc_channels
        add_conv(p, rng, f"{disc}_head", 1, c, 1, dtype)
    return GGB(level, p, lambda_rapd, lambda_nvtd, use_rapd, use_nvtd)


def feature_encode(ggb: GGB, image: Tensor) -> Tensor:
    if image.ndim != 4:
        raise ShapeError(f"feature_encode expects NCHW, got {image.shape}")
    if image.shape[2] < 4 or image.shape[2] % 4:
        raise ShapeError(f"level image size {image.shape[2]} must be a multiple of 4 for the feature encoder")
    return conv_stack(ggb.tensors, "f", image, 2, 2, 1, ggb.f_slope)


class Residual:
    """Difference of two encodings under one GGB's ``f``.

    Only :func:`residual_features` constructs these, and :func:`nvtd_score`
    accepts nothing else, so raw encodings cannot reach the variation
    discriminator.
    """

    __slots__ = ("tensor", "level")
    _token = object()

    def __init__(self, tensor: Tensor, level: int, _token=None):
        if _token is not Residual._token:
            raise TypeError("Residual objects are created by residual_features only")
        self.tensor = tensor
        self.level = level

    @property
    def shape(self):
        return self.tensor.shape


def residual_features(ggb: GGB, x_level: Tensor, other: Tensor) -> Residual:
    """``f(x^n) - f(other)``: d_real with ``other = y^n``, d_fake with ``other = x̂^n``."""
    if x_level.shape != other.shape:
        raise ShapeError(f"residual_features: {x_level.shape} vs {other.shape}")
    return Residual(feature_encode(ggb, x_level) - feature_encode(ggb, other), ggb.level, Residual._token)


def _check_encoded(ggb: GGB, t: Tensor, what: str):
    c = ggb.tensors["f2.w"].shape[0]
    if t.ndim != 4 or t.shape[1] != c:
        raise ShapeError(f"{what}: expected (batch, {c}, h, w) encoder output, got {t.shape}")


def rapd_score(ggb: GGB, encoded: Tensor) -> Tensor:
    if not ggb.use_rapd:
        raise RuntimeError(f"GGB at level {ggb.level} was built without RAPD")
    if isinstance(encoded, Residual):
        raise TypeError("rapd_score takes an encoding, not a residual")
    _check_encoded(ggb, encoded, "rapd_score")
    feat = conv_stack(ggb.tensors, "rapd", encoded, 3, 1, 1, SLOPE)
    return score_head(ggb.tensors, "rapd_head", feat)


def nvtd_score(ggb: GGB, residual: Residual) -> Tensor:
    if not ggb.use_nvtd:
        raise RuntimeError(f"GGB at level {ggb.level} was built without NVTD")
    if not isinstance(residual, Residual):
        raise TypeError("nvtd_score accepts only residual_features output")
    if residual.level != ggb.level:
        raise ValueError(f"residual from level {residual.level} given to GGB at level {ggb.level}")
    _check_encoded(ggb, residual.tensor, "nvtd_score")
    feat = conv_stack(ggb.tensors, "nvtd", residual.tensor, 3, 1, 1, SLOPE)
    return score_head(ggb.tensors, "nvtd_head", feat)
