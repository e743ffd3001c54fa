"""Adversarial, reconstruction and combined objectives.

All discriminator objectives (global, appearance, variation) are the same
binary cross-entropy functional, and all "fool the critic" objectives are
the same non-saturating generator term; the per-discriminator names below
are aliases, not copies.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from .tensor import Tensor, clamp, l1_distance, log, mean

SCORE_EPS = 1e-7


class ScoreDomainError(ValueError):
    """A score hit exactly 0 or 1, or is not finite: the sigmoid is missing or overflowed."""


def _scores(s) -> Tensor:
    if not isinstance(s, Tensor):
        s = Tensor(np.asarray(s, dtype=np.float64))
    d = s.data
    if not np.all(np.isfinite(d)) or np.any(d <= 0.0) or np.any(d >= 1.0):
        raise ScoreDomainError(f"scores must lie strictly inside (0, 1); got range [{d.min()}, {d.max()}]")
    return clamp(s, SCORE_EPS, 1.0 - SCORE_EPS)


def adversarial_discriminator_loss(score_real, score_fake) -> Tensor:
    """-E[log s_real] - E[log(1 - s_fake)], expectations as batch means."""
    real = _scores(score_real)
    fake = _scores(score_fake)
    return -mean(log(real)) - mean(log(1.0 - fake))


def adversarial_generator_loss(score_fake) -> Tensor:
    """-E[log s_fake]."""
    return -mean(log(_scores(score_fake)))


loss_discriminator = adversarial_discriminator_loss
loss_rapd_discriminator = adversarial_discriminator_loss
loss_nvtd_discriminator = adversarial_discriminator_loss

loss_realism = adversarial_generator_loss
loss_rapd_generator = adversarial_generator_loss
loss_nvtd_generator = adversarial_generator_loss


def loss_rec_level(target: Tensor, generated: Tensor) -> Tensor:
    """Per-element mean L1 between a level target and the level image."""
    if not isinstance(target, Tensor):
        target = Tensor(target)
    if not isinstance(generated, Tensor):
        generated = Tensor(generated)
    return l1_distance(generated, target)


@dataclass(frozen=True)
class LossWeights:
    real: float = 0.02
    rapd: float = 0.01
    nvtd: float = 0.01
    active_levels: frozenset[int] = field(default_factory=frozenset)
    per_level_rapd: Mapping[int, float] = field(default_factory=dict)
    per_level_nvtd: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "active_levels", frozenset(int(n) for n in self.active_levels))
        for v in (self.real, self.rapd, self.nvtd, *self.per_level_rapd.values(), *self.per_level_nvtd.values()):
            if v < 0 or not math.isfinite(v):
                raise ValueError(f"loss weights must be finite and non-negative, got {v}")

    def lambda_rapd(self, n: int) -> float:
        if n not in self.active_levels:
            return 0.0
        return float(self.per_level_rapd.get(n, self.rapd))

    def lambda_nvtd(self, n: int) -> float:
        if n not in self.active_levels:
            return 0.0
        return float(self.per_level_nvtd.get(n, self.nvtd))


def loss_generator_total(l_real, l_rec_final, w: LossWeights) -> Tensor:
    return _t(l_real) * w.real + _t(l_rec_final)


class LevelLosses(NamedTuple):
    rapd: Tensor | float | None
    nvtd: Tensor | float | None
    rec: Tensor | float | None


class MissingLevelError(KeyError):
    pass


def loss_ggb_total(per_level: Mapping[int, LevelLosses | tuple], w: LossWeights) -> Tensor:
    """Weighted sum over ``w.active_levels``; other levels contribute nothing.

    ``None`` entries (a disabled discriminator, or no reconstruction term)
    are skipped.
    """
    missing = sorted(set(w.active_levels) - set(per_level))
    if missing:
        raise MissingLevelError(f"no GGB losses for active level(s) {missing}")
    out = Tensor(0.0)
    for n in sorted(w.active_levels):
        rapd, nvtd, rec = per_level[n]
        if rapd is not None:
            out = out + _t(rapd) * w.lambda_rapd(n)
        if nvtd is not None:
            out = out + _t(nvtd) * w.lambda_nvtd(n)
        if rec is not None:
            out = out + _t(rec)
    return out


def _t(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(float(v))
