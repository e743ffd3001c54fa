"""Bias-corrected Adam, written as a pure update rule.

Parameters are immutable tensors, so a step returns a new parameter tensor
and a new :class:`AdamState` rather than mutating either.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class AdamState:
    """First/second moment estimates for one parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    hyper: AdamHyper = field(default_factory=AdamHyper)

    @classmethod
    def zeros_like(cls, param: Tensor, hyper: AdamHyper | None = None) -> AdamState:
        return cls(np.zeros(param.shape, param.dtype), np.zeros(param.shape, param.dtype), 0, hyper or AdamHyper())


def adam_step(param: Tensor, grad: np.ndarray, state: AdamState) -> tuple[Tensor, AdamState]:
    grad = np.asarray(grad)
    if not (param.shape == grad.shape == state.m.shape == state.v.shape):
        raise ShapeError(
            f"adam_step: param {param.shape}, grad {grad.shape}, m {state.m.shape}, v {state.v.shape} must agree"
        )
    h = state.hyper
    dtype = param.dtype
    t = state.t + 1
    m = (h.beta1 * state.m + (1.0 - h.beta1) * grad).astype(dtype)
    v = (h.beta2 * state.v + (1.0 - h.beta2) * grad * grad).astype(dtype)
    m_hat = m / (1.0 - h.beta1**t)
    v_hat = v / (1.0 - h.beta2**t)
    new = (param.data - h.lr * m_hat / (np.sqrt(v_hat) + h.eps)).astype(dtype)
    m.flags.writeable = False
    v.flags.writeable = False
    return Tensor(new, requires_grad=param.requires_grad, dtype=dtype, name=param.name), replace(state, m=m, v=v, t=t)


class Adam:
    """One optimizer per parameter group; ``step`` returns the new tensors."""

    def __init__(self, params: Mapping[str, Tensor], hyper: AdamHyper | None = None):
        self.hyper = hyper or AdamHyper()
        self.states: dict[str, AdamState] = {k: AdamState.zeros_like(p, self.hyper) for k, p in params.items()}

    @property
    def t(self) -> int:
        return max((s.t for s in self.states.values()), default=0)

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        out = dict(params)
        for name, g in grads.items():
            out[name], self.states[name] = adam_step(params[name], g, self.states[name])
        return out
