"""Slow, obviously-correct references used to check the fast paths.

Nothing here shares code with the implementations it checks: the
convolution and SSIM references are explicit loops, and gradients are
checked against central finite differences of the forward function alone.
"""
from __future__ import annotations

import math
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .tensor import Tensor, backward, record_kinks


def reference_conv2d(x: np.ndarray, k: np.ndarray, b: np.ndarray | None, stride: int, padding: int) -> np.ndarray:
    B, C, H, W = x.shape
    O, _, kh, kw = k.shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + H, padding : padding + W] = x
    ho = (H + 2 * padding - kh) // stride + 1
    wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, O, ho, wo))
    for n in range(B):
        for o in range(O):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * k[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    w = np.empty((size, size))
    c = (size - 1) / 2.0
    for i in range(size):
        for j in range(size):
            w[i, j] = math.exp(-((i - c) ** 2 + (j - c) ** 2) / (2 * sigma * sigma))
    return w / w.sum()


def reference_ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5, k1: float = 0.01,
                   k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over every valid window position, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[None], b[None]
    w = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    C, H, W = a.shape
    per_channel = []
    for ch in range(C):
        vals = []
        for i in range(H - window + 1):
            for j in range(W - window + 1):
                pa = a[ch, i : i + window, j : j + window]
                pb = b[ch, i : i + window, j : j + window]
                mu_a = float((w * pa).sum())
                mu_b = float((w * pb).sum())
                var_a = float((w * (pa - mu_a) ** 2).sum())
                var_b = float((w * (pb - mu_b) ** 2).sum())
                cov = float((w * (pa - mu_a) * (pb - mu_b)).sum())
                vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                            ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)))
        per_channel.append(sum(vals) / len(vals))
    return sum(per_channel) / len(per_channel)


class FDResult(NamedTuple):
    rel_err: float
    analytic: float
    numeric: float
    h: float


def directional_check(fn: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[Tensor], rng: np.random.Generator,
                      h: float = 1e-3, max_halvings: int = 12) -> FDResult:
    """Compare <grad, v> with a central difference along a random unit direction v.

    ``fn`` maps a list of tensors to a scalar tensor. If the branch pattern
    of any relu, clamp or abs differs between the two probe points the
    difference quotient straddles a kink and means nothing, so ``h`` is
    halved until both probes sit on the same linear piece. The step that
    was finally used is returned alongside the error.
    """
    inputs = list(inputs)
    dirs = [rng.normal(size=t.shape) for t in inputs]
    norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
    dirs = [d / norm for d in dirs]
    leaves = [Tensor(t.data, requires_grad=True, dtype=np.float64) for t in inputs]
    grads = backward(fn(leaves), wrt=leaves)
    analytic = sum(float((grads[t] * d).sum()) if t in grads else 0.0 for t, d in zip(leaves, dirs))

    def at(sign, step):
        with record_kinks() as kinks:
            v = float(fn([Tensor(t.data + sign * step * d, dtype=np.float64) for t, d in zip(leaves, dirs)]).data)
        return v, kinks

    for _ in range(max_halvings + 1):
        (fp, kp), (fm, km) = at(1.0, h), at(-1.0, h)
        if len(kp) == len(km) and all(np.array_equal(a, b) for a, b in zip(kp, km)):
            break
        h /= 2.0
    numeric = (fp - fm) / (2.0 * h)
    scale = max(abs(analytic), abs(numeric), 1e-300)
    return FDResult(abs(analytic - numeric) / scale, analytic, numeric, h)


def weighted_sum(out: Tensor, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    """Scalarize a non-scalar output with a fixed random weighting."""
    w = rng.normal(size=out.shape)
    return (out * Tensor(w)).sum(), w
