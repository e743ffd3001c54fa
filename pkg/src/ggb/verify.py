"""The release-gate oracle suite behind ``ggb verify``.

Each check returns a :class:`Check`; :func:`run_suite` runs them all and
never raises for a failing check, so one defect does not hide the others.
"""
from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .discriminators import (feature_encode, global_score, init_ggb, init_global_discriminator, nvtd_score,
                             rapd_score, residual_features)
from .generator import final_stage_names, generate, init_generator
from .losses import (LevelLosses, LossWeights, loss_discriminator, loss_generator_total, loss_ggb_total,
                     loss_nvtd_discriminator, loss_nvtd_generator, loss_rapd_discriminator, loss_rapd_generator,
                     loss_realism, loss_rec_level)
from .metrics import SsimParams, ssim
from .oracles import directional_check, reference_conv2d, reference_ssim
from .tensor import Tensor

PRIMITIVE_TOL = 1e-6
PRIMITIVE_H = 1e-5
COMPOSITE_TOL = 1e-3
COMPOSITE_H = 1e-3


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _f64(rng, *shape, lo=None, hi=None) -> Tensor:
    a = rng.normal(size=shape) if lo is None else rng.uniform(lo, hi, size=shape)
    return Tensor(a, requires_grad=True, dtype=np.float64)


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------

# name -> (make inputs from rng, function of the input list to a tensor)
PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda r: [_f64(r, 2, 3, 4), _f64(r, 3, 1)], lambda t: T.add(*t)),
    "sub": (lambda r: [_f64(r, 2, 3), _f64(r, 2, 3)], lambda t: T.sub(*t)),
    "mul": (lambda r: [_f64(r, 2, 3, 4), _f64(r, 1, 4)], lambda t: T.mul(*t)),
    "reshape": (lambda r: [_f64(r, 2, 6)], lambda t: T.reshape(t[0], (3, 4))),
    "concat": (lambda r: [_f64(r, 2, 1, 3, 3), _f64(r, 2, 2, 3, 3)], lambda t: T.concat(t, axis=1)),
    "leaky_relu": (lambda r: [_f64(r, 4, 5)], lambda t: T.leaky_relu(t[0], 0.2)),
    "relu": (lambda r: [_f64(r, 4, 5)], lambda t: T.relu(t[0])),
    "tanh": (lambda r: [_f64(r, 4, 5)], lambda t: T.tanh(t[0])),
    "sigmoid": (lambda r: [_f64(r, 4, 5)], lambda t: T.sigmoid(t[0])),
    "log": (lambda r: [_f64(r, 4, 5, lo=0.1, hi=2.0)], lambda t: T.log(t[0])),
    "clamp": (lambda r: [_f64(r, 4, 5)], lambda t: T.clamp(t[0], -0.7, 0.9)),
    "sum": (lambda r: [_f64(r, 3, 4)], lambda t: T.total(t[0])),
    "mean": (lambda r: [_f64(r, 3, 4)], lambda t: T.mean(t[0])),
    "l1_distance": (lambda r: [_f64(r, 2, 3, 4), _f64(r, 2, 3, 4)], lambda t: T.l1_distance(*t)),
    "spatial_mean": (lambda r: [_f64(r, 2, 3, 4, 4)], lambda t: T.spatial_mean(t[0])),
    "log_softmax": (lambda r: [_f64(r, 4, 6)], lambda t: T.log_softmax(t[0])),
    "downsample": (lambda r: [_f64(r, 2, 3, 8, 8)], lambda t: T.downsample(t[0], 4)),
    "conv2d": (lambda r: [_f64(r, 2, 3, 7, 7), _f64(r, 4, 3, 4, 4), _f64(r, 4)],
               lambda t: T.conv2d(t[0], t[1], t[2], stride=2, padding=1)),
    "conv2d_1x1": (lambda r: [_f64(r, 2, 3, 5, 5), _f64(r, 2, 3, 1, 1), _f64(r, 2)],
                   lambda t: T.conv2d(t[0], t[1], t[2])),
    "deconv2d": (lambda r: [_f64(r, 2, 4, 3, 3), _f64(r, 4, 2, 4, 4), _f64(r, 2)],
                 lambda t: T.deconv2d(t[0], t[1], t[2], stride=2, padding=1)),
}


def _scalarized(fn, rng):
    # fixed random weighting, drawn once so both FD evaluations see the same one
    cache = {}

    def scalar(ts):
        out = fn(ts)
        if out.size == 1:
            return T.reshape(out, ())
        if "w" not in cache:
            cache["w"] = rng.normal(size=out.shape)
        return (out * Tensor(cache["w"])).sum()

    return scalar


def check_primitive_gradients(seeds: int = 10, names: Iterable[str] | None = None) -> list[tuple[str, float]]:
    """Worst relative directional-derivative error per primitive over ``seeds`` seeds."""
    worst = []
    for name in names or PRIMITIVES:
        make, fn = PRIMITIVES[name]
        err = 0.0
        for s in range(seeds):
            rng = np.random.default_rng([s, 11])
            e = directional_check(_scalarized(fn, rng), make(rng), rng, h=PRIMITIVE_H).rel_err
            err = max(err, e)
        worst.append((name, err))
    return worst


def fan_in_scaled(params: dict[str, Tensor], rng: np.random.Generator) -> dict[str, Tensor]:
    """Float64 copies with He-style weights and small random biases, so activations stay O(1)."""
    out = {}
    for k, t in params.items():
        if k.endswith(".b"):
            out[k] = Tensor(rng.normal(0, 0.1, size=t.shape), requires_grad=True, dtype=np.float64)
            continue
        # deconv kernels are (C_in, C_out, k, k) and each output sees a quarter of the taps at stride 2
        fan = t.shape[0] * t.shape[2] * t.shape[3] / 4 if k.startswith("dec") else np.prod(t.shape[1:])
        out[k] = Tensor(rng.normal(0, math.sqrt(2.0 / fan), size=t.shape), requires_grad=True, dtype=np.float64)
    return out


@dataclass
class _Tiny:
    """Float64 networks small enough for finite differences."""

    G: object
    D: object
    ggb: object
    x: Tensor
    y: Tensor
    m: Tensor
    level: int

    @classmethod
    def build(cls, seed: int) -> _Tiny:
        rng = np.random.default_rng([seed, 12])
        dt = np.float64
        G = init_generator(rng, 3, base=4, cap=8, dtype=dt)
        D = init_global_discriminator(rng, base=4, cap=8, dtype=dt)
        ggb = init_ggb(rng, 2, feat_channels=(4, 6), disc_channels=6, dtype=dt)
        # the training init (std 0.02) leaves gradients near round-off; use fan-in scaling instead
        G, D, ggb = (net.replace(fan_in_scaled(net.tensors, rng)) for net in (G, D, ggb))
        x = Tensor(np.tanh(rng.normal(size=(2, 3, 32, 32))), dtype=dt)
        y = Tensor(np.tanh(rng.normal(size=(2, 3, 32, 32))), dtype=dt)
        m = Tensor(rng.uniform(0, 1, size=(2, 3, 32, 32)), dtype=dt)
        return cls(G, D, ggb, x, y, m, 2)


def _composites(tiny: _Tiny) -> dict[str, tuple[list[Tensor], Callable]]:
    G, D, ggb = tiny.G, tiny.D, tiny.ggb
    gk, dk, bk = sorted(G.tensors), sorted(D.tensors), sorted(ggb.tensors)
    w = LossWeights(active_levels=frozenset({tiny.level}))
    n = tiny.level
    xn, yn = T.downsample(tiny.x, 2), T.downsample(tiny.y, 2)

    def run_g(ts):
        return generate(G.replace(dict(zip(gk, ts))), tiny.x, tiny.m)

    def with_d(ts):
        return D.replace(dict(zip(dk, ts)))

    def with_b(ts):
        return ggb.replace(dict(zip(bk, ts)))

    fake = generate(G, tiny.x, tiny.m)
    fake_full, fake_n = fake.final.detach(), fake.images[n].detach()

    def ggb_total(ts):
        tr = run_g(ts)
        img = tr.images[n]
        lv = LevelLosses(loss_rapd_generator(rapd_score(ggb, feature_encode(ggb, img))),
                         loss_nvtd_generator(nvtd_score(ggb, residual_features(ggb, xn, img))),
                         loss_rec_level(yn, img))
        return loss_ggb_total({n: lv}, w)

    def g_total(ts):
        out = run_g(ts).final
        return loss_generator_total(loss_realism(global_score(D, out)), loss_rec_level(tiny.y, out), w)

    return {
        "L_D": ([D.tensors[k] for k in dk],
                lambda ts: loss_discriminator(global_score(with_d(ts), tiny.y), global_score(with_d(ts), fake_full))),
        "l_real": ([G.tensors[k] for k in gk], lambda ts: loss_realism(global_score(D, run_g(ts).final))),
        "l_rec": ([G.tensors[k] for k in gk], lambda ts: loss_rec_level(tiny.y, run_g(ts).final)),
        "L_G": ([G.tensors[k] for k in gk], g_total),
        "L_RAPD": ([ggb.tensors[k] for k in bk],
                   lambda ts: loss_rapd_discriminator(rapd_score(with_b(ts), feature_encode(with_b(ts), yn)),
                                                      rapd_score(with_b(ts), feature_encode(with_b(ts), fake_n)))),
        "L_NVTD": ([ggb.tensors[k] for k in bk],
                   lambda ts: loss_nvtd_discriminator(nvtd_score(with_b(ts), residual_features(with_b(ts), xn, yn)),
                                                      nvtd_score(with_b(ts), residual_features(with_b(ts), xn, fake_n)))),
        "l_RAPD": ([G.tensors[k] for k in gk],
                   lambda ts: loss_rapd_generator(rapd_score(ggb, feature_encode(ggb, run_g(ts).images[n])))),
        "l_NVTD": ([G.tensors[k] for k in gk],
                   lambda ts: loss_nvtd_generator(nvtd_score(ggb, residual_features(ggb, xn, run_g(ts).images[n])))),
        "L_GGB": ([G.tensors[k] for k in gk], ggb_total),
    }


def check_loss_gradients(seeds: int = 10) -> list[tuple[str, float]]:
    worst: dict[str, float] = {}
    for s in range(seeds):
        rng = np.random.default_rng([s, 13])
        for name, (inputs, fn) in _composites(_Tiny.build(s)).items():
            e = directional_check(fn, inputs, rng, h=COMPOSITE_H).rel_err
            worst[name] = max(worst.get(name, 0.0), e)
    return list(worst.items())


# ---------------------------------------------------------------------------
# forward oracles
# ---------------------------------------------------------------------------


def check_conv_oracle(seeds: int = 3) -> float:
    err = 0.0
    for s in range(seeds):
        rng = np.random.default_rng([s, 14])
        x, k, b = rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(3, 2, 4, 4)), rng.normal(size=3)
        fast = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=2, padding=1).data
        err = max(err, float(np.abs(fast - reference_conv2d(x, k, b, 2, 1)).max()))
    return err


def check_deconv_adjoint(seeds: int = 3) -> float:
    """max |<conv(u), v> - <u, deconv(v)>| relative to the inner-product scale."""
    err = 0.0
    for s in range(seeds):
        rng = np.random.default_rng([s, 15])
        k = rng.normal(size=(3, 2, 4, 4))
        u = rng.normal(size=(2, 2, 8, 8))
        v = rng.normal(size=(2, 3, 4, 4))
        lhs = float((T.conv2d(Tensor(u), Tensor(k), None, 2, 1).data * v).sum())
        # deconv kernels are (C_in, C_out, kh, kw): the conv kernel read the other way
        rhs = float((u * T.deconv2d(Tensor(v), Tensor(k), None, 2, 1).data).sum())
        err = max(err, abs(lhs - rhs) / max(1.0, abs(lhs)))
    return err


def check_loss_identities() -> list[tuple[str, float, float, float]]:
    """(name, value, expected, tolerance) at score 0.5 plus the weighted-total oracles."""
    half = Tensor(np.full((4, 1), 0.5))
    out = []
    for name, fn in (("L_D", loss_discriminator), ("L_RAPD", loss_rapd_discriminator),
                     ("L_NVTD", loss_nvtd_discriminator)):
        out.append((name, float(fn(half, half).data), 2 * math.log(2), 1e-6))
    for name, fn in (("l_real", loss_realism), ("l_RAPD", loss_rapd_generator), ("l_NVTD", loss_nvtd_generator)):
        out.append((name, float(fn(half).data), math.log(2), 1e-6))
    t = Tensor(np.random.default_rng(0).normal(size=(2, 3, 8, 8)))
    out.append(("l_rec(t,t)", float(loss_rec_level(t, t).data), 0.0, 0.0))
    w = LossWeights(active_levels=frozenset({3, 4, 5}))
    out.append(("L_G", float(loss_generator_total(0.7, 0.3, w).data), 0.3 + 0.02 * 0.7, 1e-10))
    levels = {3: (0.69, 0.71, 0.2), 4: (0.5, 0.8, 0.1), 5: (1.1, 0.4, 0.05), 2: (9.0, 9.0, 9.0)}
    expected = sum(0.01 * a + 0.01 * b + c for n, (a, b, c) in levels.items() if n in (3, 4, 5))
    out.append(("L_GGB", float(loss_ggb_total({n: LevelLosses(*v) for n, v in levels.items()}, w).data), expected,
                1e-10))
    return out


def check_ssim_oracle(pairs: int = 100) -> tuple[float, float, float]:
    """(max |fast - reference|, max |ssim(a,a) - 1|, max asymmetry)."""
    rng = np.random.default_rng(16)
    p = SsimParams()
    diff = selfdev = asym = 0.0
    for _ in range(pairs):
        a, b = rng.uniform(0, 1, size=(2, 3, 16, 16))
        s = ssim(a, b, p)
        diff = max(diff, abs(s - reference_ssim(a, b)))
        selfdev = max(selfdev, abs(ssim(a, a, p) - 1.0))
        asym = max(asym, abs(s - ssim(b, a, p)))
    return diff, selfdev, asym


# ---------------------------------------------------------------------------
# staged-update contract
# ---------------------------------------------------------------------------


@dataclass
class StagedTrace:
    phases: list[tuple[str, str]]
    version_log: list[tuple[str, dict[str, int]]]
    final_identical: bool
    rest_changed: bool
    order_ok: bool


def trace_staged_step(seed: int = 0) -> StagedTrace:
    from .data import SyntheticDataset
    from .training import TrainConfig, init_state, train_step

    cfg = TrainConfig(resolution=32, depth=3, num_ggbs=2, batch_size=2, num_pairs=4, g_base=4, g_cap=8, d_base=4,
                      d_cap=8, ggb_feat=(4, 4), ggb_disc=4, seed=seed, precision="float64")
    state = init_state(cfg)
    batch = SyntheticDataset(4, 32, seed=seed).batch([0, 1])
    final = final_stage_names(cfg.depth)
    snaps: dict[str, dict[str, bytes]] = {}
    version_log = []

    def observer(phase, group, st):
        version_log.append((phase, dict(st.versions)))
        snaps[phase] = {k: t.data.tobytes() for k, t in st.G.tensors.items()}

    before = dict(state.versions)
    report = train_step(state, batch, observer)
    ggbs = [f"ggb{n}" for n in cfg.active_levels]
    expected_groups = ["D", *ggbs, "G", "G"]
    order_ok = [g for _, g in report.phases] == expected_groups and \
        [p for p, _ in report.phases] == ["D"] + ["GGB"] * len(ggbs) + ["G-partial", "G-full"]
    # each notify must see exactly the groups updated so far
    bumped, v_prev = [], before
    for phase, v in version_log[1:]:
        bumped.append(sorted(k for k in v if v[k] != v_prev[k]))
        v_prev = v
    order_ok = order_ok and bumped == [["D"], *[[g] for g in ggbs], ["G"], ["G"]]
    pre, post = snaps["generate"], snaps["G-partial"]
    final_identical = all(pre[k] == post[k] for k in final)
    rest_changed = any(pre[k] != post[k] for k in pre if k not in final)
    return StagedTrace(report.phases, version_log, final_identical, rest_changed, order_ok)


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> Check:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as e:  # a crashing check is a failing check
        ok, detail = False, f"raised {type(e).__name__}: {e}"
    return Check(name, ok, detail, time.perf_counter() - t0)


def run_suite(seeds: int = 10, inject: str | None = None) -> list[Check]:
    ctx = T.fault_injection(inject) if inject else contextlib.nullcontext()
    checks = []
    with ctx:
        checks.append(_timed("conv2d vs loop oracle", lambda: (
            (e := check_conv_oracle()) < 1e-10, f"max abs err {e:.2e} < 1e-10")))
        checks.append(_timed("deconv2d is the conv2d adjoint", lambda: (
            (e := check_deconv_adjoint()) < 1e-8, f"rel err {e:.2e} < 1e-8")))
        for name, err in check_primitive_gradients(seeds):
            checks.append(Check(f"grad {name}", err < PRIMITIVE_TOL,
                                f"worst rel err {err:.2e} < {PRIMITIVE_TOL:g} over {seeds} seeds"))
        t0 = time.perf_counter()
        try:
            for name, err in check_loss_gradients(seeds):
                checks.append(Check(f"grad {name}", err < COMPOSITE_TOL,
                                    f"worst rel err {err:.2e} < {COMPOSITE_TOL:g} over {seeds} seeds"))
        except Exception as e:
            checks.append(Check("grad losses", False, f"raised {type(e).__name__}: {e}"))
        checks[-1].seconds = time.perf_counter() - t0
        for name, value, expected, tol in check_loss_identities():
            ok = abs(value - expected) <= tol
            checks.append(Check(f"identity {name}", ok, f"{value!r} vs {expected!r} (tol {tol:g})"))
        checks.append(_timed("ssim vs direct formula", lambda: _ssim_detail(*check_ssim_oracle())))
        checks.append(_timed("staged update order", _staged_detail))
    return checks


def _ssim_detail(diff, selfdev, asym):
    ok = diff < 1e-7 and selfdev <= 1e-9 and asym <= 1e-12
    return ok, f"oracle {diff:.1e} < 1e-7, |ssim(a,a)-1| {selfdev:.1e} <= 1e-9, asymmetry {asym:.1e} <= 1e-12"


def _staged_detail():
    tr = trace_staged_step()
    ok = tr.order_ok and tr.final_identical and tr.rest_changed
    order = " -> ".join(f"{p}:{g}" for p, g in tr.phases)
    return ok, f"{order}; final stage untouched in phase 4: {tr.final_identical}; rest moved: {tr.rest_changed}"
