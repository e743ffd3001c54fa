import math

import numpy as np
import pytest

from ggb import losses as L
from ggb.losses import LevelLosses, LossWeights, MissingLevelError, ScoreDomainError
from ggb.tensor import Tensor, backward

LN2 = math.log(2)
HALF = np.full((4, 1), 0.5)
DISC = [L.loss_discriminator, L.loss_rapd_discriminator, L.loss_nvtd_discriminator]
GEN = [L.loss_realism, L.loss_rapd_generator, L.loss_nvtd_generator]


@pytest.mark.parametrize("fn", DISC)
def test_discriminator_form_at_half(fn):
    assert float(fn(HALF, HALF).data) == pytest.approx(2 * LN2, abs=1e-6)


@pytest.mark.parametrize("fn", GEN)
def test_generator_form_at_half(fn):
    assert float(fn(HALF).data) == pytest.approx(LN2, abs=1e-6)


def test_shared_implementation():
    assert len(set(DISC)) == 1 and len(set(GEN)) == 1


@pytest.mark.parametrize("fn", DISC)
def test_perfect_discriminator_limit(fn):
    assert float(fn(np.full(3, 1 - 1e-6), np.full(3, 1e-6)).data) < 1e-5


@pytest.mark.parametrize("fn", GEN)
def test_fooled_discriminator_limit(fn):
    assert float(fn(np.full(3, 1 - 1e-6)).data) < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_scalar_oracles(seed):
    r = np.random.default_rng(seed)
    real, fake = r.uniform(0.01, 0.99, 6), r.uniform(0.01, 0.99, 6)
    expect_d = -sum(math.log(v) for v in real) / 6 - sum(math.log(1 - v) for v in fake) / 6
    expect_g = -sum(math.log(v) for v in fake) / 6
    for fn in DISC:
        assert abs(float(fn(real, fake).data) - expect_d) < 1e-10
    for fn in GEN:
        assert abs(float(fn(fake).data) - expect_g) < 1e-10


@pytest.mark.parametrize("bad", [0.0, 1.0, float("nan"), float("inf")])
def test_score_domain(bad):
    s = np.array([0.3, bad])
    with pytest.raises(ScoreDomainError):
        L.loss_discriminator(s, np.full(2, 0.5))
    with pytest.raises(ScoreDomainError):
        L.loss_realism(s)


def test_losses_non_negative():
    r = np.random.default_rng(9)
    for _ in range(20):
        a, b = r.uniform(1e-6, 1 - 1e-6, 4), r.uniform(1e-6, 1 - 1e-6, 4)
        assert float(L.loss_discriminator(a, b).data) >= 0
        assert float(L.loss_realism(a).data) >= 0


def test_rec_level():
    t = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 4)))
    assert float(L.loss_rec_level(t, t).data) == 0.0
    assert float(L.loss_rec_level(np.ones((1, 3, 4, 4)), np.zeros((1, 3, 4, 4))).data) == 1.0


def test_rec_subgradient():
    r = np.random.default_rng(1)
    y = Tensor(r.normal(size=(2, 3, 4, 4)))
    x_hat = Tensor(r.normal(size=(2, 3, 4, 4)), requires_grad=True)
    g = backward(L.loss_rec_level(y, x_hat))[x_hat]
    np.testing.assert_array_equal(g, np.sign(x_hat.data - y.data) / y.size)
    same = Tensor(y.data, requires_grad=True)
    assert not backward(L.loss_rec_level(y, same))[same].any()


def test_generator_total():
    w = LossWeights()
    assert (w.real, w.rapd, w.nvtd) == (0.02, 0.01, 0.01)
    assert float(L.loss_generator_total(LN2, 0.3, w).data) == pytest.approx(0.313863, abs=1e-6)
    assert abs(float(L.loss_generator_total(LN2, 0.3, w).data) - (0.02 * LN2 + 0.3)) < 1e-10
    assert float(L.loss_generator_total(0.9, 0.3, LossWeights(real=0.0)).data) == 0.3
    one = float(L.loss_generator_total(0.9, 0.0, LossWeights(real=0.02)).data)
    two = float(L.loss_generator_total(0.9, 0.0, LossWeights(real=0.04)).data)
    assert two == 2 * one


def test_ggb_total_single_level():
    w = LossWeights(active_levels={5})
    got = float(L.loss_ggb_total({5: LevelLosses(LN2, LN2, 0.5)}, w).data)
    assert got == pytest.approx(0.513863, abs=1e-6)
    assert abs(got - (0.01 * LN2 * 2 + 0.5)) < 1e-10


def test_ggb_total_zero_weights():
    w = LossWeights(rapd=0.0, nvtd=0.0, active_levels={3, 4})
    per = {n: LevelLosses(1.3, 0.7, None) for n in (3, 4)}
    assert float(L.loss_ggb_total(per, w).data) == 0.0


def test_ggb_total_additive_and_masked():
    per = {3: LevelLosses(0.6, 0.8, 0.2), 4: LevelLosses(0.4, 1.1, 0.1), 1: LevelLosses(5.0, 5.0, 5.0)}
    both = float(L.loss_ggb_total(per, LossWeights(active_levels={3, 4})).data)
    parts = sum(float(L.loss_ggb_total(per, LossWeights(active_levels={n})).data) for n in (3, 4))
    assert abs(both - parts) < 1e-12
    w = LossWeights(active_levels={3})
    assert w.lambda_rapd(1) == 0.0 and w.lambda_rapd(3) == 0.01


def test_ggb_total_missing_level():
    with pytest.raises(MissingLevelError):
        L.loss_ggb_total({3: LevelLosses(1, 1, 1)}, LossWeights(active_levels={3, 4}))


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(real=-1.0)
