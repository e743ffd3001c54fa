import itertools

import numpy as np
import pytest

from ggb import tensor as T
from ggb.oracles import directional_check, reference_conv2d
from ggb.tensor import ShapeError, Tensor, backward
from ggb.verify import PRIMITIVES, check_primitive_gradients


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# -- conv / deconv ---------------------------------------------------------


def test_conv_scalar_kernel_scales_input():
    x = t64([[[[1, 2], [3, 4]]]])
    out = T.conv2d(x, t64([[[[2.0]]]]), t64([0.0]))
    np.testing.assert_array_equal(out.data, [[[[2, 4], [6, 8]]]])


def test_conv_zero_input_gives_bias(rng):
    out = T.conv2d(t64(np.zeros((2, 3, 6, 6))), t64(rng.normal(size=(4, 3, 3, 3))), t64([1.0, -2.0, 0.5, 3.0]), 1, 1)
    for o, b in enumerate([1.0, -2.0, 0.5, 3.0]):
        assert np.all(out.data[:, o] == b)


@pytest.mark.parametrize("seed", range(3))
def test_conv_matches_loop_oracle(seed):
    r = np.random.default_rng(seed)
    x, k, b = r.normal(size=(1, 2, 6, 6)), r.normal(size=(3, 2, 4, 4)), r.normal(size=3)
    fast = T.conv2d(t64(x), t64(k), t64(b), stride=2, padding=1).data
    assert fast.shape == (1, 3, 3, 3)
    np.testing.assert_allclose(fast, reference_conv2d(x, k, b, 2, 1), rtol=0, atol=1e-10)


@pytest.mark.parametrize("h,k,s,p", [(7, 3, 1, 0), (8, 4, 2, 1), (9, 3, 2, 1), (5, 1, 1, 0), (6, 2, 3, 2)])
def test_conv_output_size(h, k, s, p):
    out = T.conv2d(t64(np.ones((1, 1, h, h))), t64(np.ones((1, 1, k, k))), None, s, p)
    assert out.shape[-1] == (h + 2 * p - k) // s + 1


def test_conv_shape_errors_name_the_dimension():
    with pytest.raises(ShapeError, match="channel"):
        T.conv2d(t64(np.ones((1, 3, 4, 4))), t64(np.ones((2, 2, 3, 3))))
    with pytest.raises(ShapeError, match="4-D"):
        T.conv2d(t64(np.ones((3, 4, 4))), t64(np.ones((2, 3, 3, 3))))
    with pytest.raises(ValueError, match="stride"):
        T.conv2d(t64(np.ones((1, 3, 4, 4))), t64(np.ones((2, 3, 3, 3))), stride=0)


def test_deconv_single_input_spreads_kernel():
    out = T.deconv2d(t64([[[[3.0]]]]), t64(np.ones((1, 1, 2, 2))), None, stride=2, padding=0)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.0))


def test_deconv_zero_kernel(rng):
    out = T.deconv2d(t64(rng.normal(size=(2, 3, 4, 4))), t64(np.zeros((3, 2, 4, 4))), t64([0.0, 0.0]), 2, 1)
    assert out.shape == (2, 2, 8, 8)
    assert not out.data.any()


@pytest.mark.parametrize("seed,stride,pad,k", [(0, 2, 1, 4), (1, 1, 0, 3), (2, 2, 0, 2), (3, 3, 1, 3)])
def test_deconv_is_conv_adjoint(seed, stride, pad, k):
    r = np.random.default_rng(seed)
    kern = r.normal(size=(3, 2, k, k))
    size = 4 * stride - 2 * pad + k  # conv then deconv returns to this size exactly
    u = r.normal(size=(2, 2, size, size))
    cu = T.conv2d(t64(u), t64(kern), None, stride, pad).data
    v = r.normal(size=cu.shape)
    dv = T.deconv2d(t64(v), t64(kern), None, stride, pad).data
    assert dv.shape == u.shape
    lhs, rhs = float((cu * v).sum()), float((u * dv).sum())
    assert abs(lhs - rhs) < 1e-8 * max(1.0, abs(lhs))


def test_deconv_output_size():
    out = T.deconv2d(t64(np.ones((1, 2, 5, 5))), t64(np.ones((2, 1, 4, 4))), None, stride=2, padding=1)
    assert out.shape[-1] == (5 - 1) * 2 - 2 + 4


# -- elementwise and reductions ------------------------------------------------


def test_activation_values():
    assert float(T.elementwise("sigmoid", t64(0.0)).data) == 0.5
    assert float(T.elementwise("leaky_relu", t64(-1.0), slope=0.2).data) == pytest.approx(-0.2, abs=1e-15)
    assert float(T.elementwise("relu", t64(-3.0)).data) == 0.0
    with pytest.raises(ValueError, match="unknown activation"):
        T.elementwise("swish", t64(1.0))


def test_sigmoid_is_finite_at_extremes():
    y = T.sigmoid(t64([-800.0, 800.0])).data
    assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0


def test_reductions():
    assert float(T.reduce("mean", t64([1, 2, 3, 4])).data) == 2.5
    t = t64(np.arange(6.0).reshape(2, 3))
    assert float(T.reduce("l1_distance", t, t).data) == 0.0
    assert float(T.reduce("l1_distance", t64(np.ones((2, 2))), t64(np.zeros((2, 2)))).data) == 1.0
    with pytest.raises(ShapeError):
        T.l1_distance(t64(np.ones(3)), t64(np.ones(4)))


def test_downsample():
    np.testing.assert_array_equal(T.downsample(t64(np.full((1, 1, 4, 4), 0.3)), 2).data, np.full((1, 1, 2, 2), 0.3))
    np.testing.assert_array_equal(T.downsample(t64([[[[1, 2], [3, 4]]]]), 2).data, [[[[2.5]]]])
    with pytest.raises(ShapeError, match="divisible"):
        T.downsample(t64(np.ones((1, 1, 6, 6))), 4)


def test_downsample_composition(rng):
    img = t64(rng.normal(size=(1, 3, 64, 64)))
    twice = T.downsample(T.downsample(img, 2), 2).data
    np.testing.assert_allclose(twice, T.downsample(img, 4).data, rtol=0, atol=1e-10)


# -- backward ------------------------------------------------------------------


def test_backward_sum_and_square():
    p = t64([1.0, 2.0], grad=True)
    np.testing.assert_array_equal(backward(p.sum())[p], [1.0, 1.0])
    np.testing.assert_array_equal(backward((p * p).sum())[p], [2.0, 4.0])


def test_backward_rejects_non_scalar():
    p = t64([1.0, 2.0], grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        backward(p * 2.0)


def test_loss_gradient_of_itself_is_one():
    p = t64([1.0, 2.0], grad=True)
    loss = (p * p).sum()
    assert float(backward(loss, wrt=[loss])[loss]) == 1.0


def test_no_gradient_for_constants():
    p = t64([1.0, 2.0], grad=True)
    c = t64([3.0, 4.0])
    grads = backward((p * c).sum())
    assert c not in grads and p in grads


def test_tape_visits_each_node_once(rng):
    a = t64(rng.normal(size=3), grad=True)
    b = a * a
    loss = (b + b * a).sum()
    tape = T.GradTape(loss)
    assert len({id(n) for n in tape.nodes}) == len(tape.nodes)
    orders = [n._node.order for n in tape.nodes]
    assert orders == sorted(orders)


def test_dag_equals_chain(rng):
    """A reused intermediate accumulates the same gradient as spelled-out copies."""
    x0 = rng.normal(size=(4, 5))
    a = t64(x0, grad=True)
    h = T.tanh(a)
    dag = (h * h + h).sum()
    b = t64(x0, grad=True)
    h1, h2, h3 = T.tanh(b), T.tanh(b), T.tanh(b)
    chain = (h1 * h2 + h3).sum()
    np.testing.assert_allclose(backward(dag)[a], backward(chain)[b], rtol=0, atol=1e-12)


def test_graph_can_be_differentiated_twice(rng):
    a = t64(rng.normal(size=3), grad=True)
    h = T.tanh(a)
    g1 = backward(h.sum())[a]
    g2 = backward(h.sum())[a]
    np.testing.assert_array_equal(g1, g2)


def test_ops_do_not_mutate_inputs(rng):
    for name, (make, fn) in PRIMITIVES.items():
        inputs = make(np.random.default_rng(7))
        before = [t.data.copy() for t in inputs]
        out = fn(inputs)
        scalar = out.sum() if out.size > 1 else out
        backward(scalar)
        for t, b in zip(inputs, before):
            np.testing.assert_array_equal(t.data, b, err_msg=name)
            assert not t.data.flags.writeable


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient(name):
    ((_, err),) = check_primitive_gradients(10, [name])
    assert err < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_tanh_jvp(seed):
    r = np.random.default_rng(seed)
    res = directional_check(lambda ts: T.tanh(ts[0]).sum(), [t64(r.normal(size=(3, 4)))], r, h=1e-5)
    assert res.rel_err < 1e-6


def test_kink_crossing_shrinks_step():
    # |x| at 1e-4 with h=1e-3 straddles the kink; the step must shrink below it
    res = directional_check(lambda ts: T.l1_distance(ts[0], t64([0.0])), [t64([1e-4])], np.random.default_rng(0))
    assert res.h < 1e-4 and res.rel_err < 1e-9


def test_fault_injection_corrupts_conv_gradient(rng):
    x = t64(rng.normal(size=(1, 2, 5, 5)))
    k = t64(rng.normal(size=(2, 2, 3, 3)))
    fn = lambda ts: (T.conv2d(ts[0], ts[1]) * T.conv2d(ts[0], ts[1])).sum()
    assert directional_check(fn, [x, k], np.random.default_rng(0), h=1e-5).rel_err < 1e-6
    with T.fault_injection("conv_backward_sign"):
        assert directional_check(fn, [x, k], np.random.default_rng(0), h=1e-5).rel_err > 1e-2
    with pytest.raises(ValueError, match="unknown fault"):
        with T.fault_injection("nope"):
            pass
