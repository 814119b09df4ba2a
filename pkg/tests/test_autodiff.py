import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from combreg import autodiff as ad
from combreg.autodiff import BatchNormState, ContractError, ShapeError, Tensor
from oracles import numeric_grad, rel_error


def leaf(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def check_grads(fn, leaves, weights=None, tol=1e-4):
    """Compare backprop of sum(w * fn()) against central differences for every leaf."""
    out = fn()
    w = weights if weights is not None else np.random.default_rng(7).normal(size=out.shape)
    loss = (out * Tensor(w)).sum()
    loss.backward()
    for t in leaves:
        num = numeric_grad(lambda: float((fn().data * w).sum()), t.data)
        assert rel_error(t.grad, num) < tol, t.op


# ------------------------------------------------------------- examples
def test_identity_kernel_conv():
    x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
    out = ad.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x.data)


def test_zero_input_conv_gives_bias():
    x = Tensor(np.zeros((2, 3, 5, 5)))
    k = Tensor(np.random.default_rng(0).normal(size=(4, 3, 3, 3)))
    b = Tensor(np.array([0.5, -1.0, 2.0, 0.0]))
    out = ad.conv2d(x, k, b, padding=1)
    for c in range(4):
        assert np.all(out.data[:, c] == b.data[c])


def test_conv_matches_direct_cross_correlation():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 2, 6, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    for stride, pad in [(1, 1), (2, 1), (1, 0)]:
        out = ad.conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (xp.shape[2] - 3) // stride + 1
        wo = (xp.shape[3] - 3) // stride + 1
        ref = np.zeros((2, 3, ho, wo))
        for n in range(2):
            for o in range(3):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[n, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                        ref[n, o, i, j] = (patch * k[o]).sum()
        np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_channel_mismatch_is_shape_error():
    with pytest.raises(ShapeError, match="channels"):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_input_gradient_fd():
    rng = np.random.default_rng(2)
    x, k = leaf(rng, 1, 2, 5, 5), leaf(rng, 3, 2, 3, 3)
    check_grads(lambda: ad.conv2d(x, k, padding=1), [x, k], weights=np.ones((1, 3, 5, 5)))


def test_relu_values():
    np.testing.assert_array_equal(ad.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])


def test_softmax_equal_logits():
    out = ad.softmax_channels(Tensor(np.zeros((1, 4, 2, 2))))
    np.testing.assert_allclose(out.data, 0.25)


def test_sigmoid_gradient_at_zero():
    t = Tensor(np.zeros(1), requires_grad=True)
    ad.sigmoid(t).sum().backward()
    assert t.grad[0] == pytest.approx(0.25)
    num = numeric_grad(lambda: float(ad.sigmoid(Tensor(t.data)).data.sum()), t.data)
    assert num[0] == pytest.approx(0.25, abs=1e-9)


def test_maxpool_single_window():
    out = ad.maxpool2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
    np.testing.assert_array_equal(out.data, [[[[4.0]]]])


def test_maxpool_odd_extent_rejected():
    with pytest.raises(ShapeError):
        ad.maxpool2(Tensor(np.zeros((1, 1, 3, 4))))


def test_upsample_then_pool_is_identity():
    x = Tensor(np.random.default_rng(3).normal(size=(2, 3, 4, 5)))
    np.testing.assert_array_equal(ad.maxpool2(ad.upsample2(x)).data, x.data)


def test_concat_extent_mismatch():
    with pytest.raises(ShapeError, match="extent"):
        ad.concat_channels(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 2))))


def test_global_max_pool_gradient_at_unique_max():
    x = Tensor(np.random.default_rng(4).permutation(32).astype(float).reshape(1, 2, 4, 4), requires_grad=True)
    ad.global_max_pool(x).sum().backward()
    for c in range(2):
        expect = (x.data[0, c] == x.data[0, c].max()).astype(float)
        np.testing.assert_array_equal(x.grad[0, c], expect)


def test_max_tie_goes_to_first_index():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    ad.maxpool2(x).sum().backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])
    y = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    ad.global_max_pool(y).sum().backward()
    np.testing.assert_array_equal(y.grad[0, 0], [[1, 0], [0, 0]])


def test_batch_norm_constant_channel_is_zero():
    x = Tensor(np.full((2, 1, 3, 3), 5.0))
    out = ad.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)))
    np.testing.assert_allclose(out.data, 0.0)


def test_batch_norm_gamma_zero_gives_beta():
    x = Tensor(np.random.default_rng(5).normal(size=(2, 3, 4, 4)))
    beta = np.array([1.0, -2.0, 0.5])
    out = ad.batch_norm(x, Tensor(np.zeros(3)), Tensor(beta))
    np.testing.assert_allclose(out.data, np.broadcast_to(beta.reshape(1, 3, 1, 1), out.shape))


def test_batch_norm_train_moments():
    x = Tensor(np.random.default_rng(6).uniform(-1, 1, size=(4, 3, 5, 5)) * 3 + 2)
    out = ad.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-6
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-3


def test_batch_norm_running_moments_and_eval():
    rng = np.random.default_rng(8)
    state = BatchNormState(2)
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    with pytest.raises(ContractError):
        ad.batch_norm(Tensor(np.zeros((1, 2, 2, 2))), g, b, "eval", state)
    x = rng.normal(size=(3, 2, 4, 4))
    ad.batch_norm(Tensor(x), g, b, "train", state)
    m = 3 * 16
    np.testing.assert_allclose(state.mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(state.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    out = ad.batch_norm(Tensor(x), g, b, "eval", state).data
    ref = (x - state.mean.reshape(1, 2, 1, 1)) / np.sqrt(state.var.reshape(1, 2, 1, 1) + 1e-5)
    np.testing.assert_allclose(out, ref)


def test_backward_sum_gives_ones():
    t = Tensor(np.random.default_rng(9).normal(size=(3, 4)), requires_grad=True)
    t.sum().backward()
    np.testing.assert_array_equal(t.grad, np.ones((3, 4)))


def test_backward_zero_times_anything():
    t = Tensor(np.random.default_rng(10).normal(size=(5,)), requires_grad=True)
    (ad.sigmoid(t) * 0.0).sum().backward()
    np.testing.assert_array_equal(t.grad, 0.0)


def test_backward_non_scalar_rejected():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (t * 2.0).backward()


def test_gradients_accumulate():
    t = Tensor(np.ones(3), requires_grad=True)
    (t * 2.0).sum().backward()
    (t * 3.0).sum().backward()
    np.testing.assert_array_equal(t.grad, 5.0)


def test_unet_block_gradients_fd():
    rng = np.random.default_rng(11)
    x = leaf(rng, 2, 2, 4, 4)
    k = leaf(rng, 3, 2, 3, 3)
    gamma, beta = leaf(rng, 3, lo=0.5, hi=1.5), leaf(rng, 3)

    def block():
        h = ad.relu(ad.batch_norm(ad.conv2d(x, k, padding=1), gamma, beta))
        return ad.maxpool2(h)

    check_grads(block, [x, k, gamma, beta])


def test_tape_is_reverse_topological():
    rng = np.random.default_rng(12)
    a, b = leaf(rng, 3), leaf(rng, 3)
    c = a * b
    d = ad.sigmoid(c) + a
    e = (d * c).sum()
    tape = ad.build_tape(e)
    pos = {id(n): i for i, n in enumerate(tape)}
    assert len(pos) == len(tape)
    for node in tape:
        for parent in node._parents:
            if id(parent) in pos:
                assert pos[id(node)] < pos[id(parent)]


def test_forward_backward_bit_identical():
    def run():
        rng = np.random.default_rng(13)
        x, k = leaf(rng, 2, 1, 8, 8), leaf(rng, 4, 1, 3, 3)
        y = ad.softmax_channels(ad.conv2d(x, k, padding=1))
        (y * y).sum().backward()
        return y.data, k.grad

    (y1, g1), (y2, g2) = run(), run()
    assert np.array_equal(y1, y2) and np.array_equal(g1, g2)


# ------------------------------------------------------------ properties
@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_softmax_partitions_unity(seed, channels):
    logits = np.random.default_rng(seed).uniform(-30, 30, size=(2, channels, 3, 3))
    out = ad.softmax_channels(Tensor(logits)).data
    assert np.all(out > 0)
    assert np.abs(out.sum(axis=1) - 1).max() <= 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_elementwise_ops_fd(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, 2, 3, 2, 2)
    b = leaf(rng, 1, 3, 1, 1, lo=0.5, hi=1.5)
    check_grads(lambda: ad.leaky_relu(a * b - a / b, 0.2) + ad.sigmoid(a) + ad.log(b) + ad.square(a), [a, b])
