import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyconv import ops
from dyconv.errors import ConfigError, DataError, ShapeError, StateError
from dyconv.gradcheck import check_function
from dyconv.ops import BatchNormState
from dyconv.tensor import Tape, Tensor, backward, no_grad


def naive_conv2d(x, w, b, stride, padding, groups=1):
    n, c_in, h, wd = x.shape
    c_out, cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    per_group = c_out // groups
    for i in range(n):
        for o in range(c_out):
            g = o // per_group
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for c in range(cg):
                        for dy in range(k):
                            for dx in range(k):
                                acc += xp[i, g * cg + c, y * stride + dy, xx * stride + dx] * w[o, c, dy, dx]
                    out[i, o, y, xx] = acc + (b[o] if b is not None else 0.0)
    return out


def f64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- Tensor and tape --------------------------------------------------------------------------
def test_default_dtype_is_f32_and_f64_is_kept():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64
    assert Tensor([1.0], dtype="f64").dtype == np.float64


def test_grad_of_sum_is_ones():
    x = f64(np.random.default_rng(0).normal(size=(3, 4)), grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_grad_of_sum_of_squares_is_2x():
    x = f64(np.random.default_rng(1).normal(size=(5,)), grad=True)
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_twice_accumulates():
    x = f64([1.0, -2.0, 3.0], grad=True)
    loss = (x * x).sum()
    backward(loss)
    backward(loss)
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_backward_rejects_non_scalar_root():
    x = f64([1.0, 2.0], grad=True)
    with pytest.raises(ShapeError):
        backward(x * x)


def test_fan_out_accumulates():
    x = f64([2.0], grad=True)
    y = x * x + x * 3.0
    backward(y.sum())
    np.testing.assert_allclose(x.grad, [2 * 2.0 + 3.0])


def test_tape_is_in_recording_order_and_visits_once():
    x = f64(np.ones(3), grad=True)
    a = x * 2.0
    b = a + x
    loss = (b * a).sum()
    seen = []
    tape = backward(loss, visit=lambda node: seen.append(node))
    assert len(seen) == len(tape) == len(set(map(id, seen)))
    seqs = [n.seq for n in seen]
    assert seqs == sorted(seqs, reverse=True)
    assert len(Tape.collect(loss)) == len(tape)


def test_no_grad_records_nothing():
    x = f64([1.0], grad=True)
    with no_grad():
        y = x * x
    assert y.node is None and not y.requires_grad


def test_broadcast_gradient_is_reduced():
    a = f64(np.ones((3, 4)), grad=True)
    b = f64(np.ones((1, 4)), grad=True)
    backward((a * b).sum())
    np.testing.assert_allclose(b.grad, 3 * np.ones((1, 4)))


# -- conv2d ------------------------------------------------------------------------------------
def test_conv_all_ones_is_nine():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 1, 5, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(w), padding=1).data, x)


def test_conv_matches_direct_summation():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = ops.conv2d(f64(x), f64(w), f64(b), stride=2, padding=1).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, b, 2, 1), rtol=1e-6, atol=1e-12)


@pytest.mark.parametrize("groups", [2, 4])
def test_grouped_and_depthwise_conv_match_direct_summation(groups):
    rng = np.random.default_rng(groups)
    x, w = rng.normal(size=(2, 4, 6, 6)), rng.normal(size=(4, 4 // groups, 3, 3))
    got = ops.conv2d(f64(x), f64(w), stride=1, padding=1, groups=groups).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, None, 1, 1, groups), rtol=1e-6, atol=1e-12)


def test_conv_output_size_floor():
    out = ops.conv2d(Tensor(np.zeros((1, 1, 7, 7))), Tensor(np.zeros((2, 1, 3, 3))), stride=2, padding=0)
    assert out.shape == (1, 2, 3, 3)


def test_conv_errors():
    x = Tensor(np.zeros((1, 4, 5, 5)))
    with pytest.raises(ConfigError):
        ops.conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), groups=2)  # 3 output channels, 2 groups
    with pytest.raises(ShapeError):
        ops.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((4, 5, 5))), Tensor(np.zeros((4, 4, 3, 3))))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
def test_conv_is_linear_in_the_weight(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    x = f64(rng.normal(size=(2, 3, 6, 6)))
    w1, w2 = rng.normal(size=(4, 3, 3, 3)), rng.normal(size=(4, 3, 3, 3))
    lhs = ops.conv2d(x, f64(alpha * w1 + beta * w2), padding=1).data
    rhs = alpha * ops.conv2d(x, f64(w1), padding=1).data + beta * ops.conv2d(x, f64(w2), padding=1).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-9)


# -- fully connected and pooling ------------------------------------------------------------------
def test_fc_identity():
    out = ops.fully_connected(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_fc_static_xor_hidden_layer():
    out = ops.fully_connected(Tensor([[1.0, 1.0]]), Tensor([[1.0, 1.0], [1.0, 1.0]]), Tensor([0.0, -1.0]))
    np.testing.assert_array_equal(out.data, [[2.0, 1.0]])


def test_fc_matches_dot_products():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(4, 16)), rng.normal(size=(8, 16))
    expected = np.array([[sum(x[i, k] * w[j, k] for k in range(16)) for j in range(8)] for i in range(4)])
    np.testing.assert_allclose(ops.fully_connected(f64(x), f64(w)).data, expected, rtol=1e-6)


def test_fc_shape_error():
    with pytest.raises(ShapeError):
        ops.fully_connected(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_gap_constant_planes():
    x = np.stack([np.full((2, 2), 4.0), np.full((2, 2), -1.0)])[None]
    np.testing.assert_array_equal(ops.global_avg_pool(Tensor(x)).data, [[4.0, -1.0]])
    np.testing.assert_allclose(ops.global_avg_pool(Tensor(np.arange(1.0, 5.0).reshape(1, 1, 2, 2))).data, [[2.5]])


def test_gap_gradient_is_uniform():
    x = f64(np.random.default_rng(0).normal(size=(2, 3, 4, 5)), grad=True)
    backward(ops.global_avg_pool(x).sum())
    np.testing.assert_allclose(x.grad, np.full(x.shape, 1 / 20))


def test_gap_rejects_empty_plane():
    with pytest.raises(ShapeError):
        ops.global_avg_pool(Tensor(np.zeros((1, 2, 0, 3))))


# -- relu and batch norm ------------------------------------------------------------------------
def test_relu():
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_bn_train_standardizes_each_channel():
    rng = np.random.default_rng(0)
    x = f64(rng.normal(loc=3.0, scale=2.0, size=(8, 3, 4, 4)))
    out = ops.batch_norm(x, f64(np.ones(3)), f64(np.zeros(3)), BatchNormState(), True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)


def test_bn_updates_running_stats_with_momentum():
    x = np.random.default_rng(1).normal(size=(4, 2, 3, 3))
    state = BatchNormState()
    ops.batch_norm(f64(x), f64(np.ones(2)), f64(np.zeros(2)), state, True)
    m = x.size // 2
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_bn_eval_needs_running_stats():
    with pytest.raises(StateError):
        ops.batch_norm(f64(np.zeros((2, 2))), f64(np.ones(2)), f64(np.zeros(2)), BatchNormState(), False)


def test_bn_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = f64(rng.normal(size=(2, 3, 4, 4)), grad=True)
    gamma, beta = f64(rng.uniform(0.5, 1.5, 3), grad=True), f64(rng.normal(size=3), grad=True)
    res = check_function("bn", lambda: ops.batch_norm(x, gamma, beta, BatchNormState(), True), [x, gamma, beta], rng)
    assert res.max_rel_error < 1e-3


# -- softmax and cross entropy ------------------------------------------------------------------
@pytest.mark.parametrize("tau", [0.1, 1.0, 30.0])
def test_softmax_of_equal_logits_is_uniform(tau):
    np.testing.assert_allclose(ops.softmax_with_temperature(Tensor(np.zeros((1, 4))), tau).data, [[0.25] * 4])


def test_softmax_known_values():
    z = Tensor([[2.0, 0.0]], dtype="f64")
    np.testing.assert_allclose(ops.softmax_with_temperature(z, 1.0).data, [[0.8808, 0.1192]], atol=1e-4)
    np.testing.assert_allclose(ops.softmax_with_temperature(z, 30.0).data, [[0.5167, 0.4833]], atol=1e-4)


def test_softmax_rejects_bad_temperature():
    for tau in (0.0, -1.0):
        with pytest.raises(ConfigError):
            ops.softmax_with_temperature(Tensor(np.zeros((1, 2))), tau)


def test_softmax_survives_huge_logits():
    p = ops.softmax_with_temperature(Tensor([[1e4, -1e4, 0.0]]), 1e-3).data
    assert np.all(np.isfinite(p)) and abs(p.sum() - 1) < 1e-6


def entropy(p):
    return float(-(p * np.log(np.clip(p, 1e-300, None))).sum())


def test_entropy_grows_with_temperature():
    rng = np.random.default_rng(0)
    taus = [0.1, 0.5, 1.0, 2.0, 5.0, 30.0, 1e3]
    for _ in range(100):
        z = f64(rng.normal(scale=3.0, size=(1, 4)))
        ents = [entropy(ops.softmax_with_temperature(z, t).data) for t in taus]
        assert all(a <= b + 1e-9 for a, b in zip(ents, ents[1:]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(0.01, 100))
def test_softmax_rows_lie_in_simplex(z, tau):
    p = ops.softmax_with_temperature(Tensor([z], dtype="f64"), tau).data
    assert np.all(p >= 0) and np.all(p <= 1) and abs(p.sum() - 1) < 1e-6


def test_cross_entropy_cases():
    assert ops.cross_entropy_loss(Tensor(np.eye(3) * 100.0), [0, 1, 2]).data < 1e-6
    assert abs(float(ops.cross_entropy_loss(Tensor(np.zeros((2, 7))), [3, 4]).data) - math.log(7)) < 1e-6
    rng = np.random.default_rng(0)
    z, y = rng.normal(size=(4, 10)), rng.integers(0, 10, 4)
    lse = np.log(np.exp(z).sum(axis=1))
    expected = np.mean(lse - z[np.arange(4), y])
    assert abs(float(ops.cross_entropy_loss(f64(z), y).data) - expected) < 1e-6


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(DataError):
        ops.cross_entropy_loss(Tensor(np.zeros((2, 3))), [0, 3])


# -- MAC counting -----------------------------------------------------------------------------
def test_mac_counter_counts_conv_and_fc():
    with ops.count_macs() as c:
        ops.conv2d(Tensor(np.zeros((2, 4, 6, 6))), Tensor(np.zeros((8, 2, 3, 3))), padding=1, groups=2)
        with ops.mac_category("attention"):
            ops.fully_connected(Tensor(np.zeros((2, 5))), Tensor(np.zeros((3, 5))))
    assert c["conv"] == 2 * 36 * 8 * 2 * 9
    assert c["attention"] == 2 * 15
    assert c.total == c["conv"] + c["attention"]
