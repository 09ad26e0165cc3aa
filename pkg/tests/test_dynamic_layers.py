import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyconv import ops
from dyconv.dynamic import (
    XOR_LABELS,
    XOR_POINTS,
    AggregationMode,
    AttentionBranch,
    DynamicConv2d,
    aggregate_kernels,
    apply_mode,
    attention_forward,
    dynamic_conv_forward,
    dynamic_perceptron_forward,
    dynamic_xor,
    random_derangement,
    reduction_dim,
    static_perceptron_xor,
)
from dyconv.errors import ConfigError, InvariantError, ShapeError
from dyconv.gradcheck import check_function
from dyconv.ops import BatchNormState
from dyconv.tensor import Tensor, backward, no_grad


def layer(c_in=8, c_out=6, k=4, stride=1, groups=1, seed=0, tau=1.0, dtype=np.float64):
    return DynamicConv2d(c_in, c_out, 3, stride, groups=groups, k=k, tau=tau,
                         rng=np.random.default_rng(seed), dtype=dtype)


def randomize_attention(lyr, seed=1, scale=1.0):
    rng = np.random.default_rng(seed)
    for t in (lyr.attention.fc2_weight, lyr.attention.fc2_bias):
        t.data[...] = rng.normal(scale=scale, size=t.shape)


def rand_x(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape), dtype="f64")


def static_reference(lyr, x, w, b):
    y = ops.conv2d(x, Tensor(w), Tensor(b), lyr.stride, lyr.padding, lyr.groups)
    return ops.activation(ops.batch_norm(y, lyr.bn.gamma, lyr.bn.beta, BatchNormState(), True), lyr.activation)


# -- attention branch -------------------------------------------------------------------------------
@pytest.mark.parametrize("c_in,r", [(1, 1), (3, 1), (4, 1), (8, 2), (32, 8), (33, 8)])
def test_reduction_dim(c_in, r):
    assert reduction_dim(c_in) == r


def test_fresh_branch_gives_uniform_attention():
    branch = AttentionBranch(8, 4, 1.0, np.random.default_rng(0), np.float64)
    pi = attention_forward(branch, rand_x((3, 8, 5, 5))).data
    np.testing.assert_array_equal(pi, np.full((3, 4), 0.25))


def test_huge_temperature_flattens_attention():
    branch = AttentionBranch(8, 4, 1e6, np.random.default_rng(0), np.float64)
    branch.fc2_weight.data[...] = np.random.default_rng(1).normal(scale=10, size=branch.fc2_weight.shape)
    pi = attention_forward(branch, rand_x((3, 8, 5, 5))).data
    np.testing.assert_allclose(pi, 0.25, atol=1e-4)


def test_attention_equals_composition_of_primitives():
    branch = AttentionBranch(8, 4, 30.0, np.random.default_rng(0), np.float64)
    branch.fc2_weight.data[...] = np.random.default_rng(1).normal(size=branch.fc2_weight.shape)
    x = rand_x((2, 8, 4, 4))
    pooled = ops.global_avg_pool(x)
    hidden = ops.relu(ops.fully_connected(pooled, branch.fc1_weight, branch.fc1_bias))
    z = ops.fully_connected(hidden, branch.fc2_weight, branch.fc2_bias)
    expected = ops.softmax_with_temperature(z, 30.0).data
    np.testing.assert_array_equal(attention_forward(branch, x).data, expected)


def test_attention_channel_mismatch():
    branch = AttentionBranch(8, 4, 1.0, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        attention_forward(branch, Tensor(np.zeros((1, 5, 3, 3))))


def test_thousand_attention_draws_lie_in_simplex():
    branch = AttentionBranch(8, 4, 1.0, np.random.default_rng(0), np.float64)
    rng = np.random.default_rng(7)
    for i in range(1000):
        branch.fc2_weight.data[...] = rng.normal(scale=3, size=branch.fc2_weight.shape)
        pi = attention_forward(branch, Tensor(rng.normal(size=(1, 8, 3, 3)))).data
        assert np.all(pi >= 0) and abs(pi.sum() - 1) < 1e-6


# -- kernel aggregation -------------------------------------------------------------------------
def test_vertex_attention_selects_a_kernel():
    rng = np.random.default_rng(0)
    bank = Tensor(rng.normal(size=(2, 3, 2, 3, 3)))
    w, _ = aggregate_kernels(Tensor(np.array([[1.0, 0.0]])), bank)
    np.testing.assert_array_equal(w.data[0], bank.data[0])


def test_midpoint_attention_halves():
    t = np.random.default_rng(1).normal(size=(3, 2, 3, 3))
    bank = Tensor(np.stack([2 * t, np.zeros_like(t)]))
    w, _ = aggregate_kernels(Tensor(np.array([[0.5, 0.5]])), bank)
    np.testing.assert_array_equal(w.data[0], t)


def test_aggregation_matches_direct_sum():
    rng = np.random.default_rng(2)
    pi = rng.dirichlet(np.ones(4), size=3)
    bank, bias = rng.normal(size=(4, 5, 2, 3, 3)), rng.normal(size=(4, 5))
    w, b = aggregate_kernels(Tensor(pi), Tensor(bank), Tensor(bias))
    for n in range(3):
        np.testing.assert_allclose(w.data[n], sum(pi[n, k] * bank[k] for k in range(4)), atol=1e-7)
        np.testing.assert_allclose(b.data[n], sum(pi[n, k] * bias[k] for k in range(4)), atol=1e-7)


def test_aggregation_rejects_off_simplex_attention():
    with pytest.raises(InvariantError):
        aggregate_kernels(Tensor(np.array([[0.6, 0.6]])), Tensor(np.zeros((2, 1, 1, 3, 3))))
    with pytest.raises(InvariantError):
        aggregate_kernels(Tensor(np.array([[1.5, -0.5]])), Tensor(np.zeros((2, 1, 1, 3, 3))))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(1, 6))
def test_aggregate_stays_in_convex_hull(seed, k):
    rng = np.random.default_rng(seed)
    bank = rng.normal(size=(k, 4, 2, 3, 3))
    pi = rng.dirichlet(np.ones(k), size=5)
    w, _ = aggregate_kernels(Tensor(pi), Tensor(bank))
    lo, hi = bank.min(axis=0), bank.max(axis=0)
    eps = 1e-12
    assert np.all(w.data >= lo - eps) and np.all(w.data <= hi + eps)


# -- dynamic conv layer -------------------------------------------------------------------------
def test_k1_layer_equals_static_layer():
    lyr = layer(k=1)
    randomize_attention(lyr)
    x = rand_x((3, 8, 6, 6))
    got = lyr(x).data
    ref = static_reference(lyr, x, lyr.kernels.data[0], lyr.biases.data[0]).data
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_identical_kernels_equal_static_layer_for_any_attention():
    lyr = layer(k=4)
    lyr.kernels.data[...] = lyr.kernels.data[0]
    lyr.biases.data[...] = lyr.biases.data[0]
    randomize_attention(lyr, scale=5.0)
    x = rand_x((3, 8, 6, 6))
    ref = static_reference(lyr, x, lyr.kernels.data[0], lyr.biases.data[0]).data
    np.testing.assert_allclose(lyr(x).data, ref, atol=1e-6)


@pytest.mark.parametrize("groups,stride", [(1, 1), (2, 2), (8, 1)])
def test_batched_forward_equals_per_sample_loop(groups, stride):
    c_out = 8 if groups == 8 else 6
    lyr = layer(c_out=c_out, groups=groups, stride=stride)
    randomize_attention(lyr)
    lyr.eval()
    lyr.bn.stats.running_mean = np.random.default_rng(3).normal(size=c_out)
    lyr.bn.stats.running_var = np.random.default_rng(4).uniform(0.5, 2, size=c_out)
    x = rand_x((4, 8, 7, 7))
    batched = lyr(x).data
    single = np.concatenate([lyr(Tensor(x.data[i:i + 1])).data for i in range(4)])
    np.testing.assert_allclose(batched, single, rtol=1e-5, atol=1e-9)


def test_conv_of_aggregate_equals_aggregate_of_convs():
    rng = np.random.default_rng(0)
    x = rand_x((1, 3, 6, 6))
    bank = rng.normal(size=(4, 5, 3, 3, 3))
    pi = rng.dirichlet(np.ones(4))
    w, _ = aggregate_kernels(Tensor(pi[None]), Tensor(bank))
    lhs = ops.conv2d(x, Tensor(w.data[0]), padding=1).data
    rhs = sum(pi[k] * ops.conv2d(x, Tensor(bank[k]), padding=1).data for k in range(4))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-10)


def test_output_channels_match_static_counterpart():
    assert layer(c_out=6)(rand_x((2, 8, 5, 5))).shape == (2, 6, 5, 5)


def test_gradient_reaches_attention_and_kernels():
    lyr = layer()
    randomize_attention(lyr)
    x = rand_x((3, 8, 5, 5))
    backward((lyr(x) * rand_x((3, 6, 5, 5), seed=9)).sum())
    for t in (lyr.kernels, lyr.biases, lyr.attention.fc1_weight, lyr.attention.fc2_weight):
        assert t.grad is not None and np.abs(t.grad).max() > 0


def test_full_layer_gradcheck():
    lyr = layer(stride=2, groups=2, k=3, tau=1.5)
    randomize_attention(lyr)
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(3, 8, 5, 5)), requires_grad=True)
    params = [x, lyr.kernels, lyr.biases, lyr.attention.fc1_weight, lyr.attention.fc2_weight, lyr.bn.gamma]
    res = check_function("dyconv", lambda: lyr(x), params, rng)
    assert res.max_rel_error < 1e-3


def test_training_requires_attention_mode():
    lyr = layer()
    with pytest.raises(ConfigError):
        lyr(rand_x((2, 8, 5, 5)), AggregationMode.AVERAGE)
    with pytest.raises(ShapeError):
        lyr(rand_x((2, 3, 5, 5)))


# -- aggregation modes --------------------------------------------------------------------------
def test_derangement_has_no_fixed_points():
    rng = np.random.default_rng(0)
    for n in range(2, 9):
        for _ in range(20):
            p = random_derangement(n, rng)
            assert sorted(p) == list(range(n)) and not np.any(p == np.arange(n))
    with pytest.raises(ConfigError):
        random_derangement(1, rng)


def test_mode_semantics():
    pi = Tensor(np.array([[0.7, 0.2, 0.1], [0.1, 0.3, 0.6], [0.2, 0.5, 0.3]]))
    np.testing.assert_allclose(apply_mode(pi, AggregationMode.AVERAGE).data, 1 / 3)
    np.testing.assert_array_equal(apply_mode(pi, AggregationMode.MAX_ATTENTION).data.argmax(axis=1), [0, 2, 1])
    per = apply_mode(pi, AggregationMode.SHUFFLE_PER_SAMPLE, np.random.default_rng(0)).data
    for row, orig in zip(per, pi.data):
        assert sorted(row) == sorted(orig) and not np.any(row == orig)
    across = apply_mode(pi, AggregationMode.SHUFFLE_ACROSS_SAMPLES, np.random.default_rng(0)).data
    assert not any(np.array_equal(across[i], pi.data[i]) for i in range(3))
    assert sorted(map(tuple, across)) == sorted(map(tuple, pi.data))
    with pytest.raises(ConfigError):
        apply_mode(Tensor(np.array([[0.5, 0.5]])), AggregationMode.SHUFFLE_ACROSS_SAMPLES)


def test_identical_kernels_make_modes_equivalent():
    lyr = layer()
    lyr.kernels.data[...] = lyr.kernels.data[0]
    lyr.biases.data[...] = lyr.biases.data[0]
    randomize_attention(lyr, scale=3.0)
    x = rand_x((4, 8, 5, 5))
    lyr(x)  # populate running stats
    lyr.eval()
    with no_grad():
        outs = [lyr(x, mode, np.random.default_rng(0)).data for mode in AggregationMode]
    for o in outs[1:]:
        np.testing.assert_allclose(o, outs[0], atol=1e-6)


def test_mode_parse():
    assert AggregationMode.parse("max") is AggregationMode.MAX_ATTENTION
    with pytest.raises(ConfigError):
        AggregationMode.parse("median")


# -- dynamic perceptron and XOR -------------------------------------------------------------------
@pytest.mark.parametrize("x,y", list(zip(XOR_POINTS.tolist(), XOR_LABELS.tolist())))
def test_hand_built_dynamic_xor(x, y):
    assert dynamic_xor(np.array(x)) == y


@pytest.mark.parametrize("x,y", list(zip(XOR_POINTS.tolist(), XOR_LABELS.tolist())))
def test_hand_built_static_xor(x, y):
    assert static_perceptron_xor(np.array(x)) == y


def test_static_xor_off_the_four_points():
    assert static_perceptron_xor(np.array([2.0, 2.0])) == -2.0


def test_opposite_functions_cancel_at_midpoint():
    rng = np.random.default_rng(0)
    w, b = rng.normal(size=(3, 2)), rng.normal(size=2)
    y = dynamic_perceptron_forward([w, -w], [b, -b], [0.5, 0.5], rng.normal(size=3))
    np.testing.assert_allclose(y, 0.0, atol=1e-15)


def test_perceptron_rejects_off_simplex_attention():
    w = [np.eye(2), np.eye(2)]
    b = [np.zeros(2), np.zeros(2)]
    with pytest.raises(InvariantError):
        dynamic_perceptron_forward(w, b, [0.7, 0.7], np.ones(2))
    with pytest.raises(InvariantError):
        dynamic_perceptron_forward(w, b, [1.2, -0.2], np.ones(2))
