"""
FlowAug - Numeric Core Tests

Reverse-mode gradients, convolution, attention, optimizer and seeded streams
"""

import numpy as np
import pytest

from engine.errors import ConfigError, NonFiniteError, NonFiniteGradientError, ShapeError
from engine.ops import (
    avg_pool2,
    concat,
    conv2d,
    cross_entropy,
    layer_norm,
    log_softmax,
    matmul,
    multi_head_self_attention,
    slogdet,
    softmax,
    standard_normal_log_prob,
)
from engine.optim import Adam, clip_grad_norm, global_grad_norm, warmup_polynomial_lr
from engine.rng import SeededRng
from engine.tensor import Parameter, Tensor, gradient, is_grad_enabled, no_grad
from flows.jacobian import gradient_check


def naive_conv(x, filters, bias):
    """Direct loop over output pixels with zero 'same' padding."""
    b, h, w, _ = x.shape
    kh, kw, _, cout = filters.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((b, h, w, cout))
    for n in range(b):
        for i in range(h):
            for j in range(w):
                window = padded[n, i : i + kh, j : j + kw, :]
                out[n, i, j] = np.tensordot(window, filters, axes=([0, 1, 2], [0, 1, 2])) + bias
    return out


def test_elementwise_gradients_match_closed_form(rng):
    """Test gradients of x*y + exp(x) summed"""
    x = Parameter(rng.normal((3, 4)), "x")
    y = Parameter(rng.normal((3, 4)), "y")
    loss = (x * y + x.exp()).sum()
    gradient(loss, [x, y])
    assert np.allclose(x.grad, y.data + np.exp(x.data))
    assert np.allclose(y.grad, x.data)


def test_broadcast_gradient_is_summed(rng):
    """Test that a broadcast bias receives the sum over broadcast axes"""
    a = Parameter(rng.normal((3, 4)), "a")
    b = Parameter(rng.normal((4,)), "b")
    gradient((a + b).sum(), [a, b])
    assert np.allclose(b.grad, np.full(4, 3.0))
    assert np.allclose(a.grad, np.ones((3, 4)))


def test_unreached_parameter_gets_zero_gradient(rng):
    a = Parameter(rng.normal((2,)), "a")
    unused = Parameter(rng.normal((5,)), "unused")
    gradient((a * a).sum(), [a, unused])
    assert np.array_equal(unused.grad, np.zeros(5))


def test_gradient_needs_scalar_loss(rng):
    a = Parameter(rng.normal((2, 2)), "a")
    with pytest.raises(ShapeError):
        gradient(a * 2.0, [a])


def test_no_grad_stops_recording(rng):
    """Test that results built under no_grad carry no parents"""
    a = Parameter(rng.normal((2,)), "a")
    with no_grad():
        assert not is_grad_enabled()
        out = a * 3.0
    assert is_grad_enabled()
    assert out._parents == ()


def test_non_finite_values_name_the_operation():
    with pytest.raises(NonFiniteError, match="log"):
        with np.errstate(all="ignore"):
            Tensor(np.array([-1.0, 1.0])).log()


def test_conv2d_matches_naive_loop(rng):
    """Test 3x3 and 1x1 convolutions against direct loops"""
    x = rng.normal((2, 5, 6, 3))
    for kernel in (1, 3):
        filters = rng.child(kernel).normal((kernel, kernel, 3, 4))
        bias = rng.child(kernel, "bias").normal((4,))
        out = conv2d(Tensor(x), Tensor(filters), Tensor(bias))
        assert np.allclose(out.data, naive_conv(x, filters, bias))


def test_conv2d_rejects_unsupported_kernel(rng):
    with pytest.raises(ShapeError):
        conv2d(Tensor(rng.normal((1, 4, 4, 2))), Tensor(rng.normal((5, 5, 2, 2))))


def test_conv2d_gradients_match_finite_differences(rng):
    """Test filter and input gradients of a 3x3 convolution"""
    x = Parameter(rng.normal((2, 4, 5, 2)), "x")
    filters = Parameter(rng.normal((3, 3, 2, 3)), "filters")
    target = rng.normal((2, 4, 5, 3))

    def loss_fn():
        out = conv2d(x, filters)
        return ((out - target) * (out - target)).sum()

    assert gradient_check(loss_fn, filters, rng.child("f")) < 1e-5
    assert gradient_check(loss_fn, x, rng.child("x")) < 1e-5


def test_conv2d_impulse_returns_flipped_filter(rng):
    """Test that a unit impulse at the center reproduces the kernel, flipped"""
    x = np.zeros((1, 3, 3, 1))
    x[0, 1, 1, 0] = 1.0
    filters = rng.normal((3, 3, 1, 1))
    out = conv2d(Tensor(x), Tensor(filters)).data
    assert np.allclose(out[0, :, :, 0], filters[::-1, ::-1, 0, 0])


def test_conv2d_relu_chain_gradients(rng):
    x = Parameter(rng.normal((2, 4, 4, 2)), "x")
    filters = Parameter(rng.normal((3, 3, 2, 3)), "filters")
    bias = Parameter(rng.normal((3,)), "bias")
    weights = rng.normal((2, 4, 4, 3))

    def loss_fn():
        return (conv2d(x, filters, bias).relu() * weights).sum()

    for p in (filters, bias, x):
        assert gradient_check(loss_fn, p, rng.child(p.name)) < 1e-5


def test_batched_matmul_gradients(rng):
    a = Parameter(rng.normal((2, 3, 4)), "a")
    b = Parameter(rng.normal((4, 5)), "b")

    def loss_fn():
        return (matmul(a, b) ** 2).sum()

    assert gradient_check(loss_fn, a, rng.child("a")) < 1e-5
    assert gradient_check(loss_fn, b, rng.child("b")) < 1e-5


def test_softmax_and_log_softmax_are_stable(rng):
    logits = Tensor(np.array([[1000.0, 1001.0, 999.0], [0.0, 0.0, 0.0]]))
    probs = softmax(logits).data
    assert np.allclose(probs.sum(axis=1), 1.0)
    assert np.allclose(np.exp(log_softmax(logits).data), probs)
    assert np.allclose(probs[1], 1.0 / 3.0)


def test_layer_norm_standardizes_channels(rng):
    x = Tensor(rng.normal((4, 3, 3, 8)) * 5.0 + 2.0)
    out = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-10)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-3)


def test_layer_norm_gradients(rng):
    x = Parameter(rng.normal((2, 3, 6)), "x")
    gain = Parameter(rng.normal((6,)), "gain")
    bias = Parameter(rng.normal((6,)), "bias")
    weights = rng.normal((2, 3, 6))

    def loss_fn():
        return (layer_norm(x, gain, bias) * weights).sum()

    for p in (x, gain, bias):
        assert gradient_check(loss_fn, p, rng.child(p.name)) < 1e-5


def test_attention_weights_are_row_stochastic(rng):
    width = 8
    x = Tensor(rng.normal((2, 5, width)))
    projections = [Tensor(rng.child(k).normal((width, width))) for k in range(4)]
    out, weights = multi_head_self_attention(x, 2, *projections, return_weights=True)
    assert out.shape == (2, 5, width)
    assert weights.shape == (2, 2, 5, 5)
    assert np.allclose(weights.data.sum(axis=-1), 1.0)


def test_attention_gradients(rng):
    width = 4
    x = Parameter(rng.normal((1, 3, width)), "x")
    w = [Parameter(rng.child(k).normal((width, width)) * 0.5, f"w{k}") for k in range(4)]

    def loss_fn():
        return (multi_head_self_attention(x, 2, *w) ** 2).sum()

    for p in [x] + w:
        assert gradient_check(loss_fn, p, rng.child(p.name)) < 1e-5


def test_attention_rejects_indivisible_heads(rng):
    x = Tensor(rng.normal((1, 3, 6)))
    projections = [Tensor(np.eye(6))] * 4
    with pytest.raises(ShapeError):
        multi_head_self_attention(x, 4, *projections)


def attention_oracle(x, heads, w_query, w_key, w_value, w_output):
    """Per-head softmax(Q K^T / sqrt(d)) V, concatenated and projected."""
    _, length, width = x.shape
    head_dim = width // heads
    q, k, v = x @ w_query, x @ w_key, x @ w_value
    parts = []
    for h in range(heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        scores = q[..., cols] @ np.swapaxes(k[..., cols], -1, -2) / np.sqrt(head_dim)
        scores = np.exp(scores - scores.max(axis=-1, keepdims=True))
        parts.append((scores / scores.sum(axis=-1, keepdims=True)) @ v[..., cols])
    return np.concatenate(parts, axis=-1) @ w_output


def test_attention_matches_explicit_formula(rng):
    x = rng.normal((2, 3, 4))
    projections = [rng.child("w", k).normal((4, 4)) for k in range(4)]
    out = multi_head_self_attention(Tensor(x), 2, *[Tensor(w) for w in projections])
    assert np.allclose(out.data, attention_oracle(x, 2, *projections))


def test_attention_over_one_token_is_projected_value(rng):
    x = rng.normal((1, 1, 4))
    w_query, w_key, w_value, w_output = [rng.child("w", k).normal((4, 4)) for k in range(4)]
    out, weights = multi_head_self_attention(
        Tensor(x), 2, Tensor(w_query), Tensor(w_key), Tensor(w_value), Tensor(w_output), return_weights=True
    )
    assert np.allclose(weights.data, 1.0)
    assert np.allclose(out.data, x @ w_value @ w_output)


def test_attention_spreads_evenly_over_identical_tokens(rng):
    """Test uniform 1/T weights when every position carries the same vector"""
    x = np.repeat(rng.normal((1, 1, 4)), 5, axis=1)
    projections = [Tensor(rng.child("w", k).normal((4, 4))) for k in range(4)]
    _, weights = multi_head_self_attention(Tensor(x), 2, *projections, return_weights=True)
    assert np.allclose(weights.data, 1.0 / 5.0)


def test_slogdet_gradient_is_inverse_transpose(rng):
    w = Parameter(rng.normal((4, 4)) + 3.0 * np.eye(4), "w")
    gradient(slogdet(w), [w])
    assert np.allclose(w.grad, np.linalg.inv(w.data).T)


def test_concat_and_pooling_shapes(rng):
    a = Parameter(rng.normal((1, 4, 4, 2)), "a")
    b = Parameter(rng.normal((1, 4, 4, 3)), "b")
    joined = concat([a, b], axis=-1)
    assert joined.shape == (1, 4, 4, 5)
    pooled = avg_pool2(joined)
    assert pooled.shape == (1, 2, 2, 5)
    gradient(pooled.sum(), [a, b])
    assert np.allclose(a.grad, 0.25)
    assert np.allclose(b.grad, 0.25)


def test_standard_normal_log_prob_per_item():
    z = Tensor(np.zeros((3, 2, 2, 1)))
    expected = -0.5 * 4 * np.log(2 * np.pi)
    assert np.allclose(standard_normal_log_prob(z).data, expected)


def test_cross_entropy_matches_manual(rng):
    logits = rng.normal((4, 3))
    labels = np.array([0, 2, 1, 2])
    manual = -np.mean(
        [logits[i, labels[i]] - np.log(np.exp(logits[i]).sum()) for i in range(4)]
    )
    assert np.isclose(cross_entropy(Tensor(logits), labels).item(), manual)


def test_warmup_polynomial_schedule():
    """Test the ramp, the peak and the decay to zero"""
    assert warmup_polynomial_lr(0, 10, 1e-3, 110) == 0.0
    assert np.isclose(warmup_polynomial_lr(5, 10, 1e-3, 110), 5e-4)
    assert np.isclose(warmup_polynomial_lr(10, 10, 1e-3, 110), 1e-3)
    assert np.isclose(warmup_polynomial_lr(60, 10, 1e-3, 110), 5e-4)
    assert np.isclose(warmup_polynomial_lr(60, 10, 1e-3, 110, power=2.0), 2.5e-4)
    assert warmup_polynomial_lr(110, 10, 1e-3, 110) == 0.0


def test_warmup_must_be_shorter_than_run():
    with pytest.raises(ConfigError):
        warmup_polynomial_lr(0, 100, 1e-3, 100)
    with pytest.raises(ConfigError):
        warmup_polynomial_lr(-1, 0, 1e-3, 100)


def test_clip_grad_norm_rescales(rng):
    params = [Parameter(np.zeros(3), "a"), Parameter(np.zeros(4), "b")]
    params[0].grad = np.full(3, 3.0)
    params[1].grad = np.full(4, 4.0)
    before = clip_grad_norm(params, 1.0)
    assert np.isclose(before, np.sqrt(27 + 64))
    assert np.isclose(global_grad_norm(params), 1.0)


def test_adam_minimizes_quadratic(rng):
    target = rng.normal((5,))
    p = Parameter(np.zeros(5), "p")
    optimizer = Adam([p], learning_rate=0.05)
    for t in range(1000):
        gradient(((p - target) ** 2).sum(), [p])
        optimizer.step(0.05 * (1.0 - t / 1000))
    assert np.allclose(p.data, target, atol=1e-2)


def test_adam_first_step_moves_by_learning_rate(rng):
    """Test that the bias-corrected first step is lr * sign(g)"""
    p = Parameter(rng.normal((6,)), "p")
    start = p.data.copy()
    p.grad = np.array([3.0, -0.5, 1e-2, -20.0, 0.7, -1.0])
    Adam([p], learning_rate=0.01).step()
    assert np.allclose(p.data - start, -0.01 * np.sign(p.grad), atol=1e-8)


def test_adam_leaves_parameters_alone_without_gradient(rng):
    p = Parameter(rng.normal((3, 2)), "p")
    start = p.data.copy()
    optimizer = Adam([p], learning_rate=0.1)
    for _ in range(5):
        optimizer.zero_grad()
        optimizer.step()
    assert np.array_equal(p.data, start)


def test_adam_converges_on_shifted_square():
    p = Parameter(np.zeros(1), "p")
    optimizer = Adam([p], learning_rate=0.1)
    for _ in range(200):
        gradient(((p - 3.0) ** 2).sum(), [p])
        optimizer.step()
    assert abs(p.data[0] - 3.0) < 0.05


def test_adam_refuses_non_finite_gradient():
    p = Parameter(np.ones(2), "weights")
    p.grad = np.array([np.nan, 0.0])
    optimizer = Adam([p])
    with pytest.raises(NonFiniteGradientError, match="weights"):
        optimizer.step()
    assert np.array_equal(p.data, np.ones(2))


def test_adam_rejects_duplicate_names():
    with pytest.raises(ConfigError):
        Adam([Parameter(np.ones(1), "same"), Parameter(np.ones(1), "same")])


def test_seeded_streams_are_reproducible():
    a = SeededRng(5).child("layer", 3).normal((4,))
    b = SeededRng(5).child("layer", 3).normal((4,))
    c = SeededRng(5).child("layer", 4).normal((4,))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert SeededRng(5).derive_seed("x") == SeededRng(5).derive_seed("x")
