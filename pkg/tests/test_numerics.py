import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaopt import numerics as nx
from metaopt.gradcheck import TOLERANCE, check_layers


def conv_reference(x, w, b, stride):
    """Six nested loops over batch, output channel, rows, cols, input channel and kernel taps."""
    B, cin, H, W = x.shape
    cout = w.shape[0]
    Ho, pad_h, _ = nx.same_padding(H, stride)
    Wo, pad_w, _ = nx.same_padding(W, stride)
    out = np.zeros((B, cout, Ho, Wo))
    for n in range(B):
        for o in range(cout):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(cin):
                        for di in range(3):
                            for dj in range(3):
                                r, q = i * stride + di - pad_h, j * stride + dj - pad_w
                                if 0 <= r < H and 0 <= q < W:
                                    acc += w[o, c, di, dj] * x[n, c, r, q]
                    out[n, o, i, j] = acc
    return out


def test_conv_zero_weight_gives_bias(rng):
    x = rng.random((2, 3, 5, 5))
    out = nx.conv2d(x, np.zeros((4, 3, 3, 3)), np.full(4, 0.7), 1)
    assert out.shape == (2, 4, 5, 5)
    assert np.all(out == 0.7)


def test_conv_one_pixel_uses_kernel_centre(rng):
    x = rng.random((1, 3, 1, 1))
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    out = nx.conv2d(x, w, b, 1)
    np.testing.assert_allclose(out[0, :, 0, 0], w[:, :, 1, 1] @ x[0, :, 0, 0] + b, rtol=1e-14)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("size", [4, 5, 7])
def test_conv_matches_loop_reference(rng, stride, size):
    x = rng.random((2, 2, size, size))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    np.testing.assert_allclose(nx.conv2d(x, w, b, stride), conv_reference(x, w, b, stride), rtol=1e-12, atol=1e-13)


def test_conv_stride2_small_case_exact(rng):
    x = rng.random((1, 2, 4, 4))
    w = rng.standard_normal((1, 2, 3, 3))
    b = np.zeros(1)
    np.testing.assert_allclose(nx.conv2d(x, w, b, 2), conv_reference(x, w, b, 2), rtol=1e-13, atol=1e-14)


@pytest.mark.parametrize("size,stride,expected", [(32, 2, 16), (16, 2, 8), (8, 1, 8), (5, 2, 3), (1, 2, 1)])
def test_same_padding_output_size(size, stride, expected):
    assert nx.same_padding(size, stride)[0] == expected


def test_conv_shape_errors(rng):
    with pytest.raises(nx.ShapeError):
        nx.conv2d(rng.random((1, 3, 4, 4)), rng.random((2, 2, 3, 3)), np.zeros(2), 1)
    with pytest.raises(nx.ShapeError):
        nx.conv2d(rng.random((1, 3, 4, 4)), rng.random((2, 3, 3, 3)), np.zeros(2), 3)


def test_conv_backward_zero_upstream(rng):
    x = rng.random((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    dx, dw, db = nx.conv2d_backward(np.zeros((2, 4, 3, 3)), x, w, 2)
    assert not dx.any() and not dw.any() and not db.any()


def test_conv_bias_grad_is_upstream_sum(rng):
    x = rng.random((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    up = rng.standard_normal((2, 4, 6, 6))
    _, _, db = nx.conv2d_backward(up, x, w, 1)
    np.testing.assert_allclose(db, up.sum(axis=(0, 2, 3)))


def test_layer_gradients_match_finite_differences(rng):
    for result in check_layers(rng):
        assert result.rel_error <= TOLERANCE, result


def test_finite_diff_agrees_with_conv_backward_on_50_parameters(rng):
    # 2 output channels x 2 input channels x 9 taps + 2 biases = 38 weights, plus 12 input pixels = 50
    x = rng.random((1, 2, 2, 3))
    w = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal(2)
    up = rng.standard_normal((1, 2, 2, 3))
    dx, dw, db = nx.conv2d_backward(up, x, w, 1)
    assert x.size + w.size + b.size == 50

    def f(v):
        return np.sum(up * nx.conv2d(v[:12].reshape(x.shape), v[12:48].reshape(w.shape), v[48:], 1))

    v = np.concatenate([x.ravel(), w.ravel(), b])
    numeric = nx.finite_diff_grad(f, v, 1e-5)
    assert nx.relative_error(np.concatenate([dx.ravel(), dw.ravel(), db]), numeric) <= 1e-6


def test_relu_examples(rng):
    np.testing.assert_array_equal(nx.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    assert nx.relu_backward(np.array([5.0]), np.array([-1.0]))[0] == 0.0
    x = rng.random(20) + 0.1
    up = rng.standard_normal(20)
    np.testing.assert_array_equal(nx.relu_backward(up, x), up)


def test_spatial_mean_examples():
    assert nx.spatial_mean(np.full((1, 1, 3, 3), 0.25))[0, 0] == 0.25
    assert nx.spatial_mean(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))[0, 0] == 2.5


def test_linear_examples(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(nx.linear(x, np.eye(4), np.zeros(4)), x)
    b = rng.standard_normal(2)
    np.testing.assert_array_equal(nx.linear(x, np.zeros((4, 2)), b), np.broadcast_to(b, (3, 2)))


def test_softmax_ce_uniform_logits():
    loss, _ = nx.softmax_cross_entropy(np.zeros((5, 10)), np.arange(5))
    assert loss == pytest.approx(np.log(10), abs=1e-12)


def test_softmax_ce_confident_true_class():
    logits = np.array([[1e4, 0.0, 0.0]])
    loss, grad = nx.softmax_cross_entropy(logits, np.array([0]))
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(grad))


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 6),
    st.integers(2, 7),
    st.floats(0.1, 50.0),
    st.integers(0, 2**32 - 1),
)
def test_softmax_ce_properties(batch, classes, scale, seed):
    r = np.random.default_rng(seed)
    logits = r.standard_normal((batch, classes)) * scale
    labels = r.integers(0, classes, batch)
    loss, grad = nx.softmax_cross_entropy(logits, labels)
    assert np.isfinite(loss) and loss >= 0
    # gradient rows sum to zero; shift invariance
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)
    shifted, _ = nx.softmax_cross_entropy(logits + 3.0, labels)
    assert shifted == pytest.approx(loss, rel=1e-10, abs=1e-12)


def test_finite_diff_simple_objectives(rng):
    w = rng.standard_normal(7)
    np.testing.assert_allclose(nx.finite_diff_grad(lambda v: np.sum(v**2), w, 1e-5), 2 * w, rtol=1e-8)
    np.testing.assert_array_equal(nx.finite_diff_grad(lambda v: 3.0, w, 1e-5), np.zeros(7))


def test_relative_error_basic():
    assert nx.relative_error(np.ones(3), np.ones(3)) == 0.0
    assert nx.relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert nx.relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1, rel=1e-6)
