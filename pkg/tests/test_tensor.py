import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pscdn import tensor as T
from pscdn.tensor import ConfigurationError, ShapeError

from gradcheck import max_rel_error, numeric_grad


def conv1d_bruteforce(x, w, b):
    """Triple loop over output channel, position and (input channel, tap)."""
    out_ch, in_ch, k = w.shape
    half = (k - 1) // 2
    batch, _, length = x.shape
    y = np.zeros((batch, out_ch, length))
    for n in range(batch):
        for o in range(out_ch):
            for t in range(length):
                acc = b[o]
                for i in range(in_ch):
                    for j in range(k):
                        pos = t + j - half
                        if 0 <= pos < length:
                            acc += w[o, i, j] * x[n, i, pos]
                y[n, o, t] = acc
    return y


class TestConv1d:
    def test_identity_kernel(self):
        x = np.array([[1.0, 2.0, 3.0]])
        y = T.conv1d(x, np.array([[[0.0, 1.0, 0.0]]]), np.zeros(1))
        np.testing.assert_array_equal(y, [[1, 2, 3]])

    def test_box_kernel_zero_padded(self):
        x = np.array([[1.0, 2.0, 3.0]])
        y = T.conv1d(x, np.ones((1, 1, 3)), np.zeros(1))
        np.testing.assert_array_equal(y, [[3, 6, 5]])

    def test_pointwise_is_matvec(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 1))
        w = rng.normal(size=(3, 2, 1))
        b = rng.normal(size=3)
        np.testing.assert_allclose(T.conv1d(x, w, b), w[:, :, 0] @ x + b[:, None], rtol=0, atol=1e-14)

    @pytest.mark.parametrize("k", [1, 3])
    def test_matches_bruteforce(self, k):
        rng = np.random.default_rng(k)
        for _ in range(50):
            batch, cin, cout, length = rng.integers(1, 5, size=4)
            x = rng.normal(size=(batch, cin, length))
            w = rng.normal(size=(cout, cin, k))
            b = rng.normal(size=cout)
            np.testing.assert_allclose(T.conv1d(x, w, b), conv1d_bruteforce(x, w, b), rtol=0, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv1d(np.zeros((2, 4)), np.zeros((1, 3, 3)), np.zeros(1))

    def test_even_kernel(self):
        with pytest.raises(ConfigurationError):
            T.conv1d(np.zeros((1, 4)), np.zeros((1, 1, 2)), np.zeros(1))

    def test_length_preserved(self):
        y = T.conv1d(np.ones((3, 2, 7)), np.ones((5, 2, 3)), np.zeros(5))
        assert y.shape == (3, 5, 7)


def test_relu():
    np.testing.assert_array_equal(T.relu(np.array([[-1.0, 0.0, 2.0]])), [[0, 0, 2]])
    x = np.abs(np.random.default_rng(1).normal(size=(3, 4)))
    np.testing.assert_array_equal(T.relu(x), x)
    g = T.relu_backward(np.array([[-1.0, 2.0]]), np.array([[5.0, 7.0]])).input_grad
    np.testing.assert_array_equal(g, [[0, 7]])


def test_sigmoid():
    assert T.sigmoid(np.array([0.0]))[0] == 0.5
    t = np.linspace(-30, 30, 41)
    pair = T.sigmoid(np.stack([-t, t]))
    np.testing.assert_allclose(pair.sum(axis=0), 1.0, rtol=0, atol=1e-15)
    y = T.sigmoid(np.array([0.0]))
    assert T.sigmoid_backward(y, np.ones(1)).input_grad[0] == 0.25
    big = T.sigmoid(np.array([-800.0, 800.0]))
    assert np.isfinite(big).all()


class TestBatchNorm:
    def test_constant_input_maps_to_zero(self):
        y, _ = T.batch_norm(np.full((4, 2, 3), 7.5))
        np.testing.assert_array_equal(y, 0)

    def test_two_sample_example(self):
        y, _ = T.batch_norm(np.array([[[1.0]], [[3.0]]]), eps=0)
        np.testing.assert_array_equal(y[:, 0, 0], [-1, 1])

    def test_normalised_statistics(self):
        rng = np.random.default_rng(2)
        eps = 1e-5
        for _ in range(20):
            x = rng.normal(3, 2, size=(rng.integers(2, 9), rng.integers(1, 5), rng.integers(1, 8)))
            y, cache = T.batch_norm(x, eps)
            assert np.abs(y.mean(axis=(0, 2))).max() <= 1e-9
            var = x.var(axis=(0, 2))
            np.testing.assert_allclose(y.var(axis=(0, 2)), var / (var + eps), rtol=1e-10)

    def test_needs_batch_of_two(self):
        with pytest.raises(ConfigurationError):
            T.batch_norm(np.zeros((1, 2, 3)))


def test_concat_channels():
    a = np.arange(2.0).reshape(2, 1)
    b = np.arange(10.0, 13.0).reshape(3, 1)
    c = T.concat_channels(a, b)
    assert c.shape == (5, 1)
    np.testing.assert_array_equal(c[:, 0], [0, 1, 10, 11, 12])
    np.testing.assert_array_equal(T.concat_channels(a, np.zeros((0, 1))), a)
    with pytest.raises(ShapeError):
        T.concat_channels(np.zeros((1, 2)), np.zeros((1, 3)))


def test_residual_sub():
    x = np.random.default_rng(3).normal(size=(2, 3))
    np.testing.assert_array_equal(T.residual_sub(x, np.zeros_like(x)), x)
    np.testing.assert_array_equal(T.residual_sub(x, x), 0)
    with pytest.raises(ShapeError):
        T.residual_sub(np.zeros((2, 1)), np.zeros((1, 2)))


def test_reshape_round_trips():
    x = np.arange(9.0).reshape(9, 1)
    np.testing.assert_array_equal(T.reshape(T.reshape(x, (3, 3)), (9, 1)), x)
    y = np.random.default_rng(4).normal(size=(9, 5))
    np.testing.assert_array_equal(T.reshape(T.reshape(y, (45, 1)), (9, 5)), y)
    with pytest.raises(ShapeError):
        T.reshape(x, (4, 2))


def test_deterministic():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 3, 6))
    w = rng.normal(size=(2, 3, 3))
    b = rng.normal(size=2)
    assert T.conv1d(x, w, b).tobytes() == T.conv1d(x.copy(), w.copy(), b.copy()).tobytes()
    assert T.batch_norm(x)[0].tobytes() == T.batch_norm(x.copy())[0].tobytes()


# ---------------------------------------------------------------- gradient checks

shapes = st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 8))


@settings(max_examples=40, deadline=None)
@given(shape=shapes, out_ch=st.integers(1, 4), k=st.sampled_from([1, 3]), seed=st.integers(0, 2**31))
def test_conv1d_gradients(shape, out_ch, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    w = rng.normal(size=(out_ch, shape[1], k))
    b = rng.normal(size=out_ch)
    up = rng.normal(size=(shape[0], out_ch, shape[2]))
    f = lambda: float(np.sum(up * T.conv1d(x, w, b)))
    g = T.conv1d_backward(x, w, up)
    assert max_rel_error(g.input_grad, numeric_grad(f, x)) <= 1e-5
    assert max_rel_error(g.param_grads[0], numeric_grad(f, w)) <= 1e-5
    assert max_rel_error(g.param_grads[1], numeric_grad(f, b)) <= 1e-5


@settings(max_examples=40, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**31))
def test_relu_gradient(shape, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    x = np.where(np.abs(x) < 1e-3, 1e-3 * np.sign(x + 1e-12) * 2, x)
    up = rng.normal(size=shape)
    f = lambda: float(np.sum(up * T.relu(x)))
    assert max_rel_error(T.relu_backward(x, up).input_grad, numeric_grad(f, x)) <= 1e-5


@settings(max_examples=40, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**31))
def test_sigmoid_gradient(shape, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 3, size=shape)
    up = rng.normal(size=shape)
    f = lambda: float(np.sum(up * T.sigmoid(x)))
    assert max_rel_error(T.sigmoid_backward(T.sigmoid(x), up).input_grad, numeric_grad(f, x)) <= 1e-5


@settings(max_examples=40, deadline=None)
@given(batch=st.integers(2, 4), ch=st.integers(1, 4), length=st.integers(1, 8), seed=st.integers(0, 2**31))
def test_batch_norm_gradient(batch, ch, length, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, ch, length))
    up = rng.normal(size=x.shape)
    f = lambda: float(np.sum(up * T.batch_norm(x)[0]))
    _, cache = T.batch_norm(x)
    assert max_rel_error(T.batch_norm_backward(cache, up).input_grad, numeric_grad(f, x)) <= 1e-5


def test_concat_gradient_splits_at_boundary():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(2, 2, 5)), rng.normal(size=(2, 3, 5))
    up = rng.normal(size=(2, 5, 5))
    f = lambda: float(np.sum(up * T.concat_channels(a, b)))
    da, db = T.concat_channels_backward(2, up)
    assert max_rel_error(da, numeric_grad(f, a)) <= 1e-5
    assert max_rel_error(db, numeric_grad(f, b)) <= 1e-5


def test_residual_gradients():
    rng = np.random.default_rng(7)
    x, e, up = (rng.normal(size=(3, 4)) for _ in range(3))
    f = lambda: float(np.sum(up * T.residual_sub(x, e)))
    dx, de = T.residual_sub_backward(up)
    assert max_rel_error(dx, numeric_grad(f, x)) <= 1e-5
    assert max_rel_error(de, numeric_grad(f, e)) <= 1e-5
    np.testing.assert_array_equal(de, -up)


def test_reshape_gradient_is_transparent():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 3, 4))
    up = rng.normal(size=(2, 12, 1))
    f = lambda: float(np.sum(up * T.reshape(x, (12, 1))))
    g = T.reshape_backward(x.shape, up).input_grad
    assert max_rel_error(g, numeric_grad(f, x)) <= 1e-5
    np.testing.assert_array_equal(g, up.reshape(x.shape))
