import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sednet import tensor as T
from sednet.tensor import Parameter, ShapeError, Tensor


def conv_loop(x, w, b, stride=1, pads=(0, 0, 0, 0)):
    """Direct nested-loop cross-correlation."""
    pt, pb, pl, pr = pads
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    B, H, W, C = xp.shape
    kh, kw, cin, cout = w.shape
    ho, wo = (H - kh) // stride + 1, (W - kw) // stride + 1
    out = np.zeros((B, ho, wo, cout))
    for n in range(B):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    s = b[o]
                    for u in range(kh):
                        for v in range(kw):
                            for c in range(cin):
                                s += xp[n, i * stride + u, j * stride + v, c] * w[u, v, c, o]
                    out[n, i, j, o] = s
    return out


def maxpool_loop(x, k, s):
    B, H, W, C = x.shape
    ho, wo = (H - k) // s + 1, (W - k) // s + 1
    out = np.zeros((B, ho, wo, C))
    for n in range(B):
        for i in range(ho):
            for j in range(wo):
                for c in range(C):
                    out[n, i, j, c] = max(x[n, i * s + u, j * s + v, c] for u in range(k) for v in range(k))
    return out


def weighted_sum(t, r):
    return T.sum(t * Tensor(r))


class TestConv2d:
    def test_scalar_kernel(self):
        x = Tensor(np.ones((1, 3, 3, 1)))
        out = T.conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor([0.5]))
        np.testing.assert_array_equal(out.data, np.full((1, 3, 3, 1), 2.5))

    def test_identity_kernel(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        k = np.zeros((3, 3, 1, 1))
        k[1, 1] = 1.0
        out = T.conv2d(Tensor(x), Tensor(k), Tensor([0.0]), padding="same")
        np.testing.assert_array_equal(out.data, x)

    def test_matches_direct_summation(self, rng):
        x = rng.normal(size=(1, 5, 5, 2))
        w = rng.normal(size=(3, 3, 2, 3))
        b = rng.normal(size=3)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding="same")
        ref = conv_loop(x, w, b, pads=(1, 1, 1, 1))
        np.testing.assert_allclose(out.data, ref, rtol=1e-6, atol=1e-12)

    def test_even_kernel_pads_bottom_right(self, rng):
        x = rng.normal(size=(2, 4, 6, 3))
        w = rng.normal(size=(2, 2, 3, 2))
        b = rng.normal(size=2)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding="same")
        np.testing.assert_allclose(out.data, conv_loop(x, w, b, pads=(0, 1, 0, 1)), rtol=1e-10)

    def test_strided_valid(self, rng):
        x = rng.normal(size=(1, 7, 7, 2))
        w = rng.normal(size=(3, 3, 2, 2))
        b = np.zeros(2)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding="valid")
        np.testing.assert_allclose(out.data, conv_loop(x, w, b, stride=2), rtol=1e-10)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match=r"\(1, 4, 4, 2\).*\(3, 3, 3, 1\)"):
            T.conv2d(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))))

    @pytest.mark.parametrize("k", [1, 3, 5, 7])
    def test_same_padding_preserves_shape(self, k, rng):
        x = Tensor(rng.normal(size=(1, 6, 9, 2)))
        out = T.conv2d(x, Tensor(rng.normal(size=(k, k, 2, 4))), padding="same")
        assert out.shape == (1, 6, 9, 4)

    def test_gradients(self, rng):
        x = rng.normal(size=(1, 5, 5, 2))
        w = rng.normal(size=(3, 3, 2, 3))
        b = rng.normal(size=3)
        r = rng.normal(size=(1, 5, 5, 3))
        err = T.grad_check(lambda x, w, b: weighted_sum(T.conv2d(x, w, b), r), [x, w, b])
        assert err <= 1e-6

    def test_strided_gradients(self, rng):
        x = rng.normal(size=(2, 6, 6, 2))
        w = rng.normal(size=(3, 3, 2, 2))
        r = rng.normal(size=(2, 3, 3, 2))
        err = T.grad_check(lambda x, w: weighted_sum(T.conv2d(x, w, stride=2), r), [x, w])
        assert err <= 1e-6


class TestMaxPool:
    def test_single_window(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
        assert T.maxpool2d(x, 2, 2).data.ravel().tolist() == [4.0]

    def test_ties_route_to_first(self):
        x = Tensor(np.full((1, 4, 4, 1), 3.0), requires_grad=True)
        with T.Tape() as tape:
            out = T.maxpool2d(x, 2, 2)
            loss = T.sum(out)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 1), 3.0))
        T.backward(loss, tape)
        expect = np.zeros((4, 4))
        expect[::2, ::2] = 1.0
        np.testing.assert_array_equal(x.grad[0, ..., 0], expect)

    def test_matches_bruteforce(self, rng):
        x = rng.normal(size=(1, 9, 9, 1))
        np.testing.assert_array_equal(T.maxpool2d(Tensor(x), 3, 2).data, maxpool_loop(x, 3, 2))

    def test_padded_extent(self, rng):
        x = Tensor(rng.normal(size=(1, 128, 128, 2)))
        assert T.maxpool2d(x, 3, 2, padding=1).shape == (1, 64, 64, 2)

    def test_window_too_large(self):
        with pytest.raises(ShapeError):
            T.maxpool2d(Tensor(np.zeros((1, 2, 2, 1))), 3, 1)

    def test_gradient_tie_free(self, rng):
        x = rng.permutation(81).reshape(1, 9, 9, 1).astype(float) * 0.1
        r = rng.normal(size=(1, 5, 5, 1))
        assert T.grad_check(lambda x: weighted_sum(T.maxpool2d(x, 3, 2, padding=1), r), [x]) <= 1e-6

    def test_routed_mass(self, rng):
        x = Tensor(rng.normal(size=(2, 8, 8, 3)), requires_grad=True)
        g = rng.normal(size=(2, 4, 4, 3))
        with T.Tape() as tape:
            loss = weighted_sum(T.maxpool2d(x, 2, 2), g)
        T.backward(loss, tape)
        np.testing.assert_allclose(x.grad.sum(), g.sum())
        # non-overlapping windows: exactly one nonzero per window
        assert np.count_nonzero(x.grad) == g.size


class TestUpsample:
    def test_replication(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
        expect = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        np.testing.assert_array_equal(T.upsample2x(x).data[0, ..., 0], expect)

    def test_sum_adjoint(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 3, 2)), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum(T.upsample2x(x))
        T.backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.full(x.shape, 4.0))

    def test_with_conv_gradients(self, rng):
        x = rng.normal(size=(1, 3, 3, 2))
        w = rng.normal(size=(2, 2, 2, 1))
        r = rng.normal(size=(1, 6, 6, 1))
        err = T.grad_check(lambda x, w: weighted_sum(T.conv2d(T.upsample2x(x), w), r), [x, w])
        assert err <= 1e-4


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_sigmoid_saturation(self):
        out = T.sigmoid(Tensor([0.0, 40.0, -40.0, 1e4, -1e4])).data
        assert out[0] == 0.5
        assert abs(out[1] - 1) < 1e-12 and abs(out[2]) < 1e-12
        assert np.all(np.isfinite(out))

    def test_concat_shapes_and_gradients(self, rng):
        a = rng.normal(size=(1, 4, 4, 3))
        b = rng.normal(size=(1, 4, 4, 5))
        r = rng.normal(size=(1, 4, 4, 8))
        assert T.concat_channels(Tensor(np.zeros((1, 4, 4, 32))), Tensor(np.zeros((1, 4, 4, 64)))).shape == (1, 4, 4, 96)
        assert T.grad_check(lambda a, b: weighted_sum(T.concat_channels(a, b), r), [a, b]) <= 1e-6

    def test_concat_no_crosstalk(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 2, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 2, 2, 3)), requires_grad=True)
        g = rng.normal(size=(1, 2, 2, 5))
        with T.Tape() as tape:
            loss = weighted_sum(T.concat_channels(a, b), g)
        T.backward(loss, tape)
        np.testing.assert_array_equal(a.grad, g[..., :2])
        np.testing.assert_array_equal(b.grad, g[..., 2:])

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat_channels(Tensor(np.zeros((1, 4, 4, 1))), Tensor(np.zeros((1, 2, 4, 1))))

    def test_sigmoid_chain_gradient(self, rng):
        x = rng.normal(size=(2, 3))
        err = T.grad_check(lambda x: T.sum(T.sigmoid(T.sigmoid(x) * 3.0 - 1.0) * x), [x])
        assert err <= 1e-6

    def test_log_clip_div_gradient(self, rng):
        p = rng.uniform(0.1, 0.9, size=(2, 3))
        err = T.grad_check(lambda p: T.mean(T.log(T.clip(p, 1e-7, 1 - 1e-7)) / (T.sum(p) + 1.0)), [p])
        assert err <= 1e-6


class TestBackward:
    def test_linear(self, rng):
        x = rng.normal(size=(3, 4))
        w = Parameter(rng.normal(size=(3, 4)))
        with T.Tape() as tape:
            loss = T.sum(w * Tensor(x))
        T.backward(loss, tape)
        np.testing.assert_array_equal(w.grad, x)

    def test_conv_relu_sum(self, rng):
        x = rng.normal(size=(1, 4, 4, 1))
        w = rng.normal(size=(3, 3, 1, 2))
        b = rng.normal(size=2)
        err = T.grad_check(lambda w, b: T.sum(T.relu(T.conv2d(Tensor(x), w, b))), [w, b], eps=1e-5)
        assert err <= 1e-6

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            T.backward(x * 2.0)

    def test_accumulates_until_zeroed(self):
        w = Parameter(np.ones(2))
        for _ in range(2):
            with T.Tape() as tape:
                loss = T.sum(w * 3.0)
            T.backward(loss, tape)
        np.testing.assert_array_equal(w.grad, [6.0, 6.0])
        T.zero_grad([w])
        np.testing.assert_array_equal(w.grad, [0.0, 0.0])

    def test_unreachable_parameter_has_zero_gradient(self):
        used, unused = Parameter(np.ones(2)), Parameter(np.ones(2))
        with T.Tape() as tape:
            loss = T.sum(used * used)
        T.backward(loss, tape)
        np.testing.assert_array_equal(unused.grad, np.zeros(2))
        np.testing.assert_array_equal(used.grad, [2.0, 2.0])

    def test_tape_order(self):
        x = Tensor(np.ones((1, 2, 2, 1)), requires_grad=True)
        with T.Tape() as tape:
            T.sum(T.sigmoid(T.relu(x)))
        assert [n.name for n in tape.nodes] == ["relu", "sigmoid", "sum"]

    def test_frozen_gradient_still_computed(self):
        w = Parameter(np.ones(2), trainable=False)
        with T.Tape() as tape:
            loss = T.sum(w * 5.0)
        T.backward(loss, tape)
        np.testing.assert_array_equal(w.grad, [5.0, 5.0])

    def test_shared_parameter_sums(self):
        w = Parameter(np.array([2.0]))
        with T.Tape() as tape:
            loss = T.sum(w * w * w)
        T.backward(loss, tape)
        np.testing.assert_allclose(w.grad, [12.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3, 5]))
def test_same_conv_preserves_spatial_shape(b, h, w, k):
    x = Tensor(np.zeros((b, h, w, 2)))
    assert T.conv2d(x, Tensor(np.zeros((k, k, 2, 3))), padding="same").shape == (b, h, w, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forward_backward_finite(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(scale=50, size=(1, 4, 4, 2)), requires_grad=True)
    w = Parameter(rng.normal(size=(3, 3, 2, 2)))
    with T.Tape() as tape:
        y = T.sigmoid(T.conv2d(T.upsample2x(T.maxpool2d(T.relu(x), 2, 2)), w))
        loss = T.sum(y)
    T.backward(loss, tape)
    assert np.all(np.isfinite(y.data)) and np.all(np.isfinite(w.grad)) and np.all(np.isfinite(x.grad))
