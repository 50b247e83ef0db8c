import math

import numpy as np
import pytest

from conftest import assert_grad_close, numeric_grad
from ocutrack import nncore
from ocutrack.errors import CropImpossible, OddDimension, ShapeMismatch

N_INSTANCES = 20


def conv_oracle(x, w, b):
    """Direct quadruple-loop summation; deliberately naive."""
    k, c, _, _ = w.shape
    _, h, wd = x.shape
    out = np.zeros((k, h - 2, wd - 2))
    for kk in range(k):
        for y in range(h - 2):
            for xx in range(wd - 2):
                acc = b[kk]
                for cc in range(c):
                    for dy in range(3):
                        for dx in range(3):
                            acc += x[cc, y + dy, xx + dx] * w[kk, cc, dy, dx]
                out[kk, y, xx] = acc
    return out


class TestConv2d:
    def test_all_ones(self):
        x = np.ones((1, 3, 3))
        w = np.ones((1, 1, 3, 3))
        out, _ = nncore.conv2d_valid(x, w, np.zeros(1))
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == pytest.approx(9.0)

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 6, 7))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out, _ = nncore.conv2d_valid(x, w, np.zeros(1))
        assert np.allclose(out[0], x[0, 1:-1, 1:-1])

    def test_matches_bruteforce_oracle(self, rng):
        x = rng.normal(size=(2, 8, 8))
        w = rng.normal(size=(4, 2, 3, 3))
        b = rng.normal(size=4)
        out, _ = nncore.conv2d_valid(x, w, b)
        ref = conv_oracle(x, w, b)
        assert np.abs(out - ref).max() <= 1e-5 * max(1.0, np.abs(ref).max())

    def test_linearity(self, rng):
        x = rng.normal(size=(2, 5, 5))
        y = rng.normal(size=(2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b0 = np.zeros(3)
        lhs, _ = nncore.conv2d_valid(2.0 * x + 3.0 * y, w, b0)
        cx, _ = nncore.conv2d_valid(x, w, b0)
        cy, _ = nncore.conv2d_valid(y, w, b0)
        assert np.allclose(lhs, 2.0 * cx + 3.0 * cy, rtol=1e-5, atol=1e-8)

    def test_zero_grad_out(self, rng):
        x = rng.normal(size=(2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        out, cache = nncore.conv2d_valid(x, w, rng.normal(size=3))
        gx, gw, gb = nncore.conv2d_valid_backward(cache, np.zeros_like(out))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_single_output_grad_weights_is_patch(self, rng):
        x = rng.normal(size=(1, 3, 3))
        w = rng.normal(size=(1, 1, 3, 3))
        _, cache = nncore.conv2d_valid(x, w, np.zeros(1))
        _, gw, gb = nncore.conv2d_valid_backward(cache, np.ones((1, 1, 1)))
        assert np.allclose(gw[0, 0], x[0])
        assert gb[0] == pytest.approx(1.0)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            nncore.conv2d_valid(rng.normal(size=(2, 5, 5)),
                                rng.normal(size=(3, 1, 3, 3)), np.zeros(3))

    def test_gradients_finite_difference(self, rng):
        for _ in range(N_INSTANCES):
            c, k = int(rng.integers(1, 3)), int(rng.integers(1, 3))
            h, w_ = int(rng.integers(3, 6)), int(rng.integers(3, 6))
            x = rng.normal(size=(c, h, w_))
            w = rng.normal(size=(k, c, 3, 3))
            b = rng.normal(size=k)
            out, cache = nncore.conv2d_valid(x, w, b)
            proj = rng.normal(size=out.shape)
            gx, gw, gb = nncore.conv2d_valid_backward(cache, proj)
            assert_grad_close(gx, numeric_grad(
                lambda v: float((nncore.conv2d_valid(v, w, b)[0] * proj).sum()), x))
            assert_grad_close(gw, numeric_grad(
                lambda v: float((nncore.conv2d_valid(x, v, b)[0] * proj).sum()), w))
            assert_grad_close(gb, numeric_grad(
                lambda v: float((nncore.conv2d_valid(x, w, v)[0] * proj).sum()), b))


class TestConv1x1:
    def test_gradients_finite_difference(self, rng):
        for _ in range(N_INSTANCES):
            c, k = int(rng.integers(1, 4)), int(rng.integers(1, 3))
            x = rng.normal(size=(c, 4, 3))
            w = rng.normal(size=(k, c, 1, 1))
            b = rng.normal(size=k)
            out, cache = nncore.conv1x1(x, w, b)
            proj = rng.normal(size=out.shape)
            gx, gw, gb = nncore.conv1x1_backward(cache, proj)
            assert_grad_close(gx, numeric_grad(
                lambda v: float((nncore.conv1x1(v, w, b)[0] * proj).sum()), x))
            assert_grad_close(gw, numeric_grad(
                lambda v: float((nncore.conv1x1(x, v, b)[0] * proj).sum()), w))
            assert_grad_close(gb, numeric_grad(
                lambda v: float((nncore.conv1x1(x, w, v)[0] * proj).sum()), b))


class TestRelu:
    def test_values(self):
        out, _ = nncore.relu(np.array([-1.0, 0.0, 2.0]))
        assert np.array_equal(out, [0.0, 0.0, 2.0])

    def test_backward_zero_at_kink(self):
        _, cache = nncore.relu(np.array([-1.0, 0.0, 2.0]))
        grad = nncore.relu_backward(cache, np.ones(3))
        assert np.array_equal(grad, [0.0, 0.0, 1.0])

    def test_gradient_away_from_kinks(self, rng):
        for _ in range(N_INSTANCES):
            x = rng.normal(size=(2, 4, 4))
            x[np.abs(x) <= 2e-2] = 0.5  # keep clear of the kink
            out, cache = nncore.relu(x)
            proj = rng.normal(size=out.shape)
            gx = nncore.relu_backward(cache, proj)
            assert_grad_close(gx, numeric_grad(
                lambda v: float((nncore.relu(v)[0] * proj).sum()), x))


class TestSigmoid:
    def test_midpoint(self):
        out, _ = nncore.sigmoid(np.array([0.0]))
        assert out[0] == pytest.approx(0.5)

    def test_saturation_no_overflow(self):
        out, _ = nncore.sigmoid(np.array([100.0, -100.0]))
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(0.0)

    def test_gradient(self, rng):
        for _ in range(N_INSTANCES):
            x = rng.normal(size=(3, 5)) * 3.0
            out, cache = nncore.sigmoid(x)
            proj = rng.normal(size=out.shape)
            gx = nncore.sigmoid_backward(cache, proj)
            assert_grad_close(gx, numeric_grad(
                lambda v: float((nncore.sigmoid(v)[0] * proj).sum()), x), rtol=1e-4)


class TestMaxpool:
    def test_tiny(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out, cache = nncore.maxpool2(x)
        assert out[0, 0, 0] == 4.0
        gx = nncore.maxpool2_backward(cache, np.ones((1, 1, 1)))
        assert np.array_equal(gx[0], [[0, 0], [0, 1]])

    def test_tie_breaks_to_first_row_major(self):
        x = np.full((1, 4, 4), 0.7)
        _, cache = nncore.maxpool2(x)
        gx = nncore.maxpool2_backward(cache, np.ones((1, 2, 2)))
        expected = np.zeros((4, 4))
        expected[0::2, 0::2] = 1.0
        assert np.array_equal(gx[0], expected)

    def test_matches_window_max_oracle(self, rng):
        x = rng.normal(size=(3, 8, 8))
        out, _ = nncore.maxpool2(x)
        for c in range(3):
            for y in range(4):
                for xx in range(4):
                    assert out[c, y, xx] == x[c, 2 * y:2 * y + 2, 2 * xx:2 * xx + 2].max()

    def test_odd_dimension(self):
        with pytest.raises(OddDimension):
            nncore.maxpool2(np.zeros((1, 3, 4)))

    def test_gradient(self, rng):
        for _ in range(N_INSTANCES):
            x = rng.normal(size=(2, 4, 6))
            out, cache = nncore.maxpool2(x)
            proj = rng.normal(size=out.shape)
            gx = nncore.maxpool2_backward(cache, proj)
            assert_grad_close(gx, numeric_grad(
                lambda v: float((nncore.maxpool2(v)[0] * proj).sum()), x))


class TestUpconv:
    def test_broadcast_single_value(self):
        x = np.full((1, 1, 1), 3.0)
        w = np.ones((1, 1, 2, 2))
        out, _ = nncore.upconv2(x, w, np.zeros(1))
        assert out.shape == (1, 2, 2)
        assert np.allclose(out, 3.0)

    def test_zero_input_gives_bias(self, rng):
        w = rng.normal(size=(3, 2, 2, 2))
        b = rng.normal(size=3)
        out, _ = nncore.upconv2(np.zeros((2, 3, 4)), w, b)
        assert np.allclose(out, b[:, None, None])

    def test_doubles_spatial(self, rng):
        out, _ = nncore.upconv2(rng.normal(size=(2, 5, 7)),
                                rng.normal(size=(4, 2, 2, 2)), np.zeros(4))
        assert out.shape == (4, 10, 14)

    def test_gradients_finite_difference(self, rng):
        for _ in range(N_INSTANCES):
            c, k = int(rng.integers(1, 3)), int(rng.integers(1, 3))
            x = rng.normal(size=(c, 3, 4))
            w = rng.normal(size=(k, c, 2, 2))
            b = rng.normal(size=k)
            out, cache = nncore.upconv2(x, w, b)
            proj = rng.normal(size=out.shape)
            gx, gw, gb = nncore.upconv2_backward(cache, proj)
            assert_grad_close(gx, numeric_grad(
                lambda v: float((nncore.upconv2(v, w, b)[0] * proj).sum()), x))
            assert_grad_close(gw, numeric_grad(
                lambda v: float((nncore.upconv2(x, v, b)[0] * proj).sum()), w))
            assert_grad_close(gb, numeric_grad(
                lambda v: float((nncore.upconv2(x, w, v)[0] * proj).sum()), b))


class TestConcatCrop:
    def test_center_crop_rows(self):
        skip = np.arange(16, dtype=float).reshape(1, 4, 4)
        up = np.zeros((1, 2, 2))
        out, _ = nncore.concat_crop(skip, up)
        assert out.shape == (2, 2, 2)
        assert np.array_equal(out[0], skip[0, 1:3, 1:3])

    def test_identity_when_same_size(self, rng):
        skip = rng.normal(size=(2, 3, 3))
        up = rng.normal(size=(1, 3, 3))
        out, _ = nncore.concat_crop(skip, up)
        assert np.array_equal(out[:2], skip)
        assert np.array_equal(out[2:], up)

    def test_odd_margin_rejected(self):
        with pytest.raises(CropImpossible):
            nncore.concat_crop(np.zeros((1, 5, 5)), np.zeros((1, 2, 2)))

    def test_negative_margin_rejected(self):
        with pytest.raises(CropImpossible):
            nncore.concat_crop(np.zeros((1, 2, 2)), np.zeros((1, 4, 4)))

    def test_gradient(self, rng):
        for _ in range(N_INSTANCES):
            skip = rng.normal(size=(2, 6, 6))
            up = rng.normal(size=(1, 4, 4))
            out, cache = nncore.concat_crop(skip, up)
            proj = rng.normal(size=out.shape)
            gs, gu = nncore.concat_crop_backward(cache, proj)
            assert_grad_close(gs, numeric_grad(
                lambda v: float((nncore.concat_crop(v, up)[0] * proj).sum()), skip))
            assert_grad_close(gu, numeric_grad(
                lambda v: float((nncore.concat_crop(skip, v)[0] * proj).sum()), up))


class TestBceLoss:
    def test_perfect_prediction(self):
        target = np.array([1.0, 0.0])
        pred = np.array([1.0 - 1e-7, 1e-7])
        loss, _ = nncore.bce_loss(pred, target)
        assert loss == pytest.approx(0.0, abs=1e-5)

    def test_uniform_half_is_ln2(self, rng):
        target = (rng.random((6, 6)) > 0.5).astype(float)
        pred = np.full((6, 6), 0.5)
        loss, _ = nncore.bce_loss(pred, target)
        assert loss == pytest.approx(math.log(2.0), abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            nncore.bce_loss(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_gradient(self, rng):
        for _ in range(N_INSTANCES):
            pred = rng.uniform(0.05, 0.95, size=(4, 4))
            target = (rng.random((4, 4)) > 0.5).astype(float)
            _, grad = nncore.bce_loss(pred, target)
            assert_grad_close(grad, numeric_grad(
                lambda v: nncore.bce_loss(v, target)[0], pred), rtol=1e-4)


class TestSgd:
    def test_single_plain_step(self):
        params = nncore.ParamSet()
        params.add("w", np.zeros(1, dtype=np.float64))
        params["w"].grad[...] = 1.0
        nncore.sgd_step(params, lr=0.1, momentum_coeff=0.0)
        assert params["w"].value[0] == pytest.approx(-0.1)
        assert params["w"].grad[0] == 0.0

    def test_zero_grads_leave_values(self, rng):
        params = nncore.ParamSet()
        v0 = rng.normal(size=(3, 3))
        params.add("w", v0.copy())
        nncore.sgd_step(params, lr=0.5, momentum_coeff=0.9)
        assert np.array_equal(params["w"].value, v0)

    def test_two_steps_match_hand_unrolled_recurrence(self):
        g1, g2, lr, mu = 0.7, -0.3, 0.05, 0.9
        params = nncore.ParamSet()
        params.add("w", np.zeros(1, dtype=np.float64))
        params["w"].grad[...] = g1
        nncore.sgd_step(params, lr, mu)
        params["w"].grad[...] = g2
        nncore.sgd_step(params, lr, mu)
        # m1 = g1; v1 = -lr*g1; m2 = mu*g1 + g2; v2 = v1 - lr*m2
        expected = -lr * g1 - lr * (mu * g1 + g2)
        assert params["w"].value[0] == pytest.approx(expected, rel=1e-12)


class TestDeterminism:
    def test_bit_identical_replays(self, rng):
        x = rng.normal(size=(3, 10, 10)).astype(np.float32)
        w = rng.normal(size=(5, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=5).astype(np.float32)
        out1, _ = nncore.conv2d_valid(x, w, b)
        out2, _ = nncore.conv2d_valid(x, w, b)
        assert np.array_equal(out1, out2)


class TestShapeAlgebra:
    def test_composable_shrink_halve_double(self, rng):
        x = rng.normal(size=(2, 12, 16))
        w3 = rng.normal(size=(2, 2, 3, 3))
        y, _ = nncore.conv2d_valid(x, w3, np.zeros(2))
        assert y.shape == (2, 10, 14)
        z, _ = nncore.maxpool2(y)
        assert z.shape == (2, 5, 7)
        u, _ = nncore.upconv2(z, rng.normal(size=(3, 2, 2, 2)), np.zeros(3))
        assert u.shape == (3, 10, 14)
