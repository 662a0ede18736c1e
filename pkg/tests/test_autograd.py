import numpy as np
import pytest

from driftadapt.autograd import (
    Tensor,
    backward,
    batchnorm2d,
    channel_moments,
    conv2d,
    cross_entropy_loss,
    entropy_map,
    masked_mean_entropy_loss,
    relu,
    softmax_channels,
    tensor_sum,
    upsample_nearest,
)
from driftadapt.errors import NumericError, ShapeError

from fdcheck import assert_grad_close, numeric_grad

F64 = np.float64


def conv_reference(x, w, b, stride, pad):
    """Independent direct-summation convolution used as a forward oracle."""
    n, c, h, ww = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (ww + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    patch = xp[ni, :, yi * stride:yi * stride + kh, xi * stride:xi * stride + kw]
                    out[ni, oi, yi, xi] = np.sum(patch * w[oi]) + (b[oi] if b is not None else 0.0)
    return out


class TestConv2d:
    def test_single_multiply_add(self):
        x = Tensor(np.full((1, 1, 1, 1), 2.0))
        w = Tensor(np.full((1, 1, 1, 1), 3.0))
        b = Tensor(np.array([1.0]))
        out = conv2d(x, w, b)
        assert out.data.shape == (1, 1, 1, 1)
        assert out.data.item() == pytest.approx(7.0)

    def test_ones_3x3_padded_counts_receptive_field(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = conv2d(x, w, b, stride=1, padding=1).data[0, 0]
        expect = np.array([[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]])
        np.testing.assert_allclose(out, expect, rtol=1e-6)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
    def test_matches_direct_summation(self, stride, pad):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        out = conv2d(Tensor(x, dtype=F64), Tensor(w, dtype=F64), Tensor(b, dtype=F64),
                     stride=stride, padding=pad)
        np.testing.assert_allclose(out.data, conv_reference(x, w, b, stride, pad), rtol=1e-10)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True, dtype=F64)
        w = Tensor(0.3 * rng.standard_normal((4, 3, 3, 3)), requires_grad=True, dtype=F64)
        b = Tensor(0.1 * rng.standard_normal(4), requires_grad=True, dtype=F64)

        def loss():
            return tensor_sum(relu(conv2d(x, w, b, stride=2, padding=1)))

        backward(loss())
        for t in (x, w, b):
            assert_grad_close(t.grad, numeric_grad(loss, t))

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"(1, 2, 4, 4).*(3, 3)"):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), None)

    def test_kernel_larger_than_input_rejected(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), None)


class TestBatchNorm2d:
    def test_hand_normalization(self):
        x = Tensor(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
        out = batchnorm2d(x, np.array([2.0]), np.array([1.0]),
                          Tensor(np.ones(1)), Tensor(np.zeros(1)), eps=0.0)
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-7)

    def test_affine_after_normalization(self):
        x = Tensor(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
        out = batchnorm2d(x, np.array([2.0]), np.array([1.0]),
                          Tensor(np.full(1, 2.0)), Tensor(np.ones(1)), eps=0.0)
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 3.0], atol=1e-6)

    def test_supplied_batch_moments_match_batch_mode(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 4, 6, 6))
        mu, sg = channel_moments(x)
        scale = Tensor(rng.standard_normal(4), dtype=F64)
        shift = Tensor(rng.standard_normal(4), dtype=F64)
        a = batchnorm2d(Tensor(x, dtype=F64), mu, sg, scale, shift)
        # reference: normalize with the batch's own float64 moments
        ref = (x - mu[None, :, None, None]) / np.sqrt(sg[None, :, None, None] ** 2 + 1e-5)
        ref = scale.data[None, :, None, None] * ref + shift.data[None, :, None, None]
        np.testing.assert_allclose(a.data, ref, rtol=1e-12)

    def test_nonpositive_sigma_rejected(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(NumericError):
            batchnorm2d(x, np.zeros(1), np.zeros(1), Tensor(np.ones(1)), Tensor(np.zeros(1)))

    @pytest.mark.parametrize("seed", [0, 1])
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True, dtype=F64)
        scale = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True, dtype=F64)
        shift = Tensor(rng.standard_normal(3), requires_grad=True, dtype=F64)
        mu = rng.standard_normal(3)
        sg = rng.uniform(0.5, 2.0, 3)

        def loss():
            return tensor_sum(relu(batchnorm2d(x, mu, sg, scale, shift)))

        backward(loss())
        for t in (x, scale, shift):
            assert_grad_close(t.grad, numeric_grad(loss, t))

    def test_stats_receive_no_gradient(self):
        # stats enter as plain arrays; only input and affine params may carry grad
        x = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True, dtype=F64)
        out = batchnorm2d(x, np.zeros(2), np.ones(2), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        backward(tensor_sum(out))
        assert x.grad is not None


class TestChannelMoments:
    def test_population_convention(self):
        x = np.array([1.0, 3.0]).reshape(1, 1, 1, 2)
        mu, sg = channel_moments(x)
        assert mu[0] == pytest.approx(2.0)
        assert sg[0] == pytest.approx(1.0)  # population std, not sample

    def test_single_position_rejected(self):
        with pytest.raises(NumericError):
            channel_moments(np.zeros((1, 3, 1, 1)))


class TestRelu:
    def test_basic_values(self):
        out = relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_allclose(out.data, [0.0, 0.0, 2.0])

    def test_all_negative_zero_output_and_gradient(self):
        x = Tensor(np.array([-1.0, -2.0, -0.5]), requires_grad=True, dtype=F64)
        out = relu(x)
        assert np.all(out.data == 0.0)
        backward(tensor_sum(out))
        np.testing.assert_allclose(x.grad, np.zeros(3))

    def test_gradient_matches_finite_differences_away_from_zero(self):
        rng = np.random.default_rng(11)
        vals = rng.standard_normal(40)
        vals[np.abs(vals) < 1e-2] = 0.5  # keep clear of the kink
        x = Tensor(vals, requires_grad=True, dtype=F64)

        def loss():
            return tensor_sum(relu(x))

        backward(loss())
        assert_grad_close(x.grad, numeric_grad(loss, x))


class TestUpsampleNearest:
    def test_factor_2_replicates(self):
        out = upsample_nearest(Tensor(np.full((1, 1, 1, 1), 5.0)), 2)
        np.testing.assert_allclose(out.data, np.full((1, 1, 2, 2), 5.0))

    def test_factor_1_identity(self):
        x = np.arange(8.0).reshape(1, 2, 2, 2)
        out = upsample_nearest(Tensor(x), 1)
        np.testing.assert_allclose(out.data, x)

    def test_backward_block_sum(self):
        x = Tensor(np.zeros((1, 1, 3, 3)), requires_grad=True, dtype=F64)
        backward(tensor_sum(upsample_nearest(x, 2)))
        np.testing.assert_allclose(x.grad, np.full((1, 1, 3, 3), 4.0))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True, dtype=F64)

        def loss():
            return tensor_sum(relu(upsample_nearest(x, 2)))

        backward(loss())
        assert_grad_close(x.grad, numeric_grad(loss, x))


class TestSoftmaxChannels:
    def test_symmetry(self):
        out = softmax_channels(Tensor(np.zeros((1, 2, 1, 1))))
        np.testing.assert_allclose(out.data.reshape(-1), [0.5, 0.5])

    def test_uniform_over_14(self):
        out = softmax_channels(Tensor(np.full((1, 14, 2, 2), 3.7)))
        np.testing.assert_allclose(out.data, np.full((1, 14, 2, 2), 1.0 / 14.0), rtol=1e-6)

    def test_large_margin(self):
        logits = np.zeros((1, 2, 1, 1))
        logits[0, 0] = 10.0
        out = softmax_channels(Tensor(logits, dtype=F64))
        assert out.data[0, 0].item() > 0.9999
        assert out.data[0, 0].item() == pytest.approx(1.0 / (1.0 + np.exp(-10.0)))

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        out = softmax_channels(Tensor(rng.standard_normal((2, 14, 4, 4)) * 5, dtype=F64))
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones((2, 4, 4)), rtol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((1, 4, 3, 3)), requires_grad=True, dtype=F64)
        wgt = rng.standard_normal((1, 4, 3, 3))

        def loss():
            return tensor_sum(softmax_channels(x) * Tensor(wgt, dtype=F64))

        backward(loss())
        assert_grad_close(x.grad, numeric_grad(loss, x))


class TestEntropyMap:
    def test_uniform_is_ln14(self):
        p = np.full((1, 14, 2, 2), 1.0 / 14.0)
        out = entropy_map(Tensor(p, dtype=F64))
        assert out.data.shape == (1, 1, 2, 2)
        np.testing.assert_allclose(out.data, np.full((1, 1, 2, 2), np.log(14.0)), rtol=1e-12)

    def test_one_hot_is_zero(self):
        p = np.zeros((1, 3, 1, 1))
        p[0, 1] = 1.0
        out = entropy_map(Tensor(p))
        assert out.data.item() == 0.0

    def test_two_class_half(self):
        p = np.full((1, 2, 1, 1), 0.5)
        assert entropy_map(Tensor(p, dtype=F64)).data.item() == pytest.approx(np.log(2.0))

    def test_clamped_to_ln_k(self):
        p = np.full((1, 14, 4, 4), 1.0 / 14.0, dtype=np.float32)
        out = entropy_map(Tensor(p))
        assert out.data.max() <= np.log(14.0) + 1e-12


class TestMaskedMeanEntropyLoss:
    def test_uniform_logits_full_mask(self):
        loss = masked_mean_entropy_loss(Tensor(np.zeros((1, 14, 4, 4)), dtype=F64))
        assert float(loss.data) == pytest.approx(np.log(14.0), rel=1e-12)

    def test_all_zero_mask_is_constant_zero(self):
        x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 4, 4)),
                   requires_grad=True, dtype=F64)
        loss = masked_mean_entropy_loss(x, np.zeros((1, 1, 4, 4)))
        assert float(loss.data) == 0.0
        assert loss._backward is None  # constant: nothing recorded
        backward(loss)
        assert x.grad is None

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((2, 5, 4, 4)), requires_grad=True, dtype=F64)
        mask = (rng.uniform(size=(2, 1, 4, 4)) < 0.5).astype(np.float64)
        if mask.sum() == 0:
            mask[0, 0, 0, 0] = 1.0

        def loss():
            return masked_mean_entropy_loss(x, mask)

        backward(loss())
        assert_grad_close(x.grad, numeric_grad(loss, x))

    def test_loss_equals_mean_of_entropy_map_under_mask(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 6, 5, 5))
        mask = (rng.uniform(size=(1, 1, 5, 5)) < 0.5).astype(np.float64)
        loss = masked_mean_entropy_loss(Tensor(x, dtype=F64), mask)
        hmap = entropy_map(softmax_channels(Tensor(x, dtype=F64))).data
        expect = (hmap * mask).sum() / mask.sum()
        assert float(loss.data) == pytest.approx(expect, rel=1e-10)

    def test_bad_mask_shape_rejected(self):
        with pytest.raises(ShapeError):
            masked_mean_entropy_loss(Tensor(np.zeros((1, 3, 4, 4))), np.zeros((1, 1, 2, 2)))


class TestCrossEntropyLoss:
    def test_self_distillation_identity(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 5, 3, 3))
        probs = softmax_channels(Tensor(x, dtype=F64)).data
        loss = cross_entropy_loss(Tensor(x, dtype=F64), probs)
        ent = masked_mean_entropy_loss(Tensor(x, dtype=F64))
        assert float(loss.data) == pytest.approx(float(ent.data), rel=1e-10)

    def test_confident_one_hot_targets(self):
        rng = np.random.default_rng(8)
        base = rng.standard_normal((1, 1, 3, 3))
        x = np.concatenate([base + 10.0, base], axis=1)  # class 0 wins by margin 10
        q = np.zeros_like(x)
        q[:, 0] = 1.0
        loss = cross_entropy_loss(Tensor(x, dtype=F64), q)
        assert float(loss.data) < 1e-4

    @pytest.mark.parametrize("seed", [0, 1])
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((2, 4, 3, 3)), requires_grad=True, dtype=F64)
        q = rng.dirichlet(np.ones(4), size=(2, 3, 3)).transpose(0, 3, 1, 2)

        def loss():
            return cross_entropy_loss(x, q)

        backward(loss())
        assert_grad_close(x.grad, numeric_grad(loss, x))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True, dtype=F64)
        backward(tensor_sum(x))
        np.testing.assert_allclose(x.grad, np.ones((2, 3)))

    def test_off_path_parameter_gets_no_gradient(self):
        x = Tensor(np.ones(3), requires_grad=True, dtype=F64)
        y = Tensor(np.ones(3), requires_grad=True, dtype=F64)
        backward(tensor_sum(x * x))
        assert x.grad is not None
        assert y.grad is None

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(NumericError):
            backward(Tensor(np.zeros(3)))

    def test_graph_cleared_after_backward(self):
        x = Tensor(np.ones(3), requires_grad=True, dtype=F64)
        loss = tensor_sum(x * x)
        backward(loss)
        g1 = x.grad.copy()
        backward(loss)  # tape is gone: no further accumulation
        np.testing.assert_allclose(x.grad, g1)

    def test_diamond_path_accumulates(self):
        x = Tensor(np.full(2, 3.0), requires_grad=True, dtype=F64)
        y = x * x        # dy/dx = 2x
        z = y + y        # dz/dx = 4x
        backward(tensor_sum(z))
        np.testing.assert_allclose(x.grad, np.full(2, 12.0))

    def test_two_layer_network_full_finite_difference(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.standard_normal((1, 2, 6, 6)), dtype=F64)
        w1 = Tensor(0.5 * rng.standard_normal((3, 2, 3, 3)), requires_grad=True, dtype=F64)
        scale = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True, dtype=F64)
        shift = Tensor(0.1 * rng.standard_normal(3), requires_grad=True, dtype=F64)
        w2 = Tensor(0.5 * rng.standard_normal((4, 3, 3, 3)), requires_grad=True, dtype=F64)
        b2 = Tensor(0.1 * rng.standard_normal(4), requires_grad=True, dtype=F64)
        mu = np.zeros(3)
        sg = np.ones(3)

        def loss():
            h = relu(batchnorm2d(conv2d(x, w1, None, padding=1), mu, sg, scale, shift))
            logits = conv2d(h, w2, b2, padding=1)
            return masked_mean_entropy_loss(logits)

        backward(loss())
        for t in (w1, scale, shift, w2, b2):
            assert_grad_close(t.grad, numeric_grad(loss, t))
        assert x.grad is None  # input was not marked as requiring grad
