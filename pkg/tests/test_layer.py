"""Expansion correctness and the naive/expanded equivalence theorem."""

import numpy as np
import pytest

from stochcam.layer import (ClassifierHead, apply_masks_expanded,
                            expand_feature_map, expanded_shape, forward_expanded,
                            forward_logits, forward_logits_naive,
                            forward_logits_plain, forward_naive, init_head)
from stochcam.masks import dilated_kernel_mask, sample_masks, uniform_mask_set
from stochcam.tensor import (ShapeError, Tape, Tensor, backward, conv2d,
                             global_average_pool, pick, sigmoid,
                             sigmoid_cross_entropy)

from gradcheck import EPS, assert_grad_close, numerical_grad


def expand_window_oracle(x, s):
    """Hand-rolled windowing: per-window zero-padded copy into blocks."""
    k, h, w = x.shape
    pad = (s - 1) // 2
    out = np.zeros((k, h * s, w * s))
    for i in range(h):
        for j in range(w):
            for a in range(s):
                for b in range(s):
                    r, c = i + a - pad, j + b - pad
                    if 0 <= r < h and 0 <= c < w:
                        out[:, i * s + a, j * s + b] = x[:, r, c]
    return out


class TestExpandFeatureMap:
    def test_s_one_is_identity(self):
        x = np.random.default_rng(0).standard_normal((3, 4, 5))
        out = expand_feature_map(Tensor(x), 1)
        np.testing.assert_array_equal(out.data, x)

    def test_hand_unrolled_two_by_two(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out = expand_feature_map(Tensor(x), 3)
        assert out.shape == (1, 6, 6)
        np.testing.assert_array_equal(
            out.data[0, 0:3, 0:3], [[0, 0, 0], [0, 1, 2], [0, 3, 4]])
        np.testing.assert_array_equal(
            out.data[0, 0:3, 3:6], [[0, 0, 0], [1, 2, 0], [3, 4, 0]])
        np.testing.assert_array_equal(
            out.data[0, 3:6, 0:3], [[0, 1, 2], [0, 3, 4], [0, 0, 0]])
        np.testing.assert_array_equal(
            out.data[0, 3:6, 3:6], [[1, 2, 0], [3, 4, 0], [0, 0, 0]])
        np.testing.assert_array_equal(out.data, expand_window_oracle(x, 3))

    def test_matches_window_oracle_random(self):
        rng = np.random.default_rng(1)
        for k, h, w, s in [(2, 3, 4, 3), (1, 5, 5, 5), (3, 2, 6, 7), (2, 1, 1, 3)]:
            x = rng.standard_normal((k, h, w))
            out = expand_feature_map(Tensor(x), s)
            np.testing.assert_array_equal(out.data, expand_window_oracle(x, s))

    def test_paper_scale_output_shape(self):
        assert expanded_shape(512, 41, 41, 9) == (512, 369, 369)
        x = np.zeros((512, 41, 41))
        out = expand_feature_map(Tensor(x), 9)
        assert out.shape == (512, 369, 369)
        del out

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            expand_feature_map(Tensor(np.zeros((1, 2, 2))), 2)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 3))
        probe = np.sin(np.arange(2 * 9 * 9)).reshape(2, 9, 9)

        def scalar():
            return float((expand_feature_map(Tensor(x), 3).data * probe).sum())

        tape = Tape()
        xt = Tensor(x)
        out = expand_feature_map(xt, 3, tape)
        out.grad = probe.copy()
        xt.grad = None
        for rec_out, _, bwd in reversed(tape._records):
            if rec_out.grad is not None:
                bwd(rec_out.grad)
        num = numerical_grad(scalar, x, eps=EPS)
        assert_grad_close(xt.grad, num, label="expand")


class TestApplyMasks:
    def test_all_ones_identity(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 4, 4))
        xe = expand_feature_map(Tensor(x), 3)
        ms = sample_masks(4, 4, 3, 0.0, rng_seed=0)
        out = apply_masks_expanded(xe, ms)
        np.testing.assert_array_equal(out.data, xe.data)

    def test_center_only_masks(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 3, 3)) + 2.0  # strictly positive
        s = 3
        center_only = np.zeros((s, s), dtype=np.uint8)
        center_only[1, 1] = 1
        ms = uniform_mask_set(center_only, 3, 3)
        xe = expand_feature_map(Tensor(x), s)
        out = apply_masks_expanded(xe, ms)
        blocks = out.data.reshape(3, 3, s, 3, s)
        for i in range(3):
            for j in range(3):
                block = blocks[:, i, :, j, :]
                nz = np.nonzero(block[0])
                assert len(nz[0]) == 1
                assert (nz[0][0], nz[1][0]) == (1, 1)
                np.testing.assert_array_equal(block[:, 1, 1], x[:, i, j])

    def test_matches_per_block_multiply_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 4, 5))
        ms = sample_masks(4, 5, 3, 0.5, rng_seed=9)
        xe = expand_feature_map(Tensor(x), 3)
        out = apply_masks_expanded(xe, ms)
        ref = xe.data.copy()
        for i in range(4):
            for j in range(5):
                ref[:, i * 3:(i + 1) * 3, j * 3:(j + 1) * 3] *= ms.window_masks[i, j]
        np.testing.assert_array_equal(out.data, ref)

    def test_channel_uniformity(self):
        rng = np.random.default_rng(6)
        x = np.abs(rng.standard_normal((4, 5, 5))) + 0.1  # no natural zeros
        ms = sample_masks(5, 5, 3, 0.7, rng_seed=1)
        xe = expand_feature_map(Tensor(x), 3)
        out = apply_masks_expanded(xe, ms)
        zero_pattern = out.data == 0.0
        # a position is zero in all channels or in none
        assert np.all(np.all(zero_pattern, axis=0) | ~np.any(zero_pattern, axis=0))

    def test_grid_mismatch_rejected(self):
        xe = expand_feature_map(Tensor(np.zeros((1, 4, 4))), 3)
        ms = sample_masks(3, 4, 3, 0.5, rng_seed=0)
        with pytest.raises(ShapeError, match="mask grid"):
            apply_masks_expanded(xe, ms)


def random_setup(rng, k, h, w, s, c, p, seed):
    x = rng.standard_normal((k, h, w))
    head = ClassifierHead(Tensor(rng.standard_normal((c, k, s, s)) * 0.2),
                          Tensor(rng.standard_normal(c) * 0.1))
    masks = sample_masks(h, w, s, p, rng_seed=seed)
    return x, head, masks


class TestEquivalence:
    def test_p_zero_reduces_to_plain_convolution(self):
        rng = np.random.default_rng(7)
        x, head, masks = random_setup(rng, 4, 5, 5, 3, 2, 0.0, seed=0)
        fast = forward_expanded(Tensor(x), head, masks)
        plain = sigmoid(forward_logits_plain(Tensor(x), head))
        np.testing.assert_allclose(fast.data, plain.data, atol=1e-10, rtol=0)
        naive = forward_naive(Tensor(x), head, masks)
        np.testing.assert_allclose(naive.data, plain.data, atol=1e-10, rtol=0)

    def test_scores_in_unit_interval(self):
        rng = np.random.default_rng(8)
        x, head, masks = random_setup(rng, 4, 5, 5, 3, 3, 0.5, seed=1)
        s = forward_expanded(Tensor(x), head, masks)
        assert np.all((s.data > 0) & (s.data < 1))

    @pytest.mark.parametrize("kk,h,w,s,p", [
        (1, 3, 3, 3, 0.0), (2, 4, 5, 3, 0.3), (4, 6, 6, 5, 0.5),
        (3, 5, 4, 7, 0.9), (2, 2, 2, 3, 0.9), (1, 1, 1, 9, 0.5),
        (5, 7, 3, 5, 0.3), (2, 6, 6, 9, 0.9),
    ])
    def test_cross_implementation_equivalence(self, kk, h, w, s, p):
        rng = np.random.default_rng(kk * 100 + h * 10 + s)
        for seed in (0, 1):
            x, head, masks = random_setup(rng, kk, h, w, s, 3, p, seed)
            targets = (rng.random(3) < 0.5).astype(np.float64)

            def run(forward_logits_fn):
                tape = Tape()
                xt = Tensor(x.copy())
                logits = forward_logits_fn(xt, head, masks, False, tape)
                scores = sigmoid(logits, tape)
                loss = sigmoid_cross_entropy(logits, targets, tape)
                backward(tape, loss)
                return (scores.data.copy(), xt.grad.copy(),
                        head.weight.grad.copy(), head.bias.grad.copy())

            s_fast, gx_fast, gw_fast, gb_fast = run(forward_logits)
            s_naive, gx_naive, gw_naive, gb_naive = run(forward_logits_naive)
            np.testing.assert_allclose(s_fast, s_naive, atol=1e-10, rtol=0)
            np.testing.assert_allclose(gx_fast, gx_naive, atol=1e-10, rtol=0)
            np.testing.assert_allclose(gw_fast, gw_naive, atol=1e-10, rtol=0)
            np.testing.assert_allclose(gb_fast, gb_naive, atol=1e-10, rtol=0)

    def test_gradient_vs_finite_differences_both_paths(self):
        rng = np.random.default_rng(9)
        x, head, masks = random_setup(rng, 2, 3, 3, 3, 2, 0.5, seed=3)

        for fn in (forward_logits, forward_logits_naive):
            def scalar():
                return float(fn(Tensor(x), head, masks).data[0])

            tape = Tape()
            xt = Tensor(x)
            logits = fn(xt, head, masks, False, tape)
            loss = pick(logits, 0, tape)
            backward(tape, loss)
            num = numerical_grad(scalar, x, eps=EPS)
            assert_grad_close(xt.grad, num, label=fn.__name__)

    def test_dilated_pattern_forward(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 4, 4))
        mask = dilated_kernel_mask(5, 2)
        ms = uniform_mask_set(mask, 4, 4)
        head = init_head(2, 2, 5, seed=0)
        fast = forward_expanded(Tensor(x), head, ms)
        naive = forward_naive(Tensor(x), head, ms)
        np.testing.assert_allclose(fast.data, naive.data, atol=1e-10, rtol=0)


class TestHead:
    def test_parameter_count_constant(self):
        c, k, s = 3, 8, 5
        head = init_head(c, k, s, seed=0)
        assert head.parameter_count() == c * k * s * s + c
        # both paths consume the identical parameter tensors
        x = np.zeros((k, 4, 4))
        ms = sample_masks(4, 4, s, 0.0, rng_seed=0)
        forward_expanded(Tensor(x), head, ms)
        forward_naive(Tensor(x), head, ms)
        assert head.parameter_count() == c * k * s * s + c

    def test_channel_mismatch_rejected(self):
        head = init_head(2, 3, 3, seed=0)
        ms = sample_masks(4, 4, 3, 0.0, rng_seed=0)
        with pytest.raises(ShapeError, match="channels"):
            forward_expanded(Tensor(np.zeros((5, 4, 4))), head, ms)

    def test_rescale_scales_survivors(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 3))
        head = init_head(2, 2, 3, seed=1)
        ms = sample_masks(3, 3, 3, 0.5, rng_seed=4)
        plain = forward_logits(Tensor(x), head, ms, rescale=False)
        scaled = forward_logits(Tensor(x), head, ms, rescale=True)
        # rescaling by 1/(1-p)=2 doubles every feature contribution while the
        # bias term is untouched
        np.testing.assert_allclose(
            scaled.data, 2.0 * plain.data - head.bias.data, atol=1e-10)
