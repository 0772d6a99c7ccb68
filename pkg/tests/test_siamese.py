"""Two-branch extractor tests: parameter sharing, branch symmetry, gradient
accumulation across branches."""

import numpy as np
import numpy.testing as npt
import pytest

from dhsl.errors import StateError
from dhsl.layers import FeatureStack
from dhsl.siamese import SiameseExtractor

from conftest import max_relative_error, numerical_gradient
from test_layers import mini_stack_config, random_mini_stack


def mini_extractor(rng, dtype=np.float64):
    return SiameseExtractor(random_mini_stack(rng, dtype=dtype))


class TestExtraction:
    def test_identical_images_give_identical_features(self, rng):
        ext = mini_extractor(rng)
        imgs = rng.normal(size=(3, 8, 6, 3))
        x1, x2 = ext.extract_pair(imgs, imgs.copy(), mode="train")
        npt.assert_array_equal(x1, x2)

    def test_pair_batch_of_64_gives_2048_dim_features(self, rng):
        ext = SiameseExtractor(FeatureStack())
        a = rng.normal(size=(64, 128, 48, 3)).astype(np.float32)
        b = rng.normal(size=(64, 128, 48, 3)).astype(np.float32)
        x1, x2 = ext.extract_pair(a, b, mode="infer")
        assert x1.shape == (64, 2048)
        assert x2.shape == (64, 2048)

    def test_swapping_inputs_swaps_outputs_exactly(self, rng):
        ext = mini_extractor(rng)
        a = rng.normal(size=(2, 8, 6, 3))
        b = rng.normal(size=(2, 8, 6, 3))
        x1, x2 = ext.extract_pair(a, b, mode="train")
        y1, y2 = ext.extract_pair(b, a, mode="train")
        npt.assert_array_equal(x1, y2)
        npt.assert_array_equal(x2, y1)

    def test_extract_single_matches_pair_members(self, rng):
        ext = mini_extractor(rng)
        a = rng.normal(size=(2, 8, 6, 3))
        b = rng.normal(size=(2, 8, 6, 3))
        x1, x2 = ext.extract_pair(a, b, mode="infer")
        npt.assert_allclose(ext.extract_single(a), x1, rtol=1e-12)
        npt.assert_allclose(ext.extract_single(b), x2, rtol=1e-12)

    def test_infer_repeatability_bit_identical(self, rng):
        ext = mini_extractor(rng, dtype=np.float32)
        imgs = rng.normal(size=(4, 8, 6, 3)).astype(np.float32)
        assert np.array_equal(ext.extract_single(imgs), ext.extract_single(imgs))

    def test_gallery_feature_matrix_shape(self, rng):
        ext = SiameseExtractor(FeatureStack())
        gallery = rng.normal(size=(100, 128, 48, 3)).astype(np.float32)
        feats = ext.extract_single(gallery)
        assert feats.shape == (100, 2048)

    def test_parameters_are_shared_by_reference(self, rng):
        ext = mini_extractor(rng)
        assert ext.stack is ext.stack  # single storage: one stack object
        a = rng.normal(size=(1, 8, 6, 3))
        x1, _ = ext.extract_pair(a, a, mode="infer")
        ext.stack.parameters()[0][1][...] += 0.1
        y1, _ = ext.extract_pair(a, a, mode="infer")
        assert not np.array_equal(x1, y1)  # both branches saw the same update


class TestBackward:
    def test_identical_inputs_and_grads_double_the_single_branch(self, rng):
        imgs = rng.normal(size=(2, 8, 6, 3))
        g = rng.normal(size=(2, 4))

        ext = mini_extractor(np.random.default_rng(7))
        ext.extract_pair(imgs, imgs.copy(), mode="train")
        ext.stack.zero_grad()
        ext.backward_pair(g, g.copy())
        pair_grads = {n: v.copy() for n, v in ext.stack.gradients()}

        single = SiameseExtractor(random_mini_stack(np.random.default_rng(7)))
        out = single.stack.forward(imgs, mode="train")
        single.stack.zero_grad()
        single.stack.backward(g.reshape(out.shape))
        for name, v in single.stack.gradients():
            npt.assert_allclose(pair_grads[name], 2 * v, rtol=1e-9, atol=1e-12)

    def test_zero_second_grad_equals_single_branch_in_infer_mode(self, rng):
        a = rng.normal(size=(2, 8, 6, 3))
        b = rng.normal(size=(2, 8, 6, 3))
        g = rng.normal(size=(2, 4))

        ext = mini_extractor(np.random.default_rng(11))
        ext.extract_pair(a, b, mode="infer")
        ext.stack.zero_grad()
        ext.backward_pair(g, np.zeros_like(g))
        pair_grads = {n: v.copy() for n, v in ext.stack.gradients()}

        single = SiameseExtractor(random_mini_stack(np.random.default_rng(11)))
        out = single.stack.forward(a, mode="infer")
        single.stack.zero_grad()
        single.stack.backward(g.reshape(out.shape))
        for name, v in single.stack.gradients():
            npt.assert_allclose(pair_grads[name], v, rtol=1e-9, atol=1e-12)

    def test_accumulation_is_linear_over_branches(self, rng):
        """Pair backward equals the sum of the two single-grad backwards."""
        a = rng.normal(size=(2, 8, 6, 3))
        b = rng.normal(size=(2, 8, 6, 3))
        g1 = rng.normal(size=(2, 4))
        g2 = rng.normal(size=(2, 4))
        ext = mini_extractor(np.random.default_rng(3))

        ext.extract_pair(a, b, mode="infer")
        ext.stack.zero_grad()
        ext.backward_pair(g1, g2)
        both = {n: v.copy() for n, v in ext.stack.gradients()}

        ext.extract_pair(a, b, mode="infer")
        ext.stack.zero_grad()
        ext.backward_pair(g1, np.zeros_like(g2))
        first = {n: v.copy() for n, v in ext.stack.gradients()}

        ext.extract_pair(a, b, mode="infer")
        ext.stack.zero_grad()
        ext.backward_pair(np.zeros_like(g1), g2)
        second = {n: v.copy() for n, v in ext.stack.gradients()}

        for name in both:
            npt.assert_allclose(both[name], first[name] + second[name],
                                rtol=1e-9, atol=1e-12)

    def test_end_to_end_finite_difference_through_both_branches(self, rng):
        ext = mini_extractor(rng)
        a = rng.uniform(-1, 1, size=(1, 8, 6, 3))
        b = rng.uniform(-1, 1, size=(1, 8, 6, 3))
        r1 = rng.normal(size=(1, 4))
        r2 = rng.normal(size=(1, 4))

        def loss(av, bv):
            x1, x2 = ext.extract_pair(av, bv, mode="train")
            return float((x1 * r1).sum() + (x2 * r2).sum())

        ext.extract_pair(a, b, mode="train")
        ext.stack.zero_grad()
        ga = ext.backward_pair(r1, r2)[:1]
        na = numerical_gradient(lambda v: loss(v, b), a)
        assert max_relative_error(ga, na) < 1e-3

    def test_backward_before_forward_raises(self, rng):
        ext = mini_extractor(rng)
        with pytest.raises(StateError):
            ext.backward_pair(np.zeros((1, 4)), np.zeros((1, 4)))
