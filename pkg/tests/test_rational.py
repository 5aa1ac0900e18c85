"""Rational tensor entries, logit formulations, and their equivalence."""

import numpy as np
import pytest

import rada.numerics as nm
from rada import embedio, rational
from rada.errors import ConfigError, ContractError, ShapeError


def make_pair(rng, b=2, k=3, d=4):
    feats = rng.standard_normal((b, d))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    weights = rng.standard_normal((k, d))
    weights /= np.linalg.norm(weights, axis=1, keepdims=True)
    images = embedio.EmbeddingBatch(
        feats, rng.integers(0, k, size=b), normalized=True, split_tag="base-test"
    )
    classes = embedio.ClassMatrix(weights, [f"c{i}" for i in range(k)], normalized=True)
    return images, classes


def scalar_loop_rational(f, h):
    b, d = f.shape
    k = h.shape[0]
    out = np.empty((b, k, d))
    for bi in range(b):
        for ki in range(k):
            for j in range(d):
                out[bi, ki, j] = f[bi, j] * h[ki, j]
    return out


class TestComputeRational:
    def test_basis_vector_selects_class_coordinates(self):
        d = 4
        f = np.zeros((1, d))
        f[0, 0] = 1.0
        h = np.random.default_rng(0).standard_normal((3, d))
        h /= np.linalg.norm(h, axis=1, keepdims=True)
        images = embedio.EmbeddingBatch(f, [0], normalized=True, split_tag="base-test")
        classes = embedio.ClassMatrix(h, ["a", "b", "c"], normalized=True)
        r = rational.compute_rational(images, classes)
        for i in range(3):
            np.testing.assert_allclose(r.values.data[0, i, 0], h[i, 0])
            np.testing.assert_array_equal(r.values.data[0, i, 1:], np.zeros(d - 1))

    def test_self_similarity_row_sums_to_one(self):
        rng = np.random.default_rng(1)
        h = rng.standard_normal((3, 5))
        h /= np.linalg.norm(h, axis=1, keepdims=True)
        images = embedio.EmbeddingBatch(h[1:2], [1], normalized=True, split_tag="base-test")
        classes = embedio.ClassMatrix(h, ["a", "b", "c"], normalized=True)
        r = rational.compute_rational(images, classes)
        assert r.values.data[0, 1, :].sum() == pytest.approx(1.0, abs=1e-12)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(2)
        images, classes = make_pair(rng)
        r = rational.compute_rational(images, classes)
        expected = scalar_loop_rational(images.features, classes.weights)
        np.testing.assert_allclose(r.values.data, expected, atol=1e-15)

    def test_row_sums_equal_cosines(self):
        rng = np.random.default_rng(3)
        images, classes = make_pair(rng, b=4, k=5, d=8)
        r = rational.compute_rational(images, classes)
        cosines = images.features @ classes.weights.T
        np.testing.assert_allclose(r.values.data.sum(axis=-1), cosines, atol=1e-10)

    def test_entries_bounded_by_one(self):
        rng = np.random.default_rng(4)
        images, classes = make_pair(rng, b=6, k=4, d=3)
        r = rational.compute_rational(images, classes)
        assert np.all(np.abs(r.values.data) <= 1.0 + 1e-15)

    def test_unnormalized_input_rejected(self):
        rng = np.random.default_rng(5)
        images, classes = make_pair(rng)
        raw = embedio.EmbeddingBatch(
            images.features * 2.0, images.labels, normalized=False, split_tag="base-test"
        )
        with pytest.raises(ContractError):
            rational.compute_rational(raw, classes)


class TestZeroshotLogits:
    def test_matching_class_is_row_maximum(self):
        rng = np.random.default_rng(6)
        h = rng.standard_normal((4, 6))
        h /= np.linalg.norm(h, axis=1, keepdims=True)
        images = embedio.EmbeddingBatch(h[2:3], [2], normalized=True, split_tag="base-test")
        classes = embedio.ClassMatrix(h, list("abcd"), normalized=True)
        logits = rational.zeroshot_logits(images, classes, logit_scale=1.0)
        assert logits.data[0, 2] == pytest.approx(1.0, abs=1e-12)
        assert logits.data[0].argmax() == 2

    def test_orthogonal_rows_give_zero_logits(self):
        images = embedio.EmbeddingBatch(
            np.array([[1.0, 0.0, 0.0]]), [0], normalized=True, split_tag="base-test"
        )
        classes = embedio.ClassMatrix(
            np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]), ["a", "b"], normalized=True
        )
        logits = rational.zeroshot_logits(images, classes, logit_scale=3.0)
        np.testing.assert_allclose(logits.data, 0.0, atol=1e-15)

    def test_matches_matmul_oracle(self):
        rng = np.random.default_rng(7)
        images, classes = make_pair(rng, b=5, k=7, d=9)
        logits = rational.zeroshot_logits(images, classes, logit_scale=100.0)
        np.testing.assert_allclose(
            logits.data, 100.0 * (images.features @ classes.weights.T), atol=1e-12
        )

    def test_nonpositive_scale_rejected(self):
        rng = np.random.default_rng(8)
        images, classes = make_pair(rng)
        with pytest.raises(ConfigError):
            rational.zeroshot_logits(images, classes, logit_scale=0.0)

    def test_argmax_invariant_under_scale(self):
        rng = np.random.default_rng(9)
        images, classes = make_pair(rng, b=12, k=6, d=10)
        a = rational.zeroshot_logits(images, classes, logit_scale=1.0)
        b = rational.zeroshot_logits(images, classes, logit_scale=250.0)
        np.testing.assert_array_equal(a.data.argmax(axis=1), b.data.argmax(axis=1))


class TestMaskedLogits:
    def test_all_ones_mask_reproduces_zero_shot(self):
        rng = np.random.default_rng(10)
        images, classes = make_pair(rng, b=8, k=5, d=16)
        r = rational.compute_rational(images, classes)
        masked = rational.masked_logits(r, rational.all_ones_mask(r), logit_scale=100.0)
        zero_shot = rational.zeroshot_logits(images, classes, logit_scale=100.0)
        np.testing.assert_allclose(masked.data, zero_shot.data, atol=1e-10)

    def test_zero_mask_zeroes_logits(self):
        rng = np.random.default_rng(11)
        images, classes = make_pair(rng)
        r = rational.compute_rational(images, classes)
        masked = rational.masked_logits(r, nm.Tensor(np.zeros(r.shape)), logit_scale=100.0)
        np.testing.assert_array_equal(masked.data, np.zeros(masked.shape))

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(12)
        images, classes = make_pair(rng, b=3, k=4, d=5)
        r = rational.compute_rational(images, classes)
        mask = rng.standard_normal(r.shape)
        got = rational.masked_logits(r, nm.Tensor(mask), logit_scale=2.5)
        expected = np.zeros((3, 4))
        for b in range(3):
            for k in range(4):
                for j in range(5):
                    expected[b, k] += mask[b, k, j] * r.values.data[b, k, j]
        np.testing.assert_allclose(got.data, 2.5 * expected, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(13)
        images, classes = make_pair(rng)
        r = rational.compute_rational(images, classes)
        with pytest.raises(ShapeError):
            rational.masked_logits(r, nm.Tensor(np.ones((1, 1, 1))))

    def test_mask_gradient_passes_fd(self):
        rng = np.random.default_rng(14)
        images, classes = make_pair(rng)
        r = rational.compute_rational(images, classes)
        mask = nm.Tensor(rng.standard_normal(r.shape), requires_grad=True)

        def f(ps):
            return nm.sum_all(rational.masked_logits(r, ps[0], logit_scale=3.0))

        assert nm.finite_diff_check(f, [mask], h=1e-5) < 1e-6

    def test_reformulation_identity_randomized(self):
        # All-ones mask equals zero-shot logits over many random instances.
        rng = np.random.default_rng(15)
        for _ in range(50):
            b, k, d = rng.integers(1, 7), rng.integers(2, 7), rng.integers(2, 9)
            images, classes = make_pair(rng, b=int(b), k=int(k), d=int(d))
            r = rational.compute_rational(images, classes)
            masked = rational.masked_logits(r, rational.all_ones_mask(r))
            zero_shot = rational.zeroshot_logits(images, classes)
            np.testing.assert_allclose(masked.data, zero_shot.data, atol=1e-10)
