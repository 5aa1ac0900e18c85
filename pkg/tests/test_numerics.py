"""Tensor/tape primitives against direct values and the finite-difference oracle."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import rada.numerics as nm
from rada.errors import ContractError, DegenerateInputError, ShapeError


def leaf(arr, rg=True):
    return nm.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=rg)


class TestMatmul:
    def test_identity(self):
        a = leaf([[1.0, 2.0], [3.0, 4.0]], rg=False)
        out = nm.matmul(nm.Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_basis_selection(self):
        out = nm.matmul(nm.Tensor([[1.0, 0.0]]), nm.Tensor([[2.0], [3.0]]))
        np.testing.assert_array_equal(out.data, [[2.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            nm.matmul(nm.Tensor(np.zeros((2, 3))), nm.Tensor(np.zeros((2, 2))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a = leaf(rng.standard_normal((3, 4)))
        b = leaf(rng.standard_normal((4, 2)))

        def f(ps):
            return nm.sum_all(nm.matmul(ps[0], ps[1]))

        assert nm.finite_diff_check(f, [a, b], h=1e-5) < 1e-6


class TestSoftmax:
    def test_uniform(self):
        out = nm.softmax_lastdim(nm.Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_large_logit_no_overflow(self):
        out = nm.softmax_lastdim(nm.Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-300)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        out = nm.softmax_lastdim(nm.Tensor(rng.standard_normal((5, 7)) * 10))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_matches_extended_precision(self):
        mp = pytest.importorskip("mpmath")
        mp.mp.dps = 50
        rng = np.random.default_rng(11)
        x = rng.standard_normal(5) * 3
        exps = [mp.e ** mp.mpf(v) for v in x]
        total = sum(exps)
        expected = np.array([float(e / total) for e in exps])
        out = nm.softmax_lastdim(nm.Tensor(x))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)


class TestL2NormalizeRows:
    def test_three_four_five(self):
        out = nm.l2_normalize_rows(nm.Tensor([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-15)

    def test_unit_row_unchanged(self):
        out = nm.l2_normalize_rows(nm.Tensor([[1.0, 0.0, 0.0]]))
        np.testing.assert_array_equal(out.data, [[1.0, 0.0, 0.0]])

    def test_random_rows_unit_norm(self):
        rng = np.random.default_rng(5)
        out = nm.l2_normalize_rows(nm.Tensor(rng.standard_normal((4, 8))))
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-12)

    def test_zero_row_rejected(self):
        with pytest.raises(DegenerateInputError):
            nm.l2_normalize_rows(nm.Tensor([[0.0, 0.0], [1.0, 0.0]]))


class TestFiniteDiffOracle:
    def test_quadratic_is_exact(self):
        x = leaf([3.0])

        def f(ps):
            return nm.sum_all(nm.mul(ps[0], ps[0]))

        assert nm.finite_diff_check(f, [x], h=1e-5) < 1e-9

    def test_nonfinite_objective_raises(self):
        x = leaf([1.0])

        def f(ps):
            return nm.sum_all(nm.scale(ps[0], math.inf))

        with pytest.raises(nm.OracleError):
            nm.finite_diff_check(f, [x])


# Every primitive's backward, exercised through sum-of-outputs objectives.
_RNG = np.random.default_rng(2024)


def _fd_case(build, *arrays):
    params = [leaf(a) for a in arrays]
    return nm.finite_diff_check(lambda ps: build(*ps), params, h=1e-5)


@pytest.mark.parametrize(
    "name,build,shapes",
    [
        ("add", lambda a, b: nm.sum_all(nm.add(a, b)), [(3, 4), (3, 4)]),
        ("sub", lambda a, b: nm.sum_all(nm.mul(nm.sub(a, b), nm.sub(a, b))), [(2, 5), (2, 5)]),
        ("mul", lambda a, b: nm.sum_all(nm.mul(a, b)), [(2, 3, 4), (2, 3, 4)]),
        ("neg", lambda a: nm.sum_all(nm.mul(nm.neg(a), nm.neg(a))), [(4,)]),
        ("scale", lambda a: nm.sum_all(nm.mul(nm.scale(a, 2.5), a)), [(3, 2)]),
        ("add_scalar", lambda a: nm.sum_all(nm.mul(nm.add_scalar(a, 1.5), a)), [(5,)]),
        ("transpose", lambda a, b: nm.sum_all(nm.matmul(nm.transpose(a), b)), [(4, 3), (4, 2)]),
        ("take_row", lambda a: nm.sum_all(nm.mul(nm.take_row(a, 1), nm.take_row(a, 1))), [(3, 4)]),
        ("repeat_row", lambda v: nm.sum_all(nm.mul(nm.repeat_row(v, 3), nm.repeat_row(v, 3))), [(4,)]),
        ("take_plane", lambda a: nm.sum_all(nm.mul(nm.take_plane(a, 1), nm.take_plane(a, 1))), [(2, 3, 4)]),
        ("sum_lastdim", lambda a: nm.sum_all(nm.mul(nm.sum_lastdim(a), nm.sum_lastdim(a))), [(3, 4)]),
        ("mean_all", lambda a: nm.mul(nm.mean_all(a), nm.mean_all(a)), [(3, 3)]),
        ("mean_axis0", lambda a: nm.sum_all(nm.mul(nm.mean_axis0(a), nm.mean_axis0(a))), [(4, 3)]),
        ("softmax", lambda a: nm.sum_all(nm.mul(nm.softmax_lastdim(a), a)), [(3, 5)]),
        ("logsumexp", lambda a: nm.sum_all(nm.logsumexp_lastdim(a)), [(3, 5)]),
        ("l2norm", lambda a: nm.sum_all(nm.mul(nm.l2_normalize_rows(a), a)), [(3, 4)]),
        ("tanh", lambda a: nm.sum_all(nm.tanh(a)), [(3, 4)]),
        ("rational", lambda f, h: nm.sum_all(nm.mul(nm.rational_product(f, h), nm.rational_product(f, h))), [(2, 4), (3, 4)]),
    ],
)
def test_primitive_backward_matches_fd(name, build, shapes):
    arrays = [_RNG.standard_normal(s) for s in shapes]
    assert _fd_case(build, *arrays) < 1e-5


def test_abs_backward_away_from_zero():
    a = leaf(np.array([0.7, -1.3, 2.1, -0.4]))
    err = nm.finite_diff_check(lambda ps: nm.sum_all(nm.mul(nm.absolute(ps[0]), ps[0])), [a])
    assert err < 1e-6


def test_max_all_backward_away_from_ties():
    a = leaf(np.array([[0.2, 1.7], [0.9, -0.3]]))
    err = nm.finite_diff_check(lambda ps: nm.max_all(nm.mul(ps[0], ps[0])), [a])
    assert err < 1e-6


def test_xlogx_backward_positive_inputs():
    a = leaf(np.array([0.3, 0.9, 0.05, 1.4]))
    err = nm.finite_diff_check(lambda ps: nm.sum_all(nm.xlogx(ps[0])), [a])
    assert err < 1e-5


def test_xlogx_zero_maps_to_zero():
    out = nm.xlogx(nm.Tensor([0.0, 0.5]))
    assert out.data[0] == 0.0
    np.testing.assert_allclose(out.data[1], 0.5 * math.log(0.5))


def test_gather_rows_backward():
    a = leaf(_RNG.standard_normal((4, 3)))
    idx = np.array([2, 0, 1, 1])
    err = nm.finite_diff_check(
        lambda ps: nm.sum_all(nm.mul(nm.gather_rows(ps[0], idx), nm.gather_rows(ps[0], idx))), [a]
    )
    assert err < 1e-6


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(1, 6),
    cols=st.integers(1, 6),
    seed=st.integers(0, 2**31 - 1),
)
def test_fd_property_random_small_shapes(rows, cols, seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng.standard_normal((rows, cols)))
    b = leaf(rng.standard_normal((rows, cols)))

    def f(ps):
        prod = nm.mul(ps[0], ps[1])
        return nm.mean_all(nm.mul(nm.softmax_lastdim(prod), nm.add(ps[0], ps[1])))

    assert nm.finite_diff_check(f, [a, b], h=1e-5) < 1e-5


class TestTapeSemantics:
    def test_two_backward_passes_identical(self):
        a = leaf(_RNG.standard_normal((3, 3)))
        with nm.GradTape() as tape:
            loss = nm.sum_all(nm.mul(nm.softmax_lastdim(a), a))
        tape.backward(loss)
        g1 = tape.gradient(a)
        tape.backward(loss)
        g2 = tape.gradient(a)
        np.testing.assert_array_equal(g1, g2)

    def test_off_path_leaf_gets_exact_zeros(self):
        a = leaf([1.0, 2.0])
        b = leaf([3.0, 4.0])
        with nm.GradTape() as tape:
            loss = nm.sum_all(nm.mul(a, a))
        tape.backward(loss)
        np.testing.assert_array_equal(tape.gradient(b), np.zeros(2))

    def test_detached_tensor_gradient_refused(self):
        a = leaf([1.0], rg=False)
        with nm.GradTape() as tape:
            loss = nm.sum_all(nm.add_scalar(a, 1.0))
        tape.backward(loss)
        with pytest.raises(ContractError):
            tape.gradient(a)

    def test_leaf_gradient_shape_matches_leaf(self):
        a = leaf(_RNG.standard_normal((2, 3, 4)))
        with nm.GradTape() as tape:
            loss = nm.mean_all(nm.mul(a, a))
        tape.backward(loss)
        assert tape.gradient(a).shape == (2, 3, 4)

    def test_no_recording_without_tape(self):
        a = leaf([1.0, 2.0])
        out = nm.mul(a, a)
        assert out.requires_grad
        tape = nm.GradTape()
        assert len(tape) == 0

    def test_backward_requires_scalar(self):
        a = leaf([[1.0, 2.0]])
        with nm.GradTape() as tape:
            out = nm.mul(a, a)
        with pytest.raises(ShapeError):
            tape.backward(out)

    def test_values_stay_finite_through_stable_ops(self):
        x = nm.Tensor([[800.0, -900.0, 0.0]])
        y = nm.softmax_lastdim(x)
        z = nm.logsumexp_lastdim(x)
        assert np.all(np.isfinite(y.data)) and np.all(np.isfinite(z.data))
