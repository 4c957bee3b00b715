import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from aeroloc.errors import ContractViolationError, DimensionMismatchError
from aeroloc.features import DenseFeatureMap
from aeroloc.matching4d import (
    cosine_correlation,
    dual_softmax,
    hard_assign,
    soft_mutual_nn,
    weak_supervision_loss,
)
from oracles import soft_mnn_bruteforce


def fmap(arr, stride=1):
    arr = np.asarray(arr, dtype=float)
    h, w, _ = arr.shape
    return DenseFeatureMap(arr, stride, w * stride, h * stride)


small_tensors = arrays(
    np.float64,
    array_shapes(min_dims=4, max_dims=4, min_side=1, max_side=4),
    elements=st.floats(0, 1),
)


class TestCosineCorrelation:
    def test_self_similarity_is_one(self):
        f = fmap([[[3.0, 4.0]]])
        assert cosine_correlation(f, f)[0, 0, 0, 0] == pytest.approx(1.0)

    def test_orthogonal_is_zero(self):
        a = fmap([[[1.0, 0.0]]])
        b = fmap([[[0.0, 1.0]]])
        assert cosine_correlation(a, b)[0, 0, 0, 0] == 0.0

    def test_45_degrees(self):
        a = fmap([[[1.0, 0.0]]])
        b = fmap([[[1.0, 1.0]]])
        assert cosine_correlation(a, b)[0, 0, 0, 0] == pytest.approx(0.70710678, abs=1e-6)

    def test_opposite_clamped_to_zero(self):
        a = fmap([[[1.0, 0.0]]])
        b = fmap([[[-1.0, 0.0]]])
        assert cosine_correlation(a, b)[0, 0, 0, 0] == 0.0

    def test_zero_vector_yields_zero_row(self):
        a = fmap([[[0.0, 0.0], [1.0, 2.0]]])
        b = fmap([[[1.0, 1.0]]])
        s = cosine_correlation(a, b)
        assert s[0, 0, 0, 0] == 0.0
        assert s[0, 1, 0, 0] > 0.0

    def test_channel_mismatch_raises(self):
        a = fmap(np.zeros((1, 1, 2)))
        b = fmap(np.zeros((1, 1, 3)))
        with pytest.raises(DimensionMismatchError):
            cosine_correlation(a, b)

    def test_bounded_on_random_inputs(self, rng):
        a = fmap(rng.normal(size=(3, 4, 6)))
        b = fmap(rng.normal(size=(2, 5, 6)))
        s = cosine_correlation(a, b)
        assert s.shape == (3, 4, 2, 5)
        assert s.min() >= 0.0 and s.max() <= 1.0


class TestSoftMutualNN:
    def test_zero_tensor_propagates(self):
        t = np.zeros((2, 2, 2, 2))
        assert np.array_equal(soft_mutual_nn(t), t)

    def test_mutual_maximum_kept_exactly(self):
        t = np.array([[0.8, 0.4], [0.2, 0.6]]).reshape(1, 2, 1, 2)
        out = soft_mutual_nn(t)
        assert out[0, 0, 0, 0] == 0.8
        assert out[0, 1, 0, 1] == 0.6

    def test_hand_derived_2x2(self):
        t = np.array([[0.8, 0.4], [0.2, 0.6]]).reshape(1, 2, 1, 2)
        out = soft_mutual_nn(t).reshape(2, 2)
        assert out[0, 1] == pytest.approx(0.4 * (0.4 / 0.6) * (0.4 / 0.8), abs=1e-12)
        assert out[1, 0] == pytest.approx(0.2 * (0.2 / 0.8) * (0.2 / 0.6), abs=1e-12)

    def test_negative_entry_rejected(self):
        t = np.zeros((1, 1, 1, 1)) - 0.1
        with pytest.raises(ContractViolationError):
            soft_mutual_nn(t)

    @given(small_tensors)
    def test_contractive_property(self, t):
        out = soft_mutual_nn(t)
        assert np.all(out >= 0)
        assert np.all(out <= t + 1e-15)

    @given(small_tensors)
    def test_matches_bruteforce(self, t):
        assert np.allclose(soft_mutual_nn(t), soft_mnn_bruteforce(t), atol=1e-12)

    def test_equality_exactly_at_mutual_argmax(self, rng):
        # strictly positive entries with unique slice maxima
        t = rng.uniform(0.05, 1.0, size=(3, 3, 3, 3))
        out = soft_mutual_nn(t)
        is_row_max = t == t.max(axis=(0, 1), keepdims=True)
        is_col_max = t == t.max(axis=(2, 3), keepdims=True)
        mutual = is_row_max & is_col_max
        equal = np.isclose(out, t, rtol=0, atol=1e-12)
        assert np.array_equal(equal, mutual)


class TestDualSoftmax:
    def test_constant_tensor_uniform(self):
        p = dual_softmax(np.full((2, 2, 3, 3), 1.7))
        assert np.allclose(p.prob_u, 0.25)
        assert np.allclose(p.prob_s, 1.0 / 9.0)

    def test_one_hot_dominates(self):
        t = np.zeros((2, 2, 1, 1))
        t[0, 0, 0, 0] = 10.0
        p = dual_softmax(t)
        assert p.prob_u[0, 0, 0, 0] >= 0.9996

    @given(
        arrays(
            np.float64,
            array_shapes(min_dims=4, max_dims=4, min_side=1, max_side=4),
            elements=st.floats(-30, 30),
        )
    )
    def test_normalization_property(self, t):
        p = dual_softmax(t)
        assert np.allclose(p.prob_u.sum(axis=(0, 1)), 1.0, atol=1e-5)
        assert np.allclose(p.prob_s.sum(axis=(2, 3)), 1.0, atol=1e-5)
        assert p.prob_u.min() >= 0 and p.prob_u.max() <= 1

    def test_overflow_guard(self):
        p = dual_softmax(np.full((2, 2, 2, 2), 1e4))
        assert np.all(np.isfinite(p.prob_u))
        assert np.allclose(p.prob_u, 0.25)


class TestHardAssign:
    def test_identity_self_matching(self, rng):
        f = fmap(rng.uniform(0.1, 1.0, size=(3, 3, 4)))
        p = dual_softmax(soft_mutual_nn(cosine_correlation(f, f)))
        matches = hard_assign(p)
        got = {(m.uav, m.sat) for m in matches}
        assert got == {((i, j), (i, j)) for i in range(3) for j in range(3)}

    def test_uniform_ties_keep_single_match(self):
        p = dual_softmax(np.zeros((2, 2, 2, 2)))
        matches = hard_assign(p)
        assert len(matches) == 1
        assert matches.matches[0].uav == (0, 0)
        assert matches.matches[0].sat == (0, 0)

    def test_threshold_above_max_empties(self):
        p = dual_softmax(np.zeros((2, 2, 2, 2)))
        assert len(hard_assign(p, threshold=0.9)) == 0

    @given(
        arrays(
            np.float64,
            st.tuples(
                st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)
            ),
            elements=st.floats(-5, 5),
        )
    )
    def test_injective_partial_matching(self, t):
        matches = hard_assign(dual_softmax(t))
        uavs = [m.uav for m in matches]
        sats = [m.sat for m in matches]
        assert len(set(uavs)) == len(uavs)
        assert len(set(sats)) == len(sats)
        assert all(0.0 <= m.score <= 1.0 for m in matches)


class TestWeakSupervisionLoss:
    def test_perfect_one_hot_assignment(self):
        t = np.full((2, 2, 2, 2), -50.0)
        for i, j in ((0, 0), (0, 1), (1, 0), (1, 1)):
            t[i, j, i, j] = 50.0
        p = dual_softmax(t)
        loss = weak_supervision_loss(p, 1)
        assert loss == pytest.approx(-2.0, abs=1e-6)

    def test_label_flips_sign(self):
        t = np.random.default_rng(3).normal(size=(2, 3, 2, 3))
        p = dual_softmax(t)
        assert weak_supervision_loss(p, -1) == pytest.approx(-weak_supervision_loss(p, 1))

    def test_uniform_single_match_value(self):
        p = dual_softmax(np.zeros((2, 2, 2, 2)))
        assert weak_supervision_loss(p, 1) == pytest.approx(-0.5)

    def test_empty_assignment_warns_and_returns_zero(self):
        p = dual_softmax(np.zeros((2, 2, 2, 2)))
        empty = hard_assign(p, threshold=2.0)
        with pytest.warns(UserWarning, match="empty"):
            assert weak_supervision_loss(p, 1, empty) == 0.0
