import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from diffclip.objective import (SimilarityMatrix, clip_loss, similarity_from_logit_scale,
                                similarity_matrix, uniform_loss)
from diffclip.tensor import DimensionError, Tape, Tensor

from conftest import check_gradients


def loss_oracle(s):
    """Direct per-entry log-sum-exp in both directions."""
    n = len(s)
    rows = [math.log(sum(math.exp(s[i][j]) for j in range(n))) - s[i][i] for i in range(n)]
    cols = [math.log(sum(math.exp(s[j][i]) for j in range(n))) - s[i][i] for i in range(n)]
    return 0.5 * (sum(rows) / n + sum(cols) / n)


def unit_rows(rng, n, e):
    x = rng.normal(size=(n, e))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


square = st.integers(2, 8).flatmap(
    lambda n: hnp.arrays(np.float64, (n, n), elements=st.floats(-20, 20)))


def value(s):
    return float(clip_loss(Tensor(s)).data)


class TestClipLoss:
    @pytest.mark.parametrize("n", range(2, 9))
    @pytest.mark.parametrize("c", [0.0, -3.7, 12.5])
    def test_constant_matrix_is_log_n(self, n, c):
        assert abs(value(np.full((n, n), c)) - uniform_loss(n)) < 1e-10

    def test_single_pair_is_zero(self):
        assert value(np.array([[4.2]])) == 0.0

    def test_matches_oracle(self, rng):
        for n in range(2, 9):
            s = rng.normal(size=(n, n)) * 3
            assert abs(value(s) - loss_oracle(s.tolist())) < 1e-12

    def test_perfect_alignment_sharp_temperature(self):
        s = similarity_matrix(Tensor(np.eye(4)), Tensor(np.eye(4)), tau=0.01)
        assert float(clip_loss(s).data) < 1e-40

    @settings(max_examples=60, deadline=None)
    @given(square, st.randoms(use_true_random=False))
    def test_joint_permutation_invariance(self, s, rnd):
        n = len(s)
        perm = list(range(n))
        rnd.shuffle(perm)
        assert abs(value(s[np.ix_(perm, perm)]) - value(s)) < 1e-10

    @settings(max_examples=60, deadline=None)
    @given(square)
    def test_transpose_symmetry(self, s):
        assert abs(value(s.T) - value(s)) < 1e-10

    @settings(max_examples=60, deadline=None)
    @given(square, st.floats(-50, 50))
    def test_shift_invariance(self, s, c):
        assert abs(value(s + c) - value(s)) < 1e-9

    @settings(max_examples=40, deadline=None)
    @given(square)
    def test_non_negative(self, s):
        assert value(s) >= 0.0

    def test_rejects_non_square(self):
        with pytest.raises(DimensionError):
            clip_loss(Tensor(np.zeros((2, 3))))

    def test_gradient(self, rng):
        s = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        assert check_gradients(lambda: clip_loss(s), [s]) < 1e-6

    def test_gradient_rows_sum_to_zero(self, rng):
        s = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        with Tape() as tape:
            loss = clip_loss(s)
        tape.backward(loss)
        np.testing.assert_allclose(s.grad.sum(), 0.0, atol=1e-12)


class TestSimilarity:
    def test_scaling(self, rng):
        u, v = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
        s = similarity_matrix(Tensor(u), Tensor(v), tau=0.5)
        np.testing.assert_allclose(s.values.data, 2.0 * u @ v.T)
        assert s.tau == 0.5

    def test_logit_scale_gradient(self, rng):
        u, v = Tensor(unit_rows(rng, 4, 3)), Tensor(unit_rows(rng, 4, 3))
        ls = Tensor(math.log(1 / 0.07), requires_grad=True)
        sm = similarity_from_logit_scale(u, v, ls)
        assert abs(sm.tau - 0.07) < 1e-12
        assert check_gradients(lambda: clip_loss(similarity_from_logit_scale(u, v, ls)), [ls]) < 1e-6

    def test_validation(self, rng):
        u = Tensor(unit_rows(rng, 3, 4))
        with pytest.raises(ValueError, match="unit"):
            similarity_matrix(Tensor(np.ones((3, 4))), u, 0.1)
        with pytest.raises(ValueError):
            similarity_matrix(u, u, 0.0)
        with pytest.raises(DimensionError):
            similarity_matrix(u, Tensor(unit_rows(rng, 2, 4)), 0.1)
        with pytest.raises(DimensionError):
            SimilarityMatrix(Tensor(np.zeros((2, 3))), 1.0)
