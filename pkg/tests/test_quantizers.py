import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bhvit.autograd import Tensor
from bhvit.errors import DomainError
from bhvit.quantizers import (
    QuantParams,
    activation_ste_factor,
    binarize_activation,
    binarize_attention,
    binarize_weight,
    decompose_backward,
    decompose_levels,
    decomposed_attention,
    quantization_decompose,
    weight_ste_mask,
)

finite = st.floats(-5, 5, allow_nan=False, width=32)
unit = st.floats(0, 1, allow_nan=False)


def qp(a, b):
    return QuantParams(Tensor(np.array([a])), Tensor(np.array([b])))


class TestActivation:
    def test_positive_example(self):
        assert binarize_activation(np.array([0.3]), qp(0.5, 0.1)).data[0] == 1

    def test_sign_of_zero(self):
        assert binarize_activation(np.array([0.1]), qp(0.5, 0.1)).data[0] == 1

    def test_factors_at_normalized_points(self):
        u = np.array([-1.5, -0.5, 0.0, 0.5, 1.5])
        assert activation_ste_factor(u).tolist() == [0, 1, 2, 1, 0]

    def test_backward_through_params(self):
        a, b = 0.5, 0.1
        x = Tensor(np.array([b - 0.75 * a, b - 0.25 * a, b, b + 0.5 * a, b + 2 * a]), requires_grad=True)
        binarize_activation(x, qp(a, b)).backward(np.ones(5))
        assert np.allclose(x.grad, [0.5, 1.5, 2.0, 1.0, 0.0])

    def test_nonpositive_scale(self):
        with pytest.raises(DomainError):
            binarize_activation(np.ones(2), qp(0.0, 0.0))

    @given(hnp.arrays(np.float32, 20, elements=finite), st.floats(0.05, 3), st.floats(-1, 1))
    def test_output_is_pm1(self, x, a, b):
        out = binarize_activation(x, qp(a, b)).data
        assert set(np.unique(out)) <= {-1.0, 1.0}

    def test_factor_continuity(self):
        u = np.linspace(-1.2, 1.2, 24001)
        f = activation_ste_factor(u)
        assert np.max(np.abs(np.diff(f))) <= 2 * (u[1] - u[0]) + 1e-12
        assert activation_ste_factor(np.array([-1.0, 0.0, 1.0])).tolist() == [0, 2, 0]


class TestWeight:
    def test_column_example(self):
        out = binarize_weight(np.array([[0.5], [-1.5], [1.0]])).data[:, 0]
        assert out.tolist() == [1.0, -1.0, 1.0]

    def test_ones_unchanged(self):
        w = np.ones((4, 3))
        assert np.array_equal(binarize_weight(w).data, w)

    def test_backward_mask(self):
        w = Tensor(np.array([[1.5], [0.5], [-1.0], [-0.25]]), requires_grad=True)
        binarize_weight(w).backward(np.ones((4, 1)))
        alpha = np.mean([1.5, 0.5, 1.0, 0.25])
        assert np.allclose(w.grad[:, 0], [0, alpha, 0, alpha])
        assert weight_ste_mask(np.array([-1.5, -1.0, 0.0, 1.0])).tolist() == [0, 0, 1, 0]

    def test_all_zero_column(self):
        out = binarize_weight(np.zeros((3, 2))).data
        assert np.all(out > 0)

    @given(hnp.arrays(np.float64, (6, 3), elements=finite), hnp.arrays(np.float64, 3, elements=st.floats(0.1, 10)))
    def test_signs_invariant_under_column_rescaling(self, w, scale):
        a = binarize_weight(w).data
        b = binarize_weight(w * scale).data
        assert np.array_equal(np.sign(a), np.sign(b))

    @given(hnp.arrays(np.float64, (6, 3), elements=finite))
    def test_two_states_per_column(self, w):
        out = binarize_weight(w).data
        for k in range(3):
            assert len(np.unique(np.abs(out[:, k]))) == 1


class TestAttention:
    def test_example(self):
        assert binarize_attention(np.array([0.6]), a=0.5, b=0.2).data[0] == pytest.approx(0.5)

    def test_at_bias_is_zero(self):
        assert binarize_attention(np.array([0.2]), a=0.5, b=0.2).data[0] == 0

    def test_backward_window(self):
        a, b = 0.5, 0.2
        pts = np.array([0.1, 0.2, 0.45, 0.69, 0.7, 0.9])
        t = Tensor(pts, requires_grad=True)
        binarize_attention(t, a=a, b=b).backward(np.full(6, 2.0))
        assert np.allclose(t.grad, [0, 1.0, 1.0, 1.0, 0, 0])

    def test_rejects_out_of_range(self):
        with pytest.raises(DomainError):
            binarize_attention(np.array([1.1]))
        binarize_attention(np.array([1 + 5e-7]))

    @given(hnp.arrays(np.float64, 16, elements=unit), st.floats(0.05, 1), st.floats(0, 0.5))
    def test_two_states(self, x, a, b):
        out = binarize_attention(x, a=a, b=b).data
        assert np.all(np.isclose(out, 0) | np.isclose(out, a))


class TestDecomposition:
    def test_example_point_four(self):
        dec = quantization_decompose(np.array([[0.4]]), 3)
        assert dec.dense()[:, 0, 0].tolist() == [1, 0, 0]

    def test_extremes(self):
        dec = quantization_decompose(np.array([[0.0, 1.0]]), 3)
        assert dec.dense()[:, 0, 0].tolist() == [0, 0, 0]
        assert dec.dense()[:, 0, 1].tolist() == [1, 1, 1]
        assert dec.level_sum()[0, 1] == 3

    def test_rejects_bad_s(self):
        with pytest.raises(DomainError):
            quantization_decompose(np.zeros((2, 2)), 0)

    @pytest.mark.parametrize("s", [1, 3, 7])
    def test_grid_identity_and_nesting(self, s):
        grid = np.round(np.arange(101) / 100, 2)
        dense = decompose_levels(grid, s)
        assert np.array_equal(dense.sum(0), np.clip(np.round(s * grid), 0, s))
        assert np.all(dense[1:] <= dense[:-1])

    def test_against_brute_force_threshold_count(self):
        grid = np.round(np.arange(101) / 100, 2)
        for s in (1, 3, 7):
            brute = np.array([sum(1 for sig in range(1, s + 1) if round(s * a) >= sig - 0.5) for a in grid])
            assert np.array_equal(decompose_levels(grid, s).sum(0), brute)

    @given(hnp.arrays(np.float64, (5, 5), elements=unit), st.integers(1, 7))
    def test_packed_masks_nested(self, a, s):
        dense = quantization_decompose(a, s).dense()
        assert np.all(dense[1:] <= dense[:-1])
        assert np.array_equal(dense.sum(0), np.clip(np.round(s * a), 0, s))

    def test_backward_rule(self):
        assert decompose_backward(np.array([1.0]), np.array([0.5]), 3).tolist() == [3.0]
        assert decompose_backward(np.array([1.0, 1.0]), np.array([-0.1, 1.2]), 3).tolist() == [0, 0]

    @given(hnp.arrays(np.float64, 8, elements=finite), hnp.arrays(np.float64, 8, elements=finite),
           hnp.arrays(np.float64, 8, elements=st.floats(-0.5, 1.5)))
    def test_backward_linear_in_upstream(self, g1, g2, a):
        lhs = decompose_backward(g1 + g2, a, 3)
        rhs = decompose_backward(g1, a, 3) + decompose_backward(g2, a, 3)
        assert np.allclose(lhs, rhs)

    def test_differentiable_sum(self):
        a = Tensor(np.array([0.1, 0.5, 0.9]), requires_grad=True)
        out = decomposed_attention(a, 3)
        assert out.data.tolist() == [0, 2, 3]
        out.backward(np.ones(3))
        assert a.grad.tolist() == [3, 3, 3]
