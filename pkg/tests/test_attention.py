"""Attention head tests: weight ranges, coupling factorization, modulation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from videopose.attention import (
    attention_param_shapes,
    attention_weights,
    couple,
    dissociated_modulate,
    latent_vectors,
    modulate,
    resize_bilinear,
)
from videopose.diffcore import ShapeError, Tape, Tensor, add, backward, sum_axis


def head_params(feature_width, d_a, m, n, t_c, seed=0):
    rng = np.random.default_rng(seed)
    return {
        name: Tensor(rng.normal(0.0, 0.4, size=shape), requires_grad=True)
        for name, shape in attention_param_shapes(feature_width, d_a, m, n, t_c).items()
    }


class TestLatentVectors:
    def test_widths(self):
        params = head_params(10, 6, 3, 4, 5)
        z1, z2 = latent_vectors(Tensor(np.random.default_rng(1).normal(size=10)), params)
        assert z1.shape == (3 * 4,)
        assert z2.shape == (5,)

    def test_zero_weights_give_biases(self):
        m, n, t_c = 2, 2, 3
        params = head_params(4, 5, m, n, t_c, seed=2)
        for head in ("spatial", "temporal"):
            params[f"{head}.w_z"] = Tensor(np.zeros(params[f"{head}.w_z"].shape))
        z1, z2 = latent_vectors(Tensor(np.ones(4)), params)
        np.testing.assert_array_equal(z1.data, params["spatial.b_z"].data)
        np.testing.assert_array_equal(z2.data, params["temporal.b_z"].data)

    def test_vector_input_required(self):
        params = head_params(4, 5, 2, 2, 3)
        with pytest.raises(ShapeError, match="vector"):
            latent_vectors(Tensor(np.zeros((2, 2))), params)

    def test_gradients_reach_both_heads(self):
        params = head_params(6, 4, 2, 3, 4, seed=3)
        h = Tensor(np.random.default_rng(4).normal(size=6))
        with Tape() as tape:
            z1, z2 = latent_vectors(h, params)
            total = add(sum_axis(z1), sum_axis(z2))
        grads = backward(tape, total)
        for name, p in params.items():
            assert p in grads, name
            assert np.any(grads[p].data != 0.0), name


class TestAttentionWeights:
    def test_zero_logits_give_half(self):
        z1 = Tensor(np.zeros(12))
        z2 = Tensor(np.zeros(4))
        a_s, a_t = attention_weights(z1, z2, 3, 4)
        np.testing.assert_array_equal(a_s.data, np.full((3, 4), 0.5))
        np.testing.assert_array_equal(a_t.data, np.full(4, 0.25))

    def test_peaked_temporal_softmax(self):
        # softmax([10, 0, 0, 0]) concentrates on the first frame
        logits = np.array([10.0, 0.0, 0.0, 0.0])
        _, a_t = attention_weights(Tensor(np.zeros(4)), Tensor(logits), 2, 2)
        e = np.exp(logits - 10.0)
        np.testing.assert_allclose(a_t.data, e / e.sum(), rtol=0, atol=1e-15)
        assert a_t.data[0] > 0.9999

    @settings(deadline=None, max_examples=30)
    @given(seed=st.integers(min_value=0, max_value=10_000))
    def test_ranges_and_simplex(self, seed):
        rng = np.random.default_rng(seed)
        m, n, t_c = 3, 2, 5
        a_s, a_t = attention_weights(
            Tensor(rng.normal(0, 5, size=m * n)), Tensor(rng.normal(0, 5, size=t_c)), m, n
        )
        assert np.all(a_s.data > 0) and np.all(a_s.data < 1)
        assert np.all(a_t.data > 0)
        assert abs(a_t.data.sum() - 1.0) < 1e-12

    def test_grid_size_mismatch(self):
        with pytest.raises(ShapeError, match="entries for a"):
            attention_weights(Tensor(np.zeros(5)), Tensor(np.zeros(3)), 2, 3)


class TestCouple:
    def test_exact_factorization(self):
        rng = np.random.default_rng(5)
        a_s = Tensor(rng.uniform(0, 1, size=(3, 4)))
        a_t = Tensor(rng.dirichlet(np.ones(5)))
        a_st = couple(a_s, a_t)
        assert a_st.shape == (3, 4, 5)
        for t in range(5):
            # bitwise: each cell is the one product a_s[i,j] * a_t[t]
            np.testing.assert_array_equal(a_st.data[:, :, t], a_s.data * a_t.data[t])

    def test_gradients_flow_to_both_factors(self):
        a_s = Tensor(np.full((2, 2), 0.5), requires_grad=True)
        a_t = Tensor(np.array([0.25, 0.75]), requires_grad=True)
        with Tape() as tape:
            total = sum_axis(couple(a_s, a_t))
        grads = backward(tape, total)
        # d/dA_S[i,j] = sum_t A_T[t] = 1; d/dA_T[t] = sum_ij A_S[i,j] = 2
        np.testing.assert_allclose(grads[a_s].data, np.ones((2, 2)), rtol=0, atol=1e-15)
        np.testing.assert_allclose(grads[a_t].data, np.full(2, 4 * 0.5), rtol=0, atol=1e-15)


class TestModulate:
    def test_residual_identity_at_zero_weights(self):
        # A_ST = 0 leaves f' = f bit for bit
        f = Tensor(np.random.default_rng(6).normal(size=(4, 2, 3, 5)))
        a_st = Tensor(np.zeros((2, 3, 4)))
        np.testing.assert_array_equal(modulate(f, a_st).data, f.data)

    def test_unit_weights_double(self):
        f = Tensor(np.random.default_rng(7).normal(size=(2, 2, 2, 3)))
        out = modulate(f, Tensor(np.ones((2, 2, 2))))
        np.testing.assert_array_equal(out.data, 2.0 * f.data)

    def test_single_cell_weight(self):
        f = Tensor(np.ones((2, 2, 2, 1)))
        a = np.zeros((2, 2, 2))
        a[1, 0, 1] = 3.0  # (i, j, t) indexing; map is (t, i, j, c)
        out = modulate(f, Tensor(a))
        expected = np.ones((2, 2, 2, 1))
        expected[1, 1, 0, 0] = 4.0
        np.testing.assert_array_equal(out.data, expected)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match="do not match"):
            modulate(Tensor(np.zeros((4, 2, 3, 5))), Tensor(np.zeros((2, 3, 5))))


class TestDissociatedModulate:
    def test_doubles_channels(self):
        f = Tensor(np.random.default_rng(8).normal(size=(4, 3, 2, 6)))
        out = dissociated_modulate(
            f, Tensor(np.random.default_rng(9).uniform(size=(3, 2))),
            Tensor(np.full(4, 0.25)),
        )
        assert out.shape == (4, 3, 2, 12)

    def test_residual_identity_at_zero_weights(self):
        f = Tensor(np.random.default_rng(10).normal(size=(2, 2, 2, 3)))
        out = dissociated_modulate(f, Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data[:, :, :, :3], f.data)
        np.testing.assert_array_equal(out.data[:, :, :, 3:], f.data)

    def test_streams_are_independent(self):
        # the spatial stream ignores A_T and the temporal stream ignores A_S
        rng = np.random.default_rng(11)
        f = Tensor(rng.normal(size=(3, 2, 2, 4)))
        a_s = Tensor(rng.uniform(size=(2, 2)))
        out1 = dissociated_modulate(f, a_s, Tensor(np.full(3, 1 / 3)))
        out2 = dissociated_modulate(f, a_s, Tensor(np.array([0.9, 0.05, 0.05])))
        np.testing.assert_array_equal(out1.data[..., :4], out2.data[..., :4])
        assert np.any(out1.data[..., 4:] != out2.data[..., 4:])

    def test_shape_mismatches(self):
        f = Tensor(np.zeros((3, 2, 2, 4)))
        with pytest.raises(ShapeError, match="spatial weights"):
            dissociated_modulate(f, Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
        with pytest.raises(ShapeError, match="temporal weights"):
            dissociated_modulate(f, Tensor(np.zeros((2, 2))), Tensor(np.zeros(4)))


class TestResizeBilinear:
    def test_identity_is_exact_copy(self):
        grid = np.random.default_rng(12).uniform(size=(7, 7))
        out = resize_bilinear(grid, 7, 7)
        np.testing.assert_array_equal(out, grid)
        assert out is not grid

    def test_corners_preserved(self):
        grid = np.random.default_rng(13).uniform(size=(4, 5))
        out = resize_bilinear(grid, 9, 11)
        assert out[0, 0] == grid[0, 0]
        assert out[0, -1] == grid[0, -1]
        assert out[-1, 0] == grid[-1, 0]
        assert out[-1, -1] == grid[-1, -1]

    def test_doubling_midpoints(self):
        grid = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = resize_bilinear(grid, 3, 3)
        expected = np.array([[0.0, 0.5, 1.0], [1.0, 1.5, 2.0], [2.0, 2.5, 3.0]])
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)

    def test_constant_grid_stays_constant(self):
        out = resize_bilinear(np.full((3, 3), 0.7), 10, 14)
        np.testing.assert_allclose(out, np.full((10, 14), 0.7), rtol=0, atol=1e-15)

    def test_single_target_cell(self):
        grid = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = resize_bilinear(grid, 1, 1)
        assert out.shape == (1, 1)
        assert out[0, 0] == 1.0  # corner-aligned: a 1-point grid samples the origin

    @settings(deadline=None, max_examples=30)
    @given(
        seed=st.integers(min_value=0, max_value=10_000),
        oh=st.integers(min_value=1, max_value=16),
        ow=st.integers(min_value=1, max_value=16),
    )
    def test_output_within_input_range(self, seed, oh, ow):
        grid = np.random.default_rng(seed).uniform(size=(5, 6))
        out = resize_bilinear(grid, oh, ow)
        assert out.shape == (oh, ow)
        assert out.min() >= grid.min() - 1e-12
        assert out.max() <= grid.max() + 1e-12
