"""Embedding projection, hypersphere normalization, and alignment losses."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from videopose.diffcore import Tape, Tensor, backward, l2_normalize_eps
from videopose.embedding import (
    EMBEDDING_LOSS_KINDS,
    EmbeddedPair,
    embedding_loss,
    embedding_loss_kl,
    embedding_loss_ne,
    enforce_norm_constraint,
    hypersphere_normalize,
    project,
    spatial_pool,
)


def pair_from(f_e, p_e):
    f_e = Tensor(np.asarray(f_e, dtype=np.float64))
    p_e = Tensor(np.asarray(p_e, dtype=np.float64))
    return EmbeddedPair(
        f_e=f_e, p_e=p_e,
        f_e_hat=hypersphere_normalize(f_e),
        p_e_hat=hypersphere_normalize(p_e),
    )


class TestHypersphere:
    def test_three_four_five(self):
        out = hypersphere_normalize(Tensor([3.0, 4.0]))
        np.testing.assert_allclose(out.data, [0.6, 0.8], rtol=0, atol=1e-12)

    def test_unit_output_norm(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            v = rng.normal(size=6)
            out = hypersphere_normalize(Tensor(v))
            assert abs(np.linalg.norm(out.data) - 1.0) < 1e-12

    def test_scale_invariance(self):
        v = np.array([0.3, -1.2, 2.0, 0.01])
        a = hypersphere_normalize(Tensor(v)).data
        b = hypersphere_normalize(Tensor(1000.0 * v)).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_near_zero_vector_stays_finite(self):
        out = hypersphere_normalize(Tensor(np.zeros(4)))
        assert np.all(np.isfinite(out.data))


class TestNormalizedEuclideanLoss:
    def test_identical_embeddings_zero(self):
        p = pair_from([1.0, 2.0, 3.0], [2.0, 4.0, 6.0])  # same direction
        assert abs(embedding_loss_ne(p).item()) < 1e-9

    def test_orthogonal_embeddings_two(self):
        p = pair_from([1.0, 0.0], [0.0, 1.0])
        assert abs(embedding_loss_ne(p).item() - 2.0) < 1e-9

    def test_opposite_embeddings_four(self):
        p = pair_from([1.0, -0.5, 2.0], [-1.0, 0.5, -2.0])
        assert abs(embedding_loss_ne(p).item() - 4.0) < 1e-9

    def test_equals_two_minus_two_cosine(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a, b = rng.normal(size=5), rng.normal(size=5)
            p = pair_from(a, b)
            cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
            assert abs(embedding_loss_ne(p).item() - (2.0 - 2.0 * cos)) < 1e-9

    @settings(deadline=None, max_examples=50)
    @given(seed=st.integers(min_value=0, max_value=100_000))
    def test_range_zero_to_four(self, seed):
        rng = np.random.default_rng(seed)
        p = pair_from(rng.normal(0, 3, size=4), rng.normal(0, 3, size=4))
        val = embedding_loss_ne(p).item()
        assert -1e-12 <= val <= 4.0 + 1e-12

    def test_scale_invariance_of_loss(self):
        # invariance is exact up to the norm stabilizer, so keep scales >= 1
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=6), rng.normal(size=6)
        v1 = embedding_loss_ne(pair_from(a, b)).item()
        v2 = embedding_loss_ne(pair_from(7.0 * a, 1000.0 * b)).item()
        assert abs(v1 - v2) < 1e-9


class TestKlLosses:
    def test_frozen_binary_value(self):
        # softmax([z, 0]) with z = log(9) gives [0.9, 0.1];
        # KL([0.9, 0.1] || [0.5, 0.5]) = 0.9 ln 1.8 + 0.1 ln 0.2
        z = np.log(9.0)
        p = pair_from([z, 0.0], [0.0, 0.0])
        # scipy.special.rel_entr([0.9, 0.1], [0.5, 0.5]).sum()
        expected = 0.36806420716849708
        assert abs(embedding_loss_kl(p, "kl_fp").item() - expected) < 1e-9

    def test_direction_asymmetry(self):
        p = pair_from([2.0, 0.0, -1.0], [0.0, 0.5, 0.5])
        fp = embedding_loss_kl(p, "kl_fp").item()
        pf = embedding_loss_kl(p, "kl_pf").item()
        bi = embedding_loss_kl(p, "kl_bi").item()
        assert fp != pf
        assert abs(bi - (fp + pf)) < 1e-12

    def test_identical_inputs_zero(self):
        v = [0.4, -1.0, 2.2]
        p = pair_from(v, v)
        for kind in ("kl_fp", "kl_pf", "kl_bi"):
            assert abs(embedding_loss_kl(p, kind).item()) < 1e-12

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            p = pair_from(rng.normal(0, 2, size=5), rng.normal(0, 2, size=5))
            for kind in ("kl_fp", "kl_pf", "kl_bi"):
                assert embedding_loss_kl(p, kind).item() >= -1e-12

    def test_reads_raw_embeddings_not_normalized(self):
        # scaling the raw vector changes its softmax, so KL must change too
        a = np.array([1.0, 0.0])
        b = np.array([0.0, 1.0])
        v1 = embedding_loss_kl(pair_from(a, b), "kl_fp").item()
        v2 = embedding_loss_kl(pair_from(10.0 * a, b), "kl_fp").item()
        assert abs(v1 - v2) > 1e-3

    def test_unknown_direction(self):
        p = pair_from([1.0], [1.0])
        with pytest.raises(ValueError, match="unknown KL direction"):
            embedding_loss_kl(p, "kl_xy")


class TestLossDispatch:
    def test_all_kinds_dispatch(self):
        rng = np.random.default_rng(4)
        p = pair_from(rng.normal(size=4), rng.normal(size=4))
        for kind in EMBEDDING_LOSS_KINDS:
            val = embedding_loss(p, kind).item()
            assert np.isfinite(val)

    def test_unknown_kind(self):
        p = pair_from([1.0], [1.0])
        with pytest.raises(ValueError, match="unknown embedding loss"):
            embedding_loss(p, "cosine")


class TestProjection:
    def test_shapes_and_values(self):
        rng = np.random.default_rng(5)
        f_s = Tensor(rng.normal(size=6))
        z1 = Tensor(rng.normal(size=4))
        t_v = Tensor(rng.normal(size=(3, 6)))
        t_p = Tensor(rng.normal(size=(3, 4)))
        pair = project(f_s, z1, t_v, t_p)
        np.testing.assert_allclose(pair.f_e.data, t_v.data @ f_s.data, atol=1e-12)
        np.testing.assert_allclose(pair.p_e.data, t_p.data @ z1.data, atol=1e-12)
        assert abs(np.linalg.norm(pair.f_e_hat.data) - 1.0) < 1e-9
        assert abs(np.linalg.norm(pair.p_e_hat.data) - 1.0) < 1e-9

    def test_gradients_reach_projections(self):
        rng = np.random.default_rng(6)
        f_s = Tensor(rng.normal(size=5))
        z1 = Tensor(rng.normal(size=3))
        t_v = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        t_p = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        with Tape() as tape:
            loss = embedding_loss_ne(project(f_s, z1, t_v, t_p))
        grads = backward(tape, loss)
        assert t_v in grads and np.any(grads[t_v].data != 0.0)
        assert t_p in grads and np.any(grads[t_p].data != 0.0)


class TestSpatialPool:
    def test_sums_over_time(self):
        rng = np.random.default_rng(7)
        f = rng.normal(size=(3, 2, 2, 4))
        out = spatial_pool(Tensor(f))
        np.testing.assert_allclose(out.data, f.sum(axis=0).ravel(), atol=1e-12)

    def test_rank_checked(self):
        with pytest.raises(Exception, match="spatial_pool"):
            spatial_pool(Tensor(np.zeros((2, 3))))


class TestNormConstraint:
    def test_unit_frobenius_after(self):
        rng = np.random.default_rng(8)
        t_v = Tensor(rng.normal(size=(3, 4)) * 5.0, requires_grad=True)
        t_p = Tensor(rng.normal(size=(3, 2)) * 0.01, requires_grad=True)
        n_v, n_p = enforce_norm_constraint(t_v, t_p)
        assert abs(np.linalg.norm(n_v.data) - 1.0) < 1e-12
        assert abs(np.linalg.norm(n_p.data) - 1.0) < 1e-12
        assert n_v.requires_grad and n_p.requires_grad

    def test_idempotent(self):
        rng = np.random.default_rng(9)
        t_v = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        t_p = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        a_v, a_p = enforce_norm_constraint(t_v, t_p)
        b_v, b_p = enforce_norm_constraint(a_v, a_p)
        np.testing.assert_array_equal(a_v.data, b_v.data)
        np.testing.assert_array_equal(a_p.data, b_p.data)

    def test_direction_preserved(self):
        t_v = Tensor(np.array([[3.0, 0.0], [0.0, 4.0]]))
        t_p = Tensor(np.array([[2.0]]))
        n_v, n_p = enforce_norm_constraint(t_v, t_p)
        np.testing.assert_allclose(n_v.data, t_v.data / 5.0, atol=1e-12)
        np.testing.assert_array_equal(n_p.data, [[1.0]])

    def test_zero_matrix_rejected(self):
        with pytest.raises(ValueError, match="zero matrix"):
            enforce_norm_constraint(Tensor(np.zeros((2, 2))), Tensor(np.ones((2, 2))))


def test_l2_normalize_eps_matches_hypersphere():
    v = Tensor(np.array([1.0, 2.0, 2.0]))
    np.testing.assert_array_equal(
        hypersphere_normalize(v).data, l2_normalize_eps(v, 1e-12).data
    )
