"""Skeleton adjacency and pose backbone tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from videopose.diffcore import ShapeError, Tape, Tensor, backward, sum_axis
from videopose.posegraph import (
    CONV_CHANNELS,
    SkeletonTopology,
    WeightedAdjacency,
    batchnorm,
    build_adjacency,
    default_topology,
    gcn_frame,
    init_bn_state,
    normalize_adjacency,
    pose_backbone_forward,
    pose_feature_width,
    pose_param_shapes,
    recurrent_backbone_forward,
    recurrent_param_shapes,
)

CHAIN3 = SkeletonTopology(joint_count=3, bones=frozenset({(0, 1), (1, 2)}))


def random_params(shapes, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in shapes.items():
        if name.startswith("bn") and name.endswith("gamma"):
            data = np.ones(shape)
        elif name.startswith("bn") or name.endswith(".b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, scale, size=shape)
        out[name] = Tensor(data, requires_grad=True)
    return out


class TestAdjacencyOracle:
    def test_three_joint_chain_weights(self):
        adj = build_adjacency(CHAIN3, alpha=5.0, beta=2.0)
        expected = np.array([[0, 5, 2], [5, 0, 5], [2, 5, 0]], dtype=float)
        np.testing.assert_array_equal(adj.E, expected)

    def test_three_joint_chain_degrees(self):
        # degrees of E + I: rows sum to 8, 11, 8
        adj = build_adjacency(CHAIN3, alpha=5.0, beta=2.0)
        deg = (adj.E + np.eye(3)).sum(axis=1)
        np.testing.assert_array_equal(deg, [8.0, 11.0, 8.0])

    def test_three_joint_chain_normalized_entry(self):
        a_hat = normalize_adjacency(build_adjacency(CHAIN3, alpha=5.0, beta=2.0))
        assert abs(a_hat[0, 1] - 5.0 / np.sqrt(88.0)) < 1e-12
        assert abs(a_hat[1, 0] - 5.0 / np.sqrt(88.0)) < 1e-12
        assert abs(a_hat[0, 0] - 1.0 / 8.0) < 1e-12
        assert abs(a_hat[0, 2] - 2.0 / 8.0) < 1e-12

    def test_single_joint(self):
        solo = SkeletonTopology(joint_count=1)
        a_hat = normalize_adjacency(build_adjacency(solo, alpha=5.0, beta=2.0))
        np.testing.assert_array_equal(a_hat, [[1.0]])

    @settings(deadline=None, max_examples=40)
    @given(
        j=st.integers(min_value=2, max_value=9),
        alpha=st.floats(min_value=0.5, max_value=10),
        beta=st.floats(min_value=0.1, max_value=10),
        seed=st.integers(min_value=0, max_value=10_000),
    )
    def test_normalized_adjacency_symmetric(self, j, alpha, beta, seed):
        rng = np.random.default_rng(seed)
        bones = {(i, i + 1) for i in range(j - 1)}
        extra = rng.integers(0, j, size=(3, 2))
        bones |= {(min(a, b), max(a, b)) for a, b in extra if a != b}
        a_hat = normalize_adjacency(
            build_adjacency(SkeletonTopology(j, frozenset(bones)), alpha, beta)
        )
        np.testing.assert_allclose(a_hat, a_hat.T, rtol=0, atol=1e-15)
        assert np.all(np.isfinite(a_hat))

    def test_permutation_equivariance(self):
        topo = default_topology(6)
        perm = np.array([3, 0, 5, 1, 4, 2])
        permuted_bones = frozenset(
            (int(np.where(perm == i)[0][0]), int(np.where(perm == j)[0][0]))
            for i, j in topo.bones
        )
        a = normalize_adjacency(build_adjacency(topo, 5.0, 2.0))
        b = normalize_adjacency(
            build_adjacency(SkeletonTopology(6, permuted_bones), 5.0, 2.0)
        )
        p = np.eye(6)[perm]
        np.testing.assert_allclose(p.T @ b @ p, a, rtol=0, atol=1e-14)


class TestAdjacencyValidation:
    def test_asymmetric_rejected(self):
        e = np.array([[0.0, 5.0], [2.0, 0.0]])
        with pytest.raises(ValueError, match="symmetric"):
            WeightedAdjacency(E=e, alpha=5.0, beta=2.0)

    def test_nonzero_diagonal_rejected(self):
        e = np.array([[1.0, 5.0], [5.0, 0.0]])
        with pytest.raises(ValueError, match="diagonal"):
            WeightedAdjacency(E=e, alpha=5.0, beta=2.0)

    def test_alien_weight_rejected(self):
        e = np.array([[0.0, 3.0], [3.0, 0.0]])
        with pytest.raises(ValueError, match="alpha or beta"):
            WeightedAdjacency(E=e, alpha=5.0, beta=2.0)

    def test_zero_degree_rejected(self):
        adj = build_adjacency(
            SkeletonTopology(2, frozenset({(0, 1)})), alpha=-1.0, beta=0.0
        )
        with pytest.raises(ValueError, match="zero-degree"):
            normalize_adjacency(adj)

    def test_nonfinite_weights_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            build_adjacency(CHAIN3, alpha=np.inf, beta=2.0)


class TestTopology:
    def test_self_bone_rejected(self):
        with pytest.raises(ValueError, match="not a bone"):
            SkeletonTopology(3, frozenset({(1, 1)}))

    def test_out_of_range_bone_rejected(self):
        with pytest.raises(ValueError, match="references a joint"):
            SkeletonTopology(3, frozenset({(0, 7)}))

    def test_bones_canonicalized(self):
        topo = SkeletonTopology(3, frozenset({(2, 0), (0, 2), (1, 0)}))
        assert topo.bones == frozenset({(0, 2), (0, 1)})

    def test_disconnected_warns(self):
        with pytest.warns(UserWarning, match="not connected"):
            SkeletonTopology(4, frozenset({(0, 1)}))

    @pytest.mark.parametrize("j", range(2, 13))
    def test_default_topology_connected(self, j, recwarn):
        topo = default_topology(j)
        assert topo.joint_count == j
        assert not recwarn.list

    def test_save_load_round_trip(self, tmp_path):
        topo = default_topology(8)
        path = tmp_path / "skeleton.txt"
        topo.save(path)
        assert SkeletonTopology.load(path) == topo

    def test_load_empty_file(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_text("\n# only a comment\n")
        with pytest.raises(ValueError, match="empty topology"):
            SkeletonTopology.load(path)

    def test_load_bad_joint_count(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("eight\n0 1\n")
        with pytest.raises(ValueError, match="joint count"):
            SkeletonTopology.load(path)

    def test_load_bad_bone_line(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("3\n0 1 2\n")
        with pytest.raises(ValueError, match="line 2"):
            SkeletonTopology.load(path)


class TestGcnFrame:
    def test_linear_in_weights(self):
        rng = np.random.default_rng(1)
        p = Tensor(rng.normal(size=(3, 4)))
        a_hat = normalize_adjacency(build_adjacency(default_topology(4), 5.0, 2.0))
        w1 = rng.normal(size=(3, 6))
        w2 = rng.normal(size=(3, 6))
        lhs = gcn_frame(p, a_hat, Tensor(w1 + w2)).data
        rhs = gcn_frame(p, a_hat, Tensor(w1)).data + gcn_frame(p, a_hat, Tensor(w2)).data
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)

    def test_identity_adjacency_is_plain_projection(self):
        rng = np.random.default_rng(2)
        p = rng.normal(size=(3, 5))
        w = rng.normal(size=(3, 2))
        out = gcn_frame(Tensor(p), np.eye(5), Tensor(w))
        np.testing.assert_allclose(out.data, p.T @ w, rtol=0, atol=1e-12)

    def test_shape_errors(self):
        with pytest.raises(ShapeError, match="3 x J"):
            gcn_frame(Tensor(np.zeros((4, 3))), np.eye(3), Tensor(np.zeros((3, 2))))
        with pytest.raises(ShapeError, match="does not match J"):
            gcn_frame(Tensor(np.zeros((3, 4))), np.eye(3), Tensor(np.zeros((3, 2))))


class TestBatchnorm:
    def test_normalizes_current_map(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(2.0, 3.0, size=(4, 5, 6)))
        state = {"bn.mean": np.zeros(4), "bn.var": np.ones(4)}
        out = batchnorm(
            x, Tensor(np.ones(4)), Tensor(np.zeros(4)), state, "bn",
            training=False, update_running=False,
        )
        mu = out.data.mean(axis=(1, 2))
        var = out.data.var(axis=(1, 2))
        np.testing.assert_allclose(mu, np.zeros(4), rtol=0, atol=1e-12)
        np.testing.assert_allclose(var, np.ones(4), rtol=0, atol=1e-4)

    def test_stored_stats_do_not_change_output(self):
        # normalization reads the map, not the running state
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, 3)))
        g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
        s1 = {"bn.mean": np.zeros(2), "bn.var": np.ones(2)}
        s2 = {"bn.mean": np.full(2, 50.0), "bn.var": np.full(2, 9.0)}
        out1 = batchnorm(x, g, b, s1, "bn", training=False, update_running=False)
        out2 = batchnorm(x, g, b, s2, "bn", training=False, update_running=False)
        np.testing.assert_array_equal(out1.data, out2.data)

    def test_running_update_momentum(self):
        x = Tensor(np.array([[4.0, 8.0]]))  # one channel, mean 6, var 4
        state = {"bn.mean": np.zeros(1), "bn.var": np.ones(1)}
        batchnorm(
            x, Tensor(np.ones(1)), Tensor(np.zeros(1)), state, "bn",
            training=True, update_running=True,
        )
        np.testing.assert_allclose(state["bn.mean"], [0.9 * 0.0 + 0.1 * 6.0])
        np.testing.assert_allclose(state["bn.var"], [0.9 * 1.0 + 0.1 * 4.0])

    def test_no_update_without_flag(self):
        x = Tensor(np.array([[4.0, 8.0]]))
        state = {"bn.mean": np.zeros(1), "bn.var": np.ones(1)}
        batchnorm(
            x, Tensor(np.ones(1)), Tensor(np.zeros(1)), state, "bn",
            training=True, update_running=False,
        )
        np.testing.assert_array_equal(state["bn.mean"], [0.0])
        np.testing.assert_array_equal(state["bn.var"], [1.0])

    def test_gamma_beta_affine(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(3, 7)))
        state = init_bn_state("", (3,))
        plain = batchnorm(
            x, Tensor(np.ones(3)), Tensor(np.zeros(3)), state, "bn1", False, False
        )
        scaled = batchnorm(
            x, Tensor(np.array([2.0, -1.0, 0.5])), Tensor(np.array([1.0, 0.0, -3.0])),
            state, "bn1", False, False,
        )
        expected = plain.data * np.array([2.0, -1.0, 0.5])[:, None] + np.array(
            [1.0, 0.0, -3.0]
        )[:, None]
        np.testing.assert_allclose(scaled.data, expected, rtol=0, atol=1e-12)


class TestPoseBackbone:
    def test_output_width(self):
        j, t_p, d_g = 4, 3, 8
        params = random_params(pose_param_shapes(t_p, d_g), seed=6)
        a_hat = normalize_adjacency(build_adjacency(default_topology(j), 5.0, 2.0))
        poses = np.random.default_rng(7).normal(size=(3, j, t_p))
        out = pose_backbone_forward(poses, params, a_hat)
        assert out.shape == (pose_feature_width("gcn", j, t_p, d_g),)
        assert out.shape == (CONV_CHANNELS[-1] * j * t_p,)

    def test_gradients_reach_every_parameter(self):
        j, t_p, d_g = 4, 3, 8
        params = random_params(pose_param_shapes(t_p, d_g), seed=8)
        a_hat = normalize_adjacency(build_adjacency(default_topology(j), 5.0, 2.0))
        poses = np.random.default_rng(9).normal(size=(3, j, t_p))
        with Tape() as tape:
            out = sum_axis(pose_backbone_forward(poses, params, a_hat))
        grads = backward(tape, out)
        for name, p in params.items():
            assert p in grads, name
            assert np.any(grads[p].data != 0.0), name

    def test_frame_weight_count_checked(self):
        params = random_params(pose_param_shapes(3, 8), seed=10)
        a_hat = np.eye(4)
        poses = np.zeros((3, 4, 2))  # t_p=2 but params carry w_t.0..2
        with pytest.raises(ShapeError, match="frame weights"):
            pose_backbone_forward(poses, params, a_hat)

    def test_bad_pose_shape(self):
        params = random_params(pose_param_shapes(3, 8), seed=11)
        with pytest.raises(ShapeError, match="poses must be"):
            pose_backbone_forward(np.zeros((4, 3, 3)), params, np.eye(3))

    def test_update_running_needs_state(self):
        params = random_params(pose_param_shapes(2, 8), seed=12)
        poses = np.zeros((3, 4, 2))
        with pytest.raises(ValueError, match="bn_state"):
            pose_backbone_forward(
                poses, params, np.eye(4), training=True, update_running=True
            )


class TestRecurrentBackbone:
    def test_output_width_and_grads(self):
        j, t_p, hidden = 4, 3, 8
        params = random_params(recurrent_param_shapes(j, hidden), seed=13)
        poses = np.random.default_rng(14).normal(size=(3, j, t_p))
        with Tape() as tape:
            h_star = recurrent_backbone_forward(poses, params, hidden)
            total = sum_axis(h_star)
        assert h_star.shape == (hidden * t_p,)
        assert h_star.shape == (pose_feature_width("recurrent", j, t_p, hidden),)
        grads = backward(tape, total)
        for name, p in params.items():
            assert p in grads and np.any(grads[p].data != 0.0), name

    def test_zero_input_zero_bias_is_silent(self):
        # tanh(0) kills the candidate cell, so every step emits zero
        j, hidden = 2, 4
        shapes = recurrent_param_shapes(j, hidden)
        params = {
            name: Tensor(
                np.zeros(shape) if name.endswith(".b")
                else np.random.default_rng(15).normal(size=shape)
            )
            for name, shape in shapes.items()
        }
        out = recurrent_backbone_forward(np.zeros((3, j, 5)), params, hidden)
        np.testing.assert_array_equal(out.data, np.zeros(hidden * 5))

    def test_state_carries_across_steps(self):
        # an impulse at t=0 still influences the t=1 output
        j, hidden = 2, 3
        params = random_params(recurrent_param_shapes(j, hidden), seed=16)
        quiet = np.zeros((3, j, 2))
        loud = quiet.copy()
        loud[:, :, 0] = 1.0
        out_q = recurrent_backbone_forward(quiet, params, hidden).data
        out_l = recurrent_backbone_forward(loud, params, hidden).data
        assert np.any(out_q[hidden:] != out_l[hidden:])

    def test_bad_pose_shape(self):
        params = random_params(recurrent_param_shapes(2, 4), seed=17)
        with pytest.raises(ShapeError, match="poses must be"):
            recurrent_backbone_forward(np.zeros((2, 2, 3)), params, 4)


def test_pose_feature_width_unknown_kind():
    with pytest.raises(ValueError, match="unknown pose backbone"):
        pose_feature_width("transformer", 8, 8, 64)
