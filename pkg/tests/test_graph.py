import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scout.data import AgentTrack, AgentType, normalize_sample, window_sequences
from scout.errors import CoincidentAgents, IsolatedNodeDegreeZero
from scout.graph import (
    adjacency_from_positions,
    batch_graphs,
    build_adjacency,
    build_node_features,
    degree_normalize,
    graph_from_adjacency,
    permute_graph,
)
from scout.synthetic import make_samples


def static_sample(positions, t_obs=8):
    tracks = [
        AgentTrack("r", k, AgentType.VEHICLE, np.arange(t_obs + 1), np.tile(p, (t_obs + 1, 1)), np.zeros(t_obs + 1))
        for k, p in enumerate(positions)
    ]
    return window_sequences(tracks, t_obs, 1, 1)[0]


class TestNodeFeatures:
    def test_shape(self):
        assert build_node_features(static_sample([[0, 0], [3, 0]])).shape == (2, 48)

    def test_single_frame_history(self):
        s = static_sample([[1.0, 2.0]], t_obs=1)
        np.testing.assert_array_equal(build_node_features(s)[0], s.obs[0, 0])

    def test_padded_prefix_is_zero(self):
        tracks = [
            AgentTrack("r", 0, AgentType.VEHICLE, np.arange(9), np.ones((9, 2)), np.zeros(9)),
            AgentTrack("r", 1, AgentType.PEDESTRIAN, np.arange(4, 9), np.ones((5, 2)), np.zeros(5)),
        ]
        feats = build_node_features(window_sequences(tracks, 8, 1, 1)[0])
        assert (feats[1, : 4 * 6] == 0).all()
        assert (feats[1, 4 * 6 :] != 0).any()


class TestAdjacency:
    def test_kernel_at_four_meters(self):
        adj = adjacency_from_positions([[0, 0], [4, 0]], "kernel")
        assert adj[0, 1] == 0.25 and adj[1, 0] == 0.25
        np.testing.assert_array_equal(np.diag(adj), [1, 1])

    @pytest.mark.parametrize("mode", ["binary", "kernel"])
    def test_outside_radius(self, mode):
        adj = adjacency_from_positions([[0, 0], [25, 0]], mode)
        assert adj[0, 1] == 0 and adj[1, 0] == 0

    def test_single_agent(self):
        np.testing.assert_array_equal(adjacency_from_positions([[3, 4]]), [[1.0]])

    def test_coincident_clamped(self):
        adj = adjacency_from_positions([[0, 0], [0, 0]])
        assert adj[0, 1] == 10.0
        with pytest.raises(CoincidentAgents):
            adjacency_from_positions([[0, 0], [0.05, 0]], on_coincident="raise")

    def test_closer_means_heavier(self):
        adj = adjacency_from_positions([[0, 0], [2, 0], [5, 0]])
        assert adj[0, 1] > adj[0, 2]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**16), st.integers(1, 9))
    def test_modes_share_sparsity_and_symmetry(self, seed, n):
        pos = np.random.default_rng(seed).uniform(-30, 30, size=(n, 2))
        kernel = adjacency_from_positions(pos, "kernel")
        binary = adjacency_from_positions(pos, "binary")
        np.testing.assert_array_equal(kernel > 0, binary > 0)
        np.testing.assert_array_equal(kernel, kernel.T)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**16), st.integers(2, 9))
    def test_permutation_consistency(self, seed, n):
        rng = np.random.default_rng(seed)
        pos = rng.uniform(-30, 30, size=(n, 2))
        perm = rng.permutation(n)
        adj = adjacency_from_positions(pos)
        np.testing.assert_array_equal(adjacency_from_positions(pos[perm]), adj[np.ix_(perm, perm)])


class TestDegreeNormalize:
    def test_identity(self):
        np.testing.assert_array_equal(degree_normalize([[1.0]]), [[1.0]])

    def test_two_node_complete(self):
        np.testing.assert_allclose(degree_normalize(np.ones((2, 2))), np.full((2, 2), 0.5))

    def test_symmetric(self):
        a = np.random.default_rng(0).random((5, 5))
        a = a + a.T
        out = degree_normalize(a)
        np.testing.assert_allclose(out, out.T, rtol=0, atol=1e-15)

    def test_zero_degree(self):
        with pytest.raises(IsolatedNodeDegreeZero):
            degree_normalize(np.zeros((2, 2)))


class TestSceneGraph:
    def test_edges_layout(self):
        g = build_adjacency(static_sample([[0, 0], [4, 0], [50, 0]]))
        np.testing.assert_array_equal(g.edges, [[0, 1], [0, 0], [1, 1], [2, 2]])
        np.testing.assert_array_equal(g.edge_weights, [0.25, 1, 1, 1])
        assert g.spatial_pairs.tolist() == [[0, 1]]

    def test_weights_unchanged_by_normalization(self):
        raw = static_sample([[100, 7], [103, 11]])
        a = build_adjacency(raw).edge_weights
        b = build_adjacency(normalize_sample(raw)).edge_weights
        np.testing.assert_allclose(a, b, rtol=1e-14)

    def test_permute_graph(self):
        g = build_adjacency(make_samples(1, seed=3)[0])
        perm = np.arange(g.num_nodes)[::-1]
        p = permute_graph(g, perm)
        np.testing.assert_array_equal(p.node_features, g.node_features[perm])
        np.testing.assert_array_equal(p.adjacency, g.adjacency[np.ix_(perm, perm)])


class TestBatch:
    def test_block_diagonal(self):
        graphs = [build_adjacency(s) for s in make_samples(3, seed=5)]
        b = batch_graphs(graphs)
        assert b.num_scenes == 3
        assert b.num_nodes == sum(g.num_nodes for g in graphs)
        scene = b.scene_of_node
        np.testing.assert_array_equal(scene[b.src], scene[b.dst])
        # each spatial pair appears in both directions, each self-loop once
        spatial = sum(len(g.spatial_pairs) for g in graphs)
        assert len(b.src) == 2 * spatial + b.num_nodes
        np.testing.assert_array_equal(b.edge_weights[b.edge_index], np.concatenate(
            [b.edge_weights[b.edges[:, 0] != b.edges[:, 1]]] * 2 + [b.edge_weights[b.edges[:, 0] == b.edges[:, 1]]]
        ))

    def test_in_degree_counts_self_loop(self):
        g = graph_from_adjacency(np.zeros((3, 2)), adjacency_from_positions([[0, 0], [1, 0], [90, 0]], "binary"), np.zeros((3, 2)))
        np.testing.assert_array_equal(batch_graphs(g).in_degree, [2, 2, 1])
