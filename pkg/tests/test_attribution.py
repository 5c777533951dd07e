import json
from dataclasses import replace

import jsonschema
import numpy as np
import pytest

from scout import numerics as nx
from scout.attribution import (
    ATTRIBUTION_SCHEMA,
    INTERACTION_GRAPH_SCHEMA,
    AttributionResult,
    export_interaction_graph,
    extract_attention,
    integrated_gradients_edges,
    no_interaction_baseline,
)
from scout.errors import IoFailure, NonDifferentiableTarget, WrongVariant
from scout.graph import adjacency_from_positions, graph_from_adjacency
from scout.layers import ModelConfig, init_params, model_forward
from scout.training import random_graph

CFG = ModelConfig(hidden_dim=12, num_heads=3, edge_dim=3, t_obs=3, t_pred=4, dropout_p=0.0, attention_dropout_p=0.0)


def linear_model(seed=0):
    """Fixed-weight model whose output is affine in the edge weights."""
    cfg = replace(CFG, variant="fixed_weight", num_heads=1, activation="linear", use_residual_connection=False)
    params = init_params(cfg, seed)
    params["layer2.W"].data[...] = 0.0
    params["layer2.W_self"].data[...] = np.eye(cfg.hidden_dim)
    return cfg, params


def linear_target(coeffs, node=0):
    def target(pred, graph):
        return nx.sum_(pred[node] * coeffs)

    return target


class TestIntegratedGradients:
    def test_baseline_equals_input(self):
        g = random_graph(np.random.default_rng(0), 4, CFG)
        params = init_params(CFG, 0)
        result = integrated_gradients_edges(g, params, CFG, baseline=g.edge_weights, n_steps=8)
        np.testing.assert_array_equal(result.ig_scores, 0.0)

    @pytest.mark.parametrize("n_steps", [1, 3, 64])
    def test_linear_oracle(self, n_steps):
        cfg, params = linear_model(1)
        rng = np.random.default_rng(1)
        g = random_graph(rng, 5, cfg)
        coeffs = rng.normal(size=(cfg.t_pred, 2))
        target = linear_target(coeffs, node=2)
        result = integrated_gradients_edges(g, params, cfg, target, baseline=np.zeros(len(g.edges)), n_steps=n_steps)

        w = nx.Tensor(g.edge_weights.copy())
        target(model_forward(g, params, cfg, edge_weights=w), g).backward()
        np.testing.assert_allclose(result.ig_scores, w.grad * g.edge_weights, atol=1e-10, rtol=0)
        assert result.completeness_gap <= 1e-10

    def test_completeness_and_refinement(self):
        params = init_params(CFG, 2)
        rng = np.random.default_rng(2)
        for _ in range(3):
            g = random_graph(rng, 5, CFG, spread=6.0)
            gaps = [integrated_gradients_edges(g, params, CFG, n_steps=n).completeness_gap for n in (32, 64, 128, 256)]
            r = integrated_gradients_edges(g, params, CFG, n_steps=256)
            assert r.completeness_gap <= 0.01 * abs(r.target_input - r.target_baseline)
            assert all(b <= a * (1 + 1e-9) + 1e-15 for a, b in zip(gaps, gaps[1:]))

    def test_default_baseline_keeps_self_loops(self):
        g = random_graph(np.random.default_rng(3), 4, CFG)
        base = no_interaction_baseline(g)
        loops = g.edges[:, 0] == g.edges[:, 1]
        np.testing.assert_array_equal(base[loops], 1.0)
        np.testing.assert_array_equal(base[~loops], 0.0)
        result = integrated_gradients_edges(g, init_params(CFG, 3), CFG, n_steps=4)
        np.testing.assert_array_equal(result.ig_scores[loops], 0.0)

    def test_non_scalar_target(self):
        g = random_graph(np.random.default_rng(4), 3, CFG)
        with pytest.raises(NonDifferentiableTarget):
            integrated_gradients_edges(g, init_params(CFG, 0), CFG, lambda pred, graph: pred, n_steps=2)

    def test_constant_target(self):
        g = random_graph(np.random.default_rng(4), 3, CFG)
        with pytest.raises(NonDifferentiableTarget):
            integrated_gradients_edges(g, init_params(CFG, 0), CFG, lambda pred, graph: 1.0, n_steps=2)

    def test_step_and_coordinate_target(self):
        from scout.attribution import displacement_target

        g = random_graph(np.random.default_rng(5), 3, CFG)
        t = displacement_target(1, step=-1, coord=0)
        pred = model_forward(g, init_params(CFG, 5), CFG)
        expected = (pred.data[1, -1, 0] - g.anchor_positions[1, 0]) ** 2
        assert float(t(pred, g).data) == pytest.approx(expected, rel=1e-14)


class TestAttention:
    def test_isolated_node(self):
        pos = np.array([[0.0, 0.0], [50.0, 0.0]])
        g = graph_from_adjacency(np.ones((2, CFG.input_dim)), adjacency_from_positions(pos), pos)
        att = extract_attention(g, init_params(CFG, 0), CFG)
        np.testing.assert_array_equal(att["layer1"], 1.0)
        np.testing.assert_array_equal(att["layer2"], 1.0)

    def test_symmetric_pair(self):
        pos = np.array([[-2.0, 0.0], [2.0, 0.0]])
        g = graph_from_adjacency(np.tile(np.arange(CFG.input_dim, dtype=float), (2, 1)), adjacency_from_positions(pos), pos)
        att = extract_attention(g, init_params(CFG, 1), CFG, directed=True)
        spatial = att["src"] != att["dst"]
        for name in ("layer1", "layer2"):
            a = att[name][spatial]
            np.testing.assert_array_equal(a[0], a[1])

    def test_matches_forward_capture(self):
        g = random_graph(np.random.default_rng(6), 5, CFG)
        params = init_params(CFG, 2)
        cap = {}
        model_forward(g, params, CFG, capture=cap)
        att = extract_attention(g, params, CFG, directed=True)
        for k, a in enumerate(cap["attention"]):
            np.testing.assert_array_equal(att[f"layer{k + 1}"], a)
            sums = np.zeros((g.num_nodes, a.shape[1]))
            np.add.at(sums, att["dst"], a)
            np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_wrong_variant(self):
        cfg = replace(CFG, variant="gated", num_heads=1)
        g = random_graph(np.random.default_rng(0), 3, cfg)
        with pytest.raises(WrongVariant):
            extract_attention(g, init_params(cfg, 0), cfg)


def fake_result(graph, scores):
    return AttributionResult(graph.edges.copy(), np.asarray(scores, float), "t", "b", 4, 1.0, 0.0, 0.0)


class TestExport:
    def test_dominant_edge_is_thickest(self, tmp_path):
        pos = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]])
        g = graph_from_adjacency(np.zeros((3, 1)), adjacency_from_positions(pos), pos)
        scores = np.zeros(len(g.edges))
        scores[1] = -5.0
        scores[0] = 0.5
        doc = export_interaction_graph(g, fake_result(g, scores), tmp_path / "g.json")
        thick = {(e["i"], e["j"]): e["thickness"] for e in doc["edges"]}
        assert max(thick, key=thick.get) == tuple(g.edges[1])

    def test_single_agent(self, tmp_path):
        pos = np.zeros((1, 2))
        g = graph_from_adjacency(np.zeros((1, 1)), adjacency_from_positions(pos), pos)
        doc = export_interaction_graph(g, fake_result(g, [0.0]), tmp_path / "g.json")
        assert len(doc["nodes"]) == 1 and doc["edges"] == []

    def test_round_trip_and_determinism(self, tmp_path):
        g = random_graph(np.random.default_rng(7), 4, CFG)
        result = integrated_gradients_edges(g, init_params(CFG, 7), CFG, n_steps=8)
        doc = export_interaction_graph(g, result, tmp_path / "a.json")
        export_interaction_graph(g, result, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        back = json.loads((tmp_path / "a.json").read_text())
        spatial = result.ig_scores[g.edges[:, 0] != g.edges[:, 1]]
        assert [e["ig_score"] for e in back["edges"]] == spatial.tolist()
        assert back == json.loads(json.dumps(doc))
        jsonschema.validate(back, INTERACTION_GRAPH_SCHEMA)
        jsonschema.validate(json.loads(result.to_json()), ATTRIBUTION_SCHEMA)

    def test_dot_output(self, tmp_path):
        g = random_graph(np.random.default_rng(8), 3, CFG)
        result = integrated_gradients_edges(g, init_params(CFG, 8), CFG, n_steps=4)
        export_interaction_graph(g, result, tmp_path / "g.dot", "dot", use="attention")
        text = (tmp_path / "g.dot").read_text()
        assert text.startswith("graph interactions {") and text.count("n0 [pos=") == 1

    def test_foreign_result(self, tmp_path):
        g = random_graph(np.random.default_rng(9), 3, CFG)
        other = random_graph(np.random.default_rng(10), 4, CFG)
        with pytest.raises(IoFailure):
            export_interaction_graph(g, fake_result(other, np.zeros(len(other.edges))), tmp_path / "x.json")
