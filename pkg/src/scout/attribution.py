"""Edge-level explanations: integrated gradients and attention read-out."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import IoFailure, NonDifferentiableTarget, WrongVariant
from .layers import model_forward

EXPORT_VERSION = 1

_NUMBER = {"type": "number"}
_NODE_ID = {"type": "integer", "minimum": 0}

# JSON Schema (draft 2020-12) of the interaction-graph export.
INTERACTION_GRAPH_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "nodes", "edges", "metadata"],
    "properties": {
        "version": {"const": EXPORT_VERSION},
        "nodes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "x", "y"],
                "properties": {"id": _NODE_ID, "x": _NUMBER, "y": _NUMBER},
            },
        },
        "edges": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["i", "j", "ig_score", "thickness"],
                "properties": {
                    "i": _NODE_ID,
                    "j": _NODE_ID,
                    "ig_score": _NUMBER,
                    "thickness": {"type": "number", "minimum": 0},
                    "attention": {"type": "object", "additionalProperties": {"type": "array", "items": _NUMBER}},
                },
            },
        },
        "metadata": {
            "type": "object",
            "required": ["target", "baseline", "n_steps", "completeness_gap", "score_source"],
            "properties": {
                "target": {"type": "string"},
                "baseline": {"type": "string"},
                "n_steps": {"type": "integer", "minimum": 1},
                "completeness_gap": {"type": "number", "minimum": 0},
                "score_source": {"enum": ["ig", "attention"]},
            },
        },
    },
}

# JSON Schema of ``AttributionResult.to_dict``.
ATTRIBUTION_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": [
        "edges", "ig_scores", "target", "baseline_spec", "n_steps",
        "target_input", "target_baseline", "completeness_gap", "attention",
    ],
    "properties": {
        "edges": {"type": "array", "items": {"type": "array", "items": _NODE_ID, "minItems": 2, "maxItems": 2}},
        "ig_scores": {"type": "array", "items": _NUMBER},
        "target": {"type": "string"},
        "baseline_spec": {"type": "string"},
        "n_steps": {"type": "integer", "minimum": 1},
        "target_input": _NUMBER,
        "target_baseline": _NUMBER,
        "completeness_gap": {"type": "number", "minimum": 0},
        "attention": {"type": "object"},
    },
}


@dataclass
class AttributionResult:
    """Per-edge scores for one scalar target.

    ``edges`` is the graph's undirected edge list (self-loops included);
    ``attention`` maps a layer name to an (E, heads) array of attention
    weights averaged over the two directions of each edge, or is empty.
    """

    edges: np.ndarray
    ig_scores: np.ndarray
    target: str
    baseline_spec: str
    n_steps: int
    target_input: float
    target_baseline: float
    completeness_gap: float
    attention: dict = field(default_factory=dict)

    @property
    def relative_gap(self):
        delta = abs(self.target_input - self.target_baseline)
        return self.completeness_gap / delta if delta > 0 else self.completeness_gap

    def to_dict(self):
        return {
            "edges": self.edges.tolist(),
            "ig_scores": self.ig_scores.tolist(),
            "target": self.target,
            "baseline_spec": self.baseline_spec,
            "n_steps": self.n_steps,
            "target_input": self.target_input,
            "target_baseline": self.target_baseline,
            "completeness_gap": self.completeness_gap,
            "attention": {k: v.tolist() for k, v in self.attention.items()},
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def no_interaction_baseline(graph):
    """Spatial edge weights zeroed, self-loops kept at 1."""
    edges = np.asarray(graph.edges)
    return np.where(edges[:, 0] == edges[:, 1], 1.0, 0.0)


def displacement_target(node, step=None, coord=None):
    """Summed squared predicted displacement of ``node`` from its anchor.

    ``step``/``coord`` restrict the sum to one timestep and/or coordinate.
    """

    def target(pred, graph):
        anchor = np.asarray(graph.anchor_positions)[node]
        d = pred[node] - anchor[None, :]
        if step is not None:
            d = d[step]
        if coord is not None:
            d = d[..., coord]
        return nx.sum_(d * d)

    target.label = f"squared displacement, node {node}" + (f", step {step}" if step is not None else "") + (
        f", coord {coord}" if coord is not None else ""
    )
    return target


def _evaluate(graph, params, config, target_fn, weights):
    w = nx.Tensor(np.asarray(weights, dtype=float))
    out = target_fn(model_forward(graph, params, config, edge_weights=w), graph)
    if not isinstance(out, nx.Tensor) or out.data.size != 1:
        raise NonDifferentiableTarget("target must return a scalar Tensor built from the model output")
    if not np.isfinite(out.data).all():
        raise NonDifferentiableTarget("target is not finite")
    return out, w


def integrated_gradients_edges(graph, params, config, target_fn=None, baseline=None, n_steps=128, node=0):
    """Integrated gradients of ``target_fn`` with respect to the edge weights.

    The straight path from ``baseline`` to the graph's weights is integrated
    with the midpoint rule at ``n_steps`` points. ``target_fn(pred, graph)``
    must return a scalar Tensor; the default is the squared displacement of
    ``node``. Dropout is never applied.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    target_fn = displacement_target(node) if target_fn is None else target_fn
    x = np.asarray(graph.edge_weights, dtype=float)
    if baseline is None:
        base, base_spec = no_interaction_baseline(graph), "spatial edges 0, self-loops 1"
    else:
        base, base_spec = np.asarray(baseline, dtype=float), "user supplied"
    if base.shape != x.shape:
        raise NonDifferentiableTarget(f"baseline shape {base.shape} does not match edge weights {x.shape}")

    total = np.zeros_like(x)
    diff = x - base
    for k in range(n_steps):
        out, w = _evaluate(graph, params, config, target_fn, base + (k + 0.5) / n_steps * diff)
        out.backward()
        if w.grad is None or not np.isfinite(w.grad).all():
            raise NonDifferentiableTarget("target has no finite gradient with respect to edge weights")
        total += w.grad
    scores = diff * total / n_steps

    t_in = float(_evaluate(graph, params, config, target_fn, x)[0].data)
    t_base = float(_evaluate(graph, params, config, target_fn, base)[0].data)
    attention = {}
    if config.variant == "attention":
        attention = extract_attention(graph, params, config)
    return AttributionResult(
        edges=np.asarray(graph.edges).copy(),
        ig_scores=scores,
        target=getattr(target_fn, "label", getattr(target_fn, "__name__", "custom")),
        baseline_spec=base_spec,
        n_steps=n_steps,
        target_input=t_in,
        target_baseline=t_base,
        completeness_gap=abs(float(scores.sum()) - (t_in - t_base)),
        attention=attention,
    )


def extract_attention(graph, params, config, directed=False):
    """Attention weights from one dropout-free forward pass.

    Returns ``{"layer1": (E, heads), "layer2": ...}`` over undirected edges,
    averaging the two directions of a spatial edge. With ``directed=True``
    the raw per-directed-edge arrays are returned together with ``src`` and
    ``dst`` (each destination's incoming weights sum to 1 per head).
    """
    if config.variant != "attention":
        raise WrongVariant(f"attention weights exist only for the attention variant, not {config.variant!r}")
    capture = {}
    model_forward(graph, params, config, capture=capture)
    layers = {f"layer{k + 1}": a for k, a in enumerate(capture["attention"])}
    if directed:
        return {**layers, "src": capture["src"], "dst": capture["dst"]}
    index = capture["edge_index"]
    count = np.bincount(index, minlength=len(graph.edges)).astype(float)[:, None]
    out = {}
    for name, a in layers.items():
        acc = np.zeros((len(graph.edges), a.shape[1]))
        np.add.at(acc, index, a)
        out[name] = acc / count
    return out


def _edge_scores(result, use):
    if use == "ig":
        return np.abs(result.ig_scores)
    if use == "attention":
        if not result.attention:
            raise IoFailure("result carries no attention weights")
        last = result.attention[sorted(result.attention)[-1]]
        return last.mean(axis=1)
    raise ValueError(f"unknown score source {use!r}")


def interaction_graph(graph, result, use="ig", include_self_loops=False, max_thickness=8.0):
    """Plain-dict interaction graph: nodes at anchor positions, edges with scores and thickness."""
    edges = np.asarray(graph.edges)
    if result.edges.shape != edges.shape or not np.array_equal(result.edges, edges):
        raise IoFailure("attribution result does not belong to this graph")
    mag = _edge_scores(result, use)
    keep = np.ones(len(edges), bool) if include_self_loops else edges[:, 0] != edges[:, 1]
    top = mag[keep].max() if keep.any() else 0.0
    out_edges = []
    for k in np.flatnonzero(keep):
        thickness = max_thickness * mag[k] / top if top > 0 else 0.0
        item = {
            "i": int(edges[k, 0]),
            "j": int(edges[k, 1]),
            "ig_score": float(result.ig_scores[k]),
            "thickness": float(thickness),
        }
        if result.attention:
            item["attention"] = {name: [float(v) for v in a[k]] for name, a in sorted(result.attention.items())}
        out_edges.append(item)
    nodes = [{"id": i, "x": float(p[0]), "y": float(p[1])} for i, p in enumerate(np.asarray(graph.anchor_positions))]
    return {
        "version": EXPORT_VERSION,
        "nodes": nodes,
        "edges": out_edges,
        "metadata": {
            "target": result.target,
            "baseline": result.baseline_spec,
            "n_steps": result.n_steps,
            "completeness_gap": result.completeness_gap,
            "score_source": use,
        },
    }


def _to_dot(doc):
    lines = ["graph interactions {", "  node [shape=circle];"]
    for n in doc["nodes"]:
        lines.append(f'  n{n["id"]} [pos="{n["x"]:.4f},{n["y"]:.4f}!"];')
    for e in doc["edges"]:
        lines.append(f'  n{e["i"]} -- n{e["j"]} [penwidth={e["thickness"]:.4f}, label="{e["ig_score"]:.4g}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_interaction_graph(graph, result, path, fmt="json", use="ig"):
    """Write the interaction graph as JSON or Graphviz text; output bytes are deterministic."""
    doc = interaction_graph(graph, result, use)
    if fmt == "json":
        text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    elif fmt == "dot":
        text = _to_dot(doc)
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return doc


def attribute_scene(sample, params, config, node=0, n_steps=128):
    """Convenience wrapper: build the scene graph and run IG for ``node``."""
    from .training import sample_graph

    graph = sample_graph(sample, config)
    return graph, integrated_gradients_edges(graph, params, config, n_steps=n_steps, node=node)


__all__ = [
    "ATTRIBUTION_SCHEMA",
    "AttributionResult",
    "INTERACTION_GRAPH_SCHEMA",
    "attribute_scene",
    "displacement_target",
    "export_interaction_graph",
    "extract_attention",
    "integrated_gradients_edges",
    "interaction_graph",
    "no_interaction_baseline",
]
