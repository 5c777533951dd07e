"""Scene graphs built at the last observed frame.

Each agent is a node whose features are its flattened observation history.
Spatial edges join agents within ``radius`` meters; every node carries a
self-loop. Weights are either binary or the inverse pairwise distance.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import CoincidentAgents, IsolatedNodeDegreeZero

DEFAULT_RADIUS = 20.0
MIN_DISTANCE = 0.1  # meters; kernel weights are capped at 1 / MIN_DISTANCE


@dataclass(frozen=True)
class SceneGraph:
    """Node features, dense adjacency and the undirected edge list.

    ``edges`` is an (E, 2) int array of (i, j) with i <= j: spatial pairs with
    i < j, followed by one self-loop (i, i) per node. ``edge_weights`` holds the
    matching adjacency entries.
    """

    node_features: np.ndarray  # (N, T_obs * C)
    adjacency: np.ndarray  # (N, N)
    edges: np.ndarray  # (E, 2)
    edge_weights: np.ndarray  # (E,)
    anchor_positions: np.ndarray  # (N, 2)
    mode: str = "kernel"
    radius: float = DEFAULT_RADIUS

    @property
    def num_nodes(self):
        return self.node_features.shape[0]

    @property
    def spatial_pairs(self):
        return self.edges[self.edges[:, 0] != self.edges[:, 1]]

    def to_json(self):
        return json.dumps(
            {
                "mode": self.mode,
                "radius": self.radius,
                "nodes": [{"id": i, "x": float(p[0]), "y": float(p[1])} for i, p in enumerate(self.anchor_positions)],
                "edges": [
                    {"i": int(i), "j": int(j), "weight": float(w)}
                    for (i, j), w in zip(self.edges, self.edge_weights)
                ],
            },
            sort_keys=True,
        )


def build_node_features(sample):
    """Flatten each agent's (T_obs, C) history time-major into one row."""
    obs = np.where(sample.presence_mask[..., None], sample.obs, 0.0)
    return obs.reshape(obs.shape[0], -1)


def pairwise_distances(positions):
    diff = positions[:, None, :] - positions[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def adjacency_from_positions(positions, mode="kernel", radius=DEFAULT_RADIUS, on_coincident="clamp"):
    positions = np.asarray(positions, dtype=float)
    if not np.isfinite(positions).all():
        raise ValueError("anchor positions must be finite")
    if mode not in ("binary", "kernel"):
        raise ValueError(f"unknown adjacency mode {mode!r}")
    n = positions.shape[0]
    dist = pairwise_distances(positions)
    offdiag = ~np.eye(n, dtype=bool)
    linked = (dist <= radius) & offdiag
    if mode == "binary":
        adj = linked.astype(float)
    else:
        close = linked & (dist < MIN_DISTANCE)
        if close.any() and on_coincident == "raise":
            i, j = np.argwhere(close)[0]
            raise CoincidentAgents(f"agents {i} and {j} are {dist[i, j]:.3g} m apart")
        adj = np.where(linked, 1.0 / np.maximum(dist, MIN_DISTANCE), 0.0)
    np.fill_diagonal(adj, 1.0)
    return adj


def build_adjacency(sample, mode="kernel", radius=DEFAULT_RADIUS, on_coincident="clamp"):
    """Scene graph for a (normalized) sample."""
    positions = np.asarray(sample.anchor_positions, dtype=float)
    adj = adjacency_from_positions(positions, mode, radius, on_coincident)
    return graph_from_adjacency(build_node_features(sample), adj, positions, mode, radius)


def graph_from_adjacency(node_features, adjacency, anchor_positions, mode="kernel", radius=DEFAULT_RADIUS):
    n = adjacency.shape[0]
    iu, ju = np.nonzero(np.triu(adjacency, k=1) > 0)
    diag = np.arange(n)
    edges = np.concatenate([np.stack([iu, ju], 1), np.stack([diag, diag], 1)]).astype(np.int64)
    return SceneGraph(
        node_features=np.asarray(node_features, dtype=float),
        adjacency=adjacency,
        edges=edges,
        edge_weights=adjacency[edges[:, 0], edges[:, 1]].copy(),
        anchor_positions=np.asarray(anchor_positions, dtype=float),
        mode=mode,
        radius=radius,
    )


def degree_normalize(adjacency):
    """Symmetric normalization D^-1/2 A D^-1/2 (A already carries self-loops)."""
    adjacency = np.asarray(adjacency, dtype=float)
    deg = adjacency.sum(axis=1)
    if (deg <= 0).any():
        raise IsolatedNodeDegreeZero(f"node {int(np.argmin(deg))} has zero degree")
    inv = 1.0 / np.sqrt(deg)
    return adjacency * inv[:, None] * inv[None, :]


def permute_graph(graph, perm):
    """Relabel nodes so that new node k is old node ``perm[k]``."""
    perm = np.asarray(perm)
    adj = graph.adjacency[np.ix_(perm, perm)]
    return graph_from_adjacency(graph.node_features[perm], adj, graph.anchor_positions[perm], graph.mode, graph.radius)


@dataclass(frozen=True)
class GraphBatch:
    """Block-diagonal union of scene graphs with directed edge arrays.

    Directed edges run ``src -> dst``; every undirected pair appears in both
    directions and each self-loop once. ``edge_index`` maps each directed edge
    to its undirected edge so gradients w.r.t. undirected weights sum over
    both directions.
    """

    node_features: np.ndarray
    anchor_positions: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_index: np.ndarray
    edges: np.ndarray  # undirected, global node ids
    edge_weights: np.ndarray  # undirected
    node_ptr: np.ndarray  # (S+1,) scene offsets into nodes
    edge_ptr: np.ndarray  # (S+1,) scene offsets into undirected edges

    @property
    def num_nodes(self):
        return self.node_features.shape[0]

    @property
    def num_scenes(self):
        return len(self.node_ptr) - 1

    @property
    def scene_of_node(self):
        return np.repeat(np.arange(self.num_scenes), np.diff(self.node_ptr))

    @property
    def is_self_loop(self):
        return self.src == self.dst

    @property
    def in_degree(self):
        """Structural neighbourhood size |N(i)|, self-loop included."""
        return np.bincount(self.dst, minlength=self.num_nodes)


def batch_graphs(graphs):
    if isinstance(graphs, SceneGraph):
        graphs = [graphs]
    feats, anchors, und, weights = [], [], [], []
    node_ptr, edge_ptr = [0], [0]
    for g in graphs:
        und.append(g.edges + node_ptr[-1])
        weights.append(g.edge_weights)
        feats.append(g.node_features)
        anchors.append(g.anchor_positions)
        node_ptr.append(node_ptr[-1] + g.num_nodes)
        edge_ptr.append(edge_ptr[-1] + len(g.edges))
    edges = np.concatenate(und)
    spatial = np.nonzero(edges[:, 0] != edges[:, 1])[0]
    loops = np.nonzero(edges[:, 0] == edges[:, 1])[0]
    edge_index = np.concatenate([spatial, spatial, loops])
    src = np.concatenate([edges[spatial, 0], edges[spatial, 1], edges[loops, 0]])
    dst = np.concatenate([edges[spatial, 1], edges[spatial, 0], edges[loops, 1]])
    return GraphBatch(
        node_features=np.concatenate(feats),
        anchor_positions=np.concatenate(anchors),
        src=src,
        dst=dst,
        edge_index=edge_index,
        edges=edges,
        edge_weights=np.concatenate(weights),
        node_ptr=np.array(node_ptr),
        edge_ptr=np.array(edge_ptr),
    )
