"""The forecaster: embedding, two graph layers, per-node prediction head.

Graph layers operate on directed edge lists (``GraphBatch``): messages flow
``src -> dst`` and every node receives its own self-loop. Four aggregation
variants are available:

``gcn``           isotropic symmetric-normalized convolution (baseline)
``fixed_weight``  neighbours scaled by fixed inverse-distance weights
``attention``     learned multi-head attention over incoming edges
``gated``         edge-gated aggregation with evolving edge features
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeMismatch
from .graph import GraphBatch, batch_graphs

VARIANTS = ("fixed_weight", "attention", "gated", "gcn")
OUTPUT_MODES = ("positions", "velocities")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "attention"
    hidden_dim: int = 48
    num_heads: int = 3
    edge_dim: int = 8
    use_residual_connection: bool = True
    use_residual_weight: bool = True
    use_final_fc: bool = True
    dropout_p: float = 0.25
    attention_dropout_p: float = 0.6
    output_mode: str = "positions"
    t_obs: int = 8
    num_features: int = 6
    t_pred: int = 12
    activation: str = "relu"
    leaky_slope: float = 0.2
    last_layer_heads: str = "mean"  # "mean" or "concat"
    adjacency_mode: str = "kernel"
    radius: float = 20.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.output_mode not in OUTPUT_MODES:
            raise ConfigError(f"output_mode must be one of {OUTPUT_MODES}")
        if self.activation not in nx.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.last_layer_heads not in ("mean", "concat"):
            raise ConfigError("last_layer_heads must be 'mean' or 'concat'")
        if self.hidden_dim < 1 or self.num_heads < 1 or self.t_pred < 1 or self.t_obs < 1:
            raise ConfigError("dimensions must be positive")
        if self.variant == "attention":
            if self.hidden_dim % self.num_heads:
                raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by {self.num_heads} heads")
        elif self.num_heads != 1:
            raise ConfigError(f"num_heads must be 1 for variant {self.variant!r}")
        for p in (self.dropout_p, self.attention_dropout_p):
            if not 0.0 <= p < 1.0:
                raise ConfigError("dropout probabilities must be in [0, 1)")

    @property
    def input_dim(self):
        return self.t_obs * self.num_features

    def to_dict(self):
        return asdict(self)


class ModelParams:
    """Ordered, named collection of :class:`~scout.numerics.Param`."""

    def __init__(self, params):
        self._params = {}
        for p in params:
            if p.name in self._params:
                raise ValueError(f"duplicate param name {p.name!r}")
            self._params[p.name] = p

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    @property
    def names(self):
        return list(self._params)

    def get(self, name):
        return self._params.get(name)

    def zero_grad(self):
        for p in self:
            p.zero_grad()

    def copy(self):
        return ModelParams([nx.Param(p.data.copy(), p.name) for p in self])

    def state(self):
        return {p.name: p.data.copy() for p in self}


def param_shapes(cfg):
    """Name -> (shape, fan_in) for every learnable tensor; fan_in None means zero init."""
    d, de = cfg.hidden_dim, cfg.edge_dim
    shapes = {"embed.W": ((cfg.input_dim, d), cfg.input_dim), "embed.b": ((d,), None)}
    if cfg.variant in ("attention", "gated"):
        width = de if cfg.variant == "attention" else d
        shapes["embed.edge_W"] = ((1, width), 1)
        shapes["embed.edge_b"] = ((width,), None)
    for layer in (1, 2):
        pre = f"layer{layer}."
        if cfg.variant == "gated":
            for m in "ABCDE":
                shapes[pre + m] = ((d, d), d)
            continue
        if cfg.variant == "attention":
            heads, head_dim = _head_layout(cfg, layer)
            shapes[pre + "W"] = ((d, heads * head_dim), d)
            shapes[pre + "a"] = ((heads, 2 * head_dim + de), 2 * head_dim + de)
        else:
            shapes[pre + "W"] = ((d, d), d)
        if cfg.use_residual_weight:
            shapes[pre + "W_self"] = ((d, d), d)
    out = cfg.t_pred * 2
    if cfg.use_final_fc:
        shapes["head.W1"] = ((d, d), d)
        shapes["head.b1"] = ((d,), None)
    shapes["head.W2"] = ((d, out), d)
    shapes["head.b2"] = ((out,), None)
    return shapes


def _head_layout(cfg, layer):
    """(heads, per-head width) so that merged output width equals hidden_dim."""
    k = cfg.num_heads
    if layer == 2 and cfg.last_layer_heads == "mean":
        return k, cfg.hidden_dim
    return k, cfg.hidden_dim // k


def init_params(cfg, seed=0):
    """Kaiming-normal weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = []
    for name, (shape, fan_in) in param_shapes(cfg).items():
        if fan_in is None:
            params.append(nx.Param(np.zeros(shape), name))
        else:
            params.append(nx.kaiming_init(shape, fan_in, rng, name))
    return ModelParams(params)


def check_params(params, cfg):
    expected = param_shapes(cfg)
    if set(params.names) != set(expected):
        raise ShapeMismatch(f"params {sorted(params.names)} do not match config {sorted(expected)}")
    for name, (shape, _) in expected.items():
        if params[name].shape != tuple(shape):
            raise ShapeMismatch(f"param {name}: shape {params[name].shape} != {tuple(shape)}")
        if not np.isfinite(params[name].data).all():
            raise ShapeMismatch(f"param {name} has non-finite entries")


# ---------------------------------------------------------------- layers

def embed(node_features, edge_weights, params, activation=nx.relu):
    """Per-node linear + activation; edge scalars lifted to vectors when the variant uses them."""
    x = nx.as_tensor(node_features)
    w = params["embed.W"]
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"embed: node features {x.shape} vs weight {w.shape}")
    node_h = activation(nx.linear(x, w, params["embed.b"]))
    edge_h = None
    if "embed.edge_W" in params:
        e = nx.reshape(nx.as_tensor(edge_weights), (-1, 1))
        edge_h = activation(nx.linear(e, params["embed.edge_W"], params["embed.edge_b"]))
    return node_h, edge_h


def gcn_layer(h, a_norm, weight, activation=nx.relu):
    """Dense isotropic convolution sigma(A_norm H W)."""
    h = nx.as_tensor(h)
    a_norm = nx.as_tensor(a_norm)
    if a_norm.shape != (h.shape[0], h.shape[0]):
        raise ShapeMismatch(f"gcn_layer: adjacency {a_norm.shape} for {h.shape[0]} nodes")
    return activation(nx.matmul(a_norm, nx.matmul(h, weight)))


def gcn_edge_layer(h, graph, w_dir, weight, self_weight=None, activation=nx.relu):
    """Edge-list form of :func:`gcn_layer` with degrees taken from the weights."""
    n = graph.num_nodes
    deg = nx.segment_sum(w_dir, graph.dst, n)
    inv_sqrt = nx.power(deg, -0.5)
    coef = w_dir * nx.gather_rows(inv_sqrt, graph.src) * nx.gather_rows(inv_sqrt, graph.dst)
    hw = nx.matmul(h, weight)
    msg = nx.gather_rows(hw, graph.src) * nx.reshape(coef, (-1, 1))
    agg = nx.segment_sum(msg, graph.dst, n)
    if self_weight is not None:
        agg = agg + nx.matmul(h, self_weight)
    return activation(agg)


def fixed_weight_layer(h, graph, w_dir, weight, self_weight=None, activation=nx.relu):
    """Neighbours weighted by fixed kernel scores e_ij / (c_ij + 1).

    ``c_ij = sqrt(|N(i)|) sqrt(|N(j)|)`` counts structural neighbours. With a
    residual weight the ego node is excluded from the neighbour sum and enters
    through its own matrix instead.
    """
    n = graph.num_nodes
    deg = graph.in_degree.astype(float)
    c = np.sqrt(deg[graph.src] * deg[graph.dst])
    scale = 1.0 / (c + 1.0)
    if self_weight is not None:
        scale = np.where(graph.is_self_loop, 0.0, scale)
    coef = nx.as_tensor(w_dir) * scale
    msg = nx.gather_rows(nx.matmul(h, weight), graph.src) * nx.reshape(coef, (-1, 1))
    agg = nx.segment_sum(msg, graph.dst, n)
    if self_weight is not None:
        agg = agg + nx.matmul(h, self_weight)
    return activation(agg)


def attention_layer(
    h,
    edge_h,
    graph,
    weight,
    attn,
    heads,
    merge="concat",
    self_weight=None,
    activation=nx.relu,
    slope=0.2,
    attention_dropout=0.0,
    training=False,
    rng=None,
    capture=None,
):
    """Multi-head attention over each node's incoming edges.

    Per head the unnormalized score of edge j -> i is
    ``LeakyReLU(a . [W h_i || W h_j || e_ij])``; scores are softmax-normalized
    over the incoming edges of i and weight the messages ``W h_j``.
    """
    n = graph.num_nodes
    hw = nx.matmul(h, weight)
    head_dim = hw.shape[1] // heads
    if hw.shape[1] != heads * head_dim or attn.shape != (heads, 2 * head_dim + edge_h.shape[1]):
        raise ShapeMismatch(f"attention_layer: W {weight.shape}, a {attn.shape}, {heads} heads")
    hw3 = nx.reshape(hw, (n, heads, head_dim))
    a_dst = nx.reshape(attn[:, :head_dim], (1, heads, head_dim))
    a_src = nx.reshape(attn[:, head_dim : 2 * head_dim], (1, heads, head_dim))
    a_edge = attn[:, 2 * head_dim :]
    s_dst = nx.sum_(hw3 * a_dst, axis=2)  # (N, H)
    s_src = nx.sum_(hw3 * a_src, axis=2)
    s_edge = nx.matmul(edge_h, nx.transpose(a_edge))
    scores = nx.leaky_relu(nx.gather_rows(s_dst, graph.dst) + nx.gather_rows(s_src, graph.src) + s_edge, slope)
    alpha = nx.segment_softmax(scores, graph.dst, n)  # (E, H)
    if capture is not None:
        capture.append(alpha.data.copy())
    alpha_used = nx.dropout(alpha, attention_dropout, training, rng)
    msg = nx.gather_rows(hw3, graph.src) * nx.reshape(alpha_used, (-1, heads, 1))
    agg = nx.segment_sum(msg, graph.dst, n)  # (N, H, head_dim)
    if merge == "mean":
        agg = nx.mean(agg, axis=1)
    else:
        agg = nx.reshape(agg, (n, heads * head_dim))
    if self_weight is not None:
        agg = agg + nx.matmul(h, self_weight)
    return activation(agg)


def gated_layer(h, edge_h, graph, A, B, C, D, E, residual=True, activation=nx.relu, capture=None):
    """Edge-gated update; returns new node and edge features.

    Gates are sigmoids of the incoming edge features normalized per
    coordinate over each node's incoming edges. Node update:
    ``h_i + act(A h_i + sum_j gate_ij * B h_j)``; edge update:
    ``e_ij + relu(C e_ij + D h_j + E h_i)``.
    """
    n = graph.num_nodes
    h, edge_h = nx.as_tensor(h), nx.as_tensor(edge_h)
    if edge_h.shape != (len(graph.src), h.shape[1]):
        raise ShapeMismatch(f"gated_layer: edge features {edge_h.shape} for {len(graph.src)} edges, width {h.shape[1]}")
    sig = nx.sigmoid(edge_h)
    denom = nx.segment_sum(sig, graph.dst, n)
    gate = sig / nx.gather_rows(denom, graph.dst)
    if capture is not None:
        capture.append(gate.data.copy())
    msg = gate * nx.gather_rows(nx.matmul(h, B), graph.src)
    update = activation(nx.matmul(h, A) + nx.segment_sum(msg, graph.dst, n))
    h_new = h + update if residual else update
    e_new = edge_h + nx.relu(
        nx.matmul(edge_h, C) + nx.gather_rows(nx.matmul(h, D), graph.src) + nx.gather_rows(nx.matmul(h, E), graph.dst)
    )
    return h_new, e_new


def feed_forward_head(h, params, t_pred, activation=nx.relu):
    """Map each node independently to (t_pred, 2) outputs."""
    n = h.shape[0]
    if "head.W1" in params:
        h = activation(nx.linear(h, params["head.W1"], params["head.b1"]))
    w2 = params["head.W2"]
    if h.shape[1] != w2.shape[0] or w2.shape[1] != 2 * t_pred:
        raise ShapeMismatch(f"feed_forward_head: input {h.shape} vs weight {w2.shape}")
    return nx.reshape(nx.linear(h, w2, params["head.b2"]), (n, t_pred, 2))


# ---------------------------------------------------------------- full model

def model_forward(graph, params, config, training=False, rng=None, edge_weights=None, capture=None):
    """Predicted positions (N, T_pred, 2) in the sample's normalized frame.

    ``edge_weights`` overrides the graph's undirected edge weights (used for
    attributions; pass a Tensor to receive gradients). ``capture``, if a
    dict, receives per-layer attention weights or gates (E_directed, ...).
    """
    batch = graph if isinstance(graph, GraphBatch) else batch_graphs(graph)
    cfg = config
    if training and rng is None:
        raise ValueError("training mode needs an rng for dropout")
    act = nx.ACTIVATIONS[cfg.activation]
    w_und = nx.as_tensor(batch.edge_weights if edge_weights is None else edge_weights)
    if w_und.shape != (len(batch.edges),):
        raise ShapeMismatch(f"edge weights {w_und.shape} for {len(batch.edges)} edges")
    w_dir = nx.gather_rows(w_und, batch.edge_index)

    h, edge_h = embed(batch.node_features, w_dir, params, act)
    h = nx.dropout(h, cfg.dropout_p, training, rng)
    if capture is not None:
        capture.setdefault("attention", [])
        capture.setdefault("gates", [])
        capture["src"], capture["dst"], capture["edge_index"] = batch.src, batch.dst, batch.edge_index

    for layer in (1, 2):
        pre = f"layer{layer}."
        self_w = params.get(pre + "W_self")
        if cfg.variant == "gated":
            h, edge_h = gated_layer(
                h,
                edge_h,
                batch,
                *(params[pre + m] for m in "ABCDE"),
                residual=cfg.use_residual_connection,
                activation=act,
                capture=None if capture is None else capture["gates"],
            )
        else:
            if cfg.variant == "gcn":
                out = gcn_edge_layer(h, batch, w_dir, params[pre + "W"], self_w, act)
            elif cfg.variant == "fixed_weight":
                out = fixed_weight_layer(h, batch, w_dir, params[pre + "W"], self_w, act)
            else:
                heads, _ = _head_layout(cfg, layer)
                merge = "mean" if layer == 2 and cfg.last_layer_heads == "mean" else "concat"
                out = attention_layer(
                    h,
                    edge_h,
                    batch,
                    params[pre + "W"],
                    params[pre + "a"],
                    heads,
                    merge,
                    self_w,
                    act,
                    cfg.leaky_slope,
                    cfg.attention_dropout_p,
                    training,
                    rng,
                    None if capture is None else capture["attention"],
                )
            h = out + h if cfg.use_residual_connection else out
        h = nx.dropout(h, cfg.dropout_p, training, rng)

    out = feed_forward_head(h, params, cfg.t_pred, act)
    if cfg.output_mode == "velocities":
        anchor = batch.anchor_positions[:, None, :]
        return nx.cumsum(out, axis=1) + anchor
    return out
