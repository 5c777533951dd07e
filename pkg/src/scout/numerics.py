"""Dense differentiable numerics.

A deliberately small reverse-mode engine: each :class:`Tensor` produced by an
op keeps references to its parents and a closure that pushes its gradient
back to them. Calling :meth:`Tensor.backward` on a scalar walks that record in
reverse topological order. Only the operations the forecaster needs are
provided.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import AllMaskedRow, IoFailure, ShapeMismatch

DTYPE = np.float64
CHECKPOINT_FORMAT = "scout-params"
CHECKPOINT_VERSION = 1


class Tensor:
    """Array value plus gradient accumulator and the record of how it was made."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, parents=(), backward_fn=None, op="", name=""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op or 'leaf'})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into every reachable tensor's ``grad``.

        Gradients add onto whatever is already stored, so two backward passes
        over ``f`` and ``g`` leave the same leaf gradients as one over ``f + g``.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeMismatch(f"backward() without seed needs a scalar, got shape {self.shape}")
            seed = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(seed, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not isinstance(parent, Tensor):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class Param(Tensor):
    """Named learnable leaf. ``values`` aliases ``data``."""

    __slots__ = ()

    def __init__(self, values, name):
        super().__init__(values, name=name)
        if self.ndim > 2:
            raise ShapeMismatch(f"param {name!r} has rank {self.ndim} > 2")

    @property
    def values(self):
        return self.data

    @values.setter
    def values(self, v):
        self.data = np.asarray(v, dtype=DTYPE)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if isinstance(p, Tensor) and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    return Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, (a, b), backward, "add")


def neg(a):
    return Tensor(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor(out, (a, b), backward, "div")


def power(a, exponent):
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor(out, (a,), backward, "power")


def relu(x):
    x = as_tensor(x)
    keep = x.data > 0
    return Tensor(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,), "relu")


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return Tensor(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(x):
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def identity(x):
    return as_tensor(x)


ACTIVATIONS = {"relu": relu, "leaky_relu": leaky_relu, "sigmoid": sigmoid, "linear": identity}

# ops whose derivative jumps at zero; used by gradient checks to keep clear of kinks
KINKED_OPS = ("relu", "leaky_relu")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight (+ bias)`` for ``x`` of shape (n, d_in)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------- reductions / shape

def sum_(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x, shape):
    return Tensor(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x):
    return Tensor(x.data.T, (x,), lambda g: (g.T,), "transpose")


def take(x, index):
    """Numpy-style indexing; repeated indices accumulate on the way back."""
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor(out, (x,), backward, "take")


def gather_rows(x, idx):
    idx = np.asarray(idx, dtype=np.int64)
    return take(x, idx)


def segment_sum(x, segment_ids, num_segments):
    """Sum rows of ``x`` into ``num_segments`` buckets (scatter-add)."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if x.shape[0] != segment_ids.shape[0]:
        raise ShapeMismatch(f"segment_sum: {x.shape[0]} rows vs {segment_ids.shape[0]} ids")
    out = np.zeros((num_segments,) + x.shape[1:], dtype=DTYPE)
    np.add.at(out, segment_ids, x.data)
    return Tensor(out, (x,), lambda g: (g[segment_ids],), "segment_sum")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def cumsum(x, axis):
    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis), axis),)

    return Tensor(np.cumsum(x.data, axis=axis), (x,), backward, "cumsum")


# ---------------------------------------------------------------- softmax

def softmax_rows(scores, mask):
    """Row softmax restricted to ``mask``; masked entries come out exactly 0."""
    scores = as_tensor(scores)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ShapeMismatch(f"softmax_rows: mask {mask.shape} vs scores {scores.shape}")
    if not mask.any(axis=-1).all():
        raise AllMaskedRow("softmax_rows: a row has no unmasked entry")
    shifted = np.where(mask, scores.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor(out, (scores,), backward, "softmax_rows")


def segment_softmax(scores, segment_ids, num_segments):
    """Softmax of ``scores`` (E, ...) within groups sharing a segment id."""
    scores = as_tensor(scores)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    counts = np.bincount(segment_ids, minlength=num_segments)
    if segment_ids.size and counts.min() == 0 and num_segments:
        raise AllMaskedRow("segment_softmax: a segment has no members")
    peak = np.full((num_segments,) + scores.shape[1:], -np.inf)
    np.maximum.at(peak, segment_ids, scores.data)
    e = np.exp(scores.data - peak[segment_ids])
    total = np.zeros_like(peak)
    np.add.at(total, segment_ids, e)
    out = e / total[segment_ids]

    def backward(g):
        dot = np.zeros_like(peak)
        np.add.at(dot, segment_ids, g * out)
        return (out * (g - dot[segment_ids]),)

    return Tensor(out, (scores,), backward, "segment_softmax")


# ---------------------------------------------------------------- regularization / init

def dropout(x, p, training, rng):
    """Inverted dropout: scale survivors by 1/(1-p) so evaluation is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return as_tensor(x)
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def kaiming_init(shape, fan_in, rng_seed, name="param"):
    """Normal(0, sqrt(2 / fan_in)) draws, reproducible from the seed."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return Param(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), name)


# ---------------------------------------------------------------- gradient oracle

def finite_diff_gradient(f, p, eps=1e-5):
    """Central differences of scalar ``f()`` with respect to every entry of ``p``.

    ``f`` takes no arguments and reads ``p.data``; entries are perturbed in
    place and restored.
    """
    grad = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    out = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        hi = float(np.asarray(_value(f())))
        flat[k] = orig - eps
        lo = float(np.asarray(_value(f())))
        flat[k] = orig
        out[k] = (hi - lo) / (2.0 * eps)
    return grad


def _value(v):
    return v.data if isinstance(v, Tensor) else v


def kink_margin(root):
    """Smallest |input| to any kinked activation recorded under ``root``."""
    margin = np.inf
    for node in _topological(root):
        if node.op in KINKED_OPS:
            parent = node.parents[0]
            if parent.data.size:
                margin = min(margin, float(np.abs(parent.data).min()))
    return margin


# ---------------------------------------------------------------- checkpoints

def save_params(params, path, metadata=None):
    """Write params as JSON: format tag, version, and per-param shape + flat values.

    Floats are written with ``repr`` precision so loading is bit-exact.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "metadata": metadata or {},
        "params": [
            {"name": p.name, "shape": list(p.shape), "values": [float(v) for v in p.data.reshape(-1)]}
            for p in params
        ],
    }
    try:
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(params, metadata)``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise IoFailure(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise IoFailure(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = [
        Param(np.array(rec["values"], dtype=DTYPE).reshape(rec["shape"]), rec["name"])
        for rec in doc["params"]
    ]
    return params, doc.get("metadata", {})
