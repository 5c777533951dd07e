"""Training objective and evaluation metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .data import AgentType
from .errors import ConfigError, MissingClass, NoEligibleNodes, ShapeMismatch
from .graph import MIN_DISTANCE

# per-class weights for the weighted-sum metrics (vehicle, pedestrian, bicycle)
CLASS_WEIGHTS = {AgentType.VEHICLE: 0.20, AgentType.PEDESTRIAN: 0.58, AgentType.BICYCLE: 0.22}


@dataclass(frozen=True)
class LossConfig:
    delta: float = 1.0
    alpha: float = 5.0
    beta: float = 1.0

    def __post_init__(self):
        if self.delta <= 0:
            raise ConfigError("delta must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")


# ---------------------------------------------------------------- Huber

def huber_elementwise(err, delta):
    """Differentiable Huber penalty of each entry of ``err``."""
    err = nx.as_tensor(err)
    a = np.abs(err.data)
    out = np.where(a <= delta, 0.5 * err.data**2, delta * (a - 0.5 * delta))
    slope = np.clip(err.data, -delta, delta)
    return nx.Tensor(out, (err,), lambda g: (g * slope,), "huber")


def huber(y, y_hat, delta=1.0):
    """Mean Huber penalty over all coordinates."""
    y, y_hat = nx.as_tensor(y), nx.as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ShapeMismatch(f"huber: {y.shape} vs {y_hat.shape}")
    return nx.mean(huber_elementwise(y - y_hat, delta))


# ---------------------------------------------------------------- overlap

def _orientation(p, q, r):
    """Sign of the cross product (q - p) x (r - p), vectorized over leading axes."""
    return np.sign((q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0]))


def _within_box(p, q, r):
    """r lies in the bounding box of segment pq."""
    return (
        (np.minimum(p[..., 0], q[..., 0]) <= r[..., 0])
        & (r[..., 0] <= np.maximum(p[..., 0], q[..., 0]))
        & (np.minimum(p[..., 1], q[..., 1]) <= r[..., 1])
        & (r[..., 1] <= np.maximum(p[..., 1], q[..., 1]))
    )


def segments_intersect(p1, q1, p2, q2, eps=MIN_DISTANCE):
    """Whether segments p1q1 and p2q2 share a point.

    The side function of a segment's supporting line is continuous, so if the
    two endpoints of the other segment give opposite signs the segment must
    cross that line; both segments straddling each other's line means they
    cross. Collinear touching is caught by the bounding-box test. A
    zero-length segment only counts when it sits within ``eps`` of an
    endpoint of the other segment. Arrays broadcast over leading axes.
    """
    p1, q1, p2, q2 = (np.asarray(a, dtype=float) for a in (p1, q1, p2, q2))
    o1 = _orientation(p1, q1, p2)
    o2 = _orientation(p1, q1, q2)
    o3 = _orientation(p2, q2, p1)
    o4 = _orientation(p2, q2, q1)
    hit = (o1 * o2 < 0) & (o3 * o4 < 0)
    hit |= (o1 == 0) & _within_box(p1, q1, p2)
    hit |= (o2 == 0) & _within_box(p1, q1, q2)
    hit |= (o3 == 0) & _within_box(p2, q2, p1)
    hit |= (o4 == 0) & _within_box(p2, q2, q1)

    deg1 = np.all(p1 == q1, axis=-1)
    deg2 = np.all(p2 == q2, axis=-1)
    degenerate = deg1 | deg2

    def near(a, b):
        return np.linalg.norm(a - b, axis=-1) <= eps

    touch = np.where(deg1, near(p1, p2) | near(p1, q2), False) | np.where(deg2, near(p2, p1) | near(p2, q1), False)
    return np.where(degenerate, touch, hit)


def overlap_counts(predictions, pairs):
    """(intersecting slots, total slots) over connected pairs and consecutive steps."""
    pred = np.asarray(predictions, dtype=float)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    steps = pred.shape[1] - 1
    if len(pairs) == 0 or steps < 1:
        return 0, 0
    a, b = pred[pairs[:, 0]], pred[pairs[:, 1]]
    hits = segments_intersect(a[:, :-1], a[:, 1:], b[:, :-1], b[:, 1:])
    return int(hits.sum()), hits.size


def overlap_percentage(predictions, edges):
    """Fraction of (connected pair, step) slots whose step segments intersect."""
    hit, total = overlap_counts(predictions, edges)
    return hit / total if total else 0.0


# ---------------------------------------------------------------- loss

def step_weights(t_pred, overlap, cfg):
    """Per-step multipliers: (1 + alpha * overlap) / T everywhere, plus beta on the last step."""
    w = np.full(t_pred, (1.0 + cfg.alpha * overlap) / t_pred)
    w[-1] += cfg.beta
    return w


def total_loss(predictions, ground_truth, loss_mask, edges, cfg, node_ptr=None, edge_ptr=None, overlaps=None):
    """Overlap-weighted Huber objective, averaged over scenes.

    For each scene the per-step term is the Huber penalty summed over x and y
    and averaged over loss-eligible nodes; the time-mean of those terms is
    scaled by ``1 + alpha * overlap`` and the final step is added with weight
    ``beta``. The overlap fraction is measured on the predictions but treated
    as a constant factor (no gradient flows through it).

    ``node_ptr``/``edge_ptr`` delimit scenes in a batch (default: one scene).
    ``overlaps`` overrides the per-scene overlap fractions.
    Returns ``(loss_tensor, per_scene_overlaps)``.
    """
    pred = nx.as_tensor(predictions)
    gt = np.asarray(ground_truth, dtype=float)
    mask = np.asarray(loss_mask, dtype=bool)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[2] != 2:
        raise ShapeMismatch(f"total_loss: predictions {pred.shape} vs ground truth {gt.shape}")
    n, t_pred, _ = gt.shape
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    node_ptr = np.array([0, n]) if node_ptr is None else np.asarray(node_ptr)
    edge_ptr = np.array([0, len(edges)]) if edge_ptr is None else np.asarray(edge_ptr)
    num_scenes = len(node_ptr) - 1

    if overlaps is None:
        overlaps = [
            overlap_percentage(pred.data, edges[edge_ptr[s] : edge_ptr[s + 1]]) for s in range(num_scenes)
        ]
    overlaps = np.asarray(overlaps, dtype=float)

    coef = np.zeros((n, t_pred))
    scenes_used = 0
    for s in range(num_scenes):
        lo, hi = node_ptr[s], node_ptr[s + 1]
        eligible = mask[lo:hi]
        if not eligible.any():
            continue
        scenes_used += 1
        coef[lo:hi] = eligible[:, None] * step_weights(t_pred, overlaps[s], cfg)[None, :] / eligible.sum()
    if scenes_used == 0:
        raise NoEligibleNodes("no loss-eligible node in the batch")
    coef /= scenes_used

    per_node_step = nx.sum_(huber_elementwise(pred - gt, cfg.delta), axis=2)  # (N, T)
    return nx.sum_(per_node_step * coef), overlaps


# ---------------------------------------------------------------- metrics

def _displacements(pred, gt, mask):
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"metric: {pred.shape} vs {gt.shape}")
    mask = np.ones(pred.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise NoEligibleNodes("no eligible node to evaluate")
    return np.linalg.norm(pred[mask] - gt[mask], axis=-1)


def ade(pred, gt, mask=None):
    return float(_displacements(pred, gt, mask).mean())


def fde(pred, gt, mask=None):
    return float(_displacements(pred, gt, mask)[:, -1].mean())


def _weighted(per_class):
    keyed = {AgentType(k) if not isinstance(k, AgentType) else k: v for k, v in per_class.items()}
    missing = [t.value for t in CLASS_WEIGHTS if keyed.get(t) is None]
    if missing:
        raise MissingClass(f"weighted metric needs every class; missing {missing}")
    return float(sum(w * keyed[t] for t, w in CLASS_WEIGHTS.items()))


def wsade(per_class_ade):
    """Class-weighted ADE: 0.20 vehicle + 0.58 pedestrian + 0.22 bicycle."""
    return _weighted(per_class_ade)


def wsfde(per_class_fde):
    return _weighted(per_class_fde)


@dataclass
class MetricAccumulator:
    """Associative running sums for ADE/FDE (overall and per class) and overlap."""

    disp_sum: float = 0.0
    disp_count: int = 0
    final_sum: float = 0.0
    final_count: int = 0
    class_disp: dict = field(default_factory=lambda: {t.value: [0.0, 0] for t in AgentType})
    class_final: dict = field(default_factory=lambda: {t.value: [0.0, 0] for t in AgentType})
    overlap_hits: int = 0
    overlap_slots: int = 0
    scene_overlaps: list = field(default_factory=list)

    def add_scene(self, pred, gt, loss_mask, agent_types, edges):
        pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
        mask = np.asarray(loss_mask, dtype=bool)
        disp = np.linalg.norm(pred - gt, axis=-1)
        self.disp_sum += float(disp[mask].sum())
        self.disp_count += int(disp[mask].size)
        self.final_sum += float(disp[mask, -1].sum())
        self.final_count += int(mask.sum())
        for k, t in enumerate(agent_types):
            if not mask[k]:
                continue
            key = t.value if isinstance(t, AgentType) else AgentType(t).value
            self.class_disp[key][0] += float(disp[k].sum())
            self.class_disp[key][1] += disp.shape[1]
            self.class_final[key][0] += float(disp[k, -1])
            self.class_final[key][1] += 1
        hit, total = overlap_counts(pred, edges)
        self.overlap_hits += hit
        self.overlap_slots += total
        self.scene_overlaps.append(hit / total if total else 0.0)

    def merge(self, other):
        out = MetricAccumulator(
            self.disp_sum + other.disp_sum,
            self.disp_count + other.disp_count,
            self.final_sum + other.final_sum,
            self.final_count + other.final_count,
            overlap_hits=self.overlap_hits + other.overlap_hits,
            overlap_slots=self.overlap_slots + other.overlap_slots,
            scene_overlaps=self.scene_overlaps + other.scene_overlaps,
        )
        for key in out.class_disp:
            out.class_disp[key] = [a + b for a, b in zip(self.class_disp[key], other.class_disp[key])]
            out.class_final[key] = [a + b for a, b in zip(self.class_final[key], other.class_final[key])]
        return out

    def report(self, **metadata):
        if self.final_count == 0:
            raise NoEligibleNodes("no eligible node was evaluated")
        per_ade = {k: (s / c if c else None) for k, (s, c) in self.class_disp.items()}
        per_fde = {k: (s / c if c else None) for k, (s, c) in self.class_final.items()}
        complete = all(v is not None for v in per_ade.values())
        return MetricReport(
            ade=self.disp_sum / self.disp_count,
            fde=self.final_sum / self.final_count,
            per_class_ade=per_ade,
            per_class_fde=per_fde,
            wsade=wsade(per_ade) if complete else None,
            wsfde=wsfde(per_fde) if complete else None,
            overlap_rate=float(np.mean(self.scene_overlaps)) if self.scene_overlaps else 0.0,
            num_scenes=len(self.scene_overlaps),
            metadata=dict(metadata),
        )


@dataclass
class MetricReport:
    """Evaluation summary; ``wsade``/``wsfde`` are None unless all classes occur.

    ``overlap_rate`` is the mean over scenes of the per-scene overlap fraction.
    """

    ade: float
    fde: float
    per_class_ade: dict
    per_class_fde: dict
    wsade: float | None
    wsfde: float | None
    overlap_rate: float
    num_scenes: int = 0
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)
