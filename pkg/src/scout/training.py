"""Optimization loop, evaluation and the gradient verification harness."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError, EmptyDataset, NonFiniteGradient, NonFiniteLoss
from .graph import adjacency_from_positions, batch_graphs, build_adjacency, graph_from_adjacency
from .layers import ModelConfig, ModelParams, check_params, init_params, model_forward
from .losses import LossConfig, MetricAccumulator, total_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16  # large-scale runs used 256
    weight_decay: float = 0.01
    max_epochs: int = 100
    max_steps: int | None = None
    early_stop_patience: int = 10
    eval_every: int = 1  # epochs between validation passes
    lr_schedule: str = "constant"  # or "cosine": decay to lr * min_lr_ratio over the run
    min_lr_ratio: float = 0.01
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and max_epochs >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, step, total_steps):
        if self.lr_schedule == "constant" or total_steps <= 1:
            return self.lr
        frac = min(step / (total_steps - 1), 1.0)
        floor = self.lr * self.min_lr_ratio
        return floor + 0.5 * (self.lr - floor) * (1 + np.cos(np.pi * frac))


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def optimizer_step(params, state, cfg, lr=None):
    """AdamW update in place using each param's accumulated ``grad``.

    Decay is decoupled: weights shrink by ``lr * weight_decay`` before the
    bias-corrected adaptive step. ``lr`` overrides ``cfg.lr`` (schedules).
    """
    lr = cfg.lr if lr is None else lr
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for param {p.name!r}")
    state.step += 1
    t = state.step
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(p.name, np.zeros_like(p.data))
        v = state.v.get(p.name, np.zeros_like(p.data))
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        m_hat = m / (1 - cfg.beta1**t)
        v_hat = v / (1 - cfg.beta2**t)
        p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return params, state


# ---------------------------------------------------------------- graphs and batches

def sample_graph(sample, model_cfg):
    return build_adjacency(sample, model_cfg.adjacency_mode, model_cfg.radius)


def make_batch(samples, model_cfg, graphs=None):
    graphs = graphs if graphs is not None else [sample_graph(s, model_cfg) for s in samples]
    batch = batch_graphs(graphs)
    gt = np.concatenate([s.fut for s in samples])
    mask = np.concatenate([s.loss_mask for s in samples])
    return batch, gt, mask


def batch_loss(samples, params, model_cfg, loss_cfg, training, rng, graphs=None):
    batch, gt, mask = make_batch(samples, model_cfg, graphs)
    pred = model_forward(batch, params, model_cfg, training=training, rng=rng)
    loss, overlaps = total_loss(pred, gt, mask, batch.edges, loss_cfg, batch.node_ptr, batch.edge_ptr)
    return loss, pred, overlaps


# ---------------------------------------------------------------- evaluation

def predict(samples, params, model_cfg, batch_size=64):
    """Predictions for each sample, in its normalized frame."""
    out = []
    for k in range(0, len(samples), batch_size):
        chunk = samples[k : k + batch_size]
        batch, _, _ = make_batch(chunk, model_cfg)
        pred = model_forward(batch, params, model_cfg).data
        out.extend(pred[batch.node_ptr[s] : batch.node_ptr[s + 1]] for s in range(len(chunk)))
    return out


def evaluate(samples, params, model_cfg, **metadata):
    """MetricReport of the model on ``samples`` (dropout off)."""
    return evaluate_predictions(samples, predict(samples, params, model_cfg), model_cfg, **metadata)


def evaluate_predictions(samples, predictions, model_cfg, **metadata):
    if not samples:
        raise EmptyDataset("nothing to evaluate")
    acc = MetricAccumulator()
    for s, pred in zip(samples, predictions):
        g = sample_graph(s, model_cfg)
        acc.add_scene(pred, s.fut, s.loss_mask, s.agent_types, g.edges)
    return acc.report(**metadata)


def constant_velocity_predictions(samples):
    """Extrapolate the last observed step displacement (zero if only one frame is known)."""
    out = []
    for s in samples:
        last = s.obs[:, -1, :2]
        if s.t_obs >= 2:
            both = s.presence_mask[:, -1] & s.presence_mask[:, -2]
            vel = np.where(both[:, None], last - s.obs[:, -2, :2], 0.0)
        else:
            vel = np.zeros_like(last)
        steps = np.arange(1, s.t_pred + 1)[None, :, None]
        out.append(last[:, None, :] + steps * vel[:, None, :])
    return out


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    params: ModelParams
    log: list
    best_epoch: int
    state: OptimizerState


def config_hash(*configs):
    blob = json.dumps([asdict(c) for c in configs], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def train(split, model_cfg, loss_cfg, train_cfg, params=None, log_path=None, checkpoint_path=None):
    """Fit the model on ``split.train``; keep the parameters with the best validation ADE.

    Each epoch shuffles scenes, runs forward/backward over block-diagonal
    batches and takes one optimizer step per batch. Validation falls back to
    the training scenes when no validation split exists. Log records are
    JSON-serialisable dicts (also appended to ``log_path`` as JSON lines).
    """
    if not split.train:
        raise EmptyDataset("training split is empty")
    rng = np.random.default_rng(train_cfg.seed)
    params = params if params is not None else init_params(model_cfg, seed=int(rng.integers(2**31)))
    check_params(params, model_cfg)
    state = OptimizerState()
    val_samples = split.val or split.train
    graphs = [sample_graph(s, model_cfg) for s in split.train]

    steps_per_epoch = -(-len(split.train) // train_cfg.batch_size)
    total_steps = steps_per_epoch * train_cfg.max_epochs
    if train_cfg.max_steps is not None:
        total_steps = min(total_steps, train_cfg.max_steps)
    records, best, best_epoch, stale = [], None, -1, 0
    best_params = params.copy()
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(train_cfg.max_epochs):
            order = rng.permutation(len(split.train))
            losses, overlaps = [], []
            for k in range(0, len(order), train_cfg.batch_size):
                idx = order[k : k + train_cfg.batch_size]
                params.zero_grad()
                loss, _, ov = batch_loss(
                    [split.train[i] for i in idx], params, model_cfg, loss_cfg, True, rng, [graphs[i] for i in idx]
                )
                if not np.isfinite(loss.data):
                    raise NonFiniteLoss(f"epoch {epoch} step {state.step}: loss is {loss.data}")
                loss.backward()
                optimizer_step(params, state, train_cfg, train_cfg.lr_at(state.step, total_steps))
                losses.append(float(loss.data))
                overlaps.extend(ov.tolist())
                if train_cfg.max_steps is not None and state.step >= train_cfg.max_steps:
                    break
            done = train_cfg.max_steps is not None and state.step >= train_cfg.max_steps
            if epoch % train_cfg.eval_every == 0 or done or epoch == train_cfg.max_epochs - 1:
                report = evaluate(val_samples, params, model_cfg)
                rec = {
                    "epoch": epoch,
                    "step": state.step,
                    "train_loss": float(np.mean(losses)),
                    "train_overlap": float(np.mean(overlaps)) if overlaps else 0.0,
                    "val_ade": report.ade,
                    "val_fde": report.fde,
                    "val_overlap": report.overlap_rate,
                }
                records.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if best is None or report.ade < best:
                    best, best_epoch, stale = report.ade, epoch, 0
                    best_params = params.copy()
                    if checkpoint_path:
                        save_checkpoint(checkpoint_path, best_params, model_cfg, loss_cfg, train_cfg)
                else:
                    stale += 1
                    if stale >= train_cfg.early_stop_patience:
                        log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                        break
            if done:
                break
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(best_params, records, best_epoch, state)


def save_checkpoint(path, params, model_cfg, loss_cfg=None, train_cfg=None):
    meta = {"model": model_cfg.to_dict()}
    if loss_cfg is not None:
        meta["loss"] = asdict(loss_cfg)
    if train_cfg is not None:
        meta["train"] = asdict(train_cfg)
    nx.save_params(list(params), path, meta)


def load_checkpoint(path):
    """Returns ``(params, model_cfg, metadata)``."""
    plist, meta = nx.load_params(path)
    cfg = ModelConfig(**meta["model"])
    params = ModelParams(plist)
    check_params(params, cfg)
    return params, cfg, meta


# ---------------------------------------------------------------- gradient verification

def random_graph(rng, n, model_cfg, spread=12.0):
    """Random scene graph with ``n`` agents scattered over a few tens of meters."""
    pos = rng.uniform(-spread, spread, size=(n, 2))
    adj = adjacency_from_positions(pos, model_cfg.adjacency_mode, model_cfg.radius)
    feats = rng.normal(size=(n, model_cfg.input_dim))
    return graph_from_adjacency(feats, adj, pos, model_cfg.adjacency_mode, model_cfg.radius)


def relative_error(analytic, numeric):
    """max |a - f| / max(|a|, |f|), floored at 1e-8 so all-zero gradients compare absolutely."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


VERIFY_VARIANTS = (("fixed_weight", 1), ("attention", 3), ("gated", 1), ("gcn", 1))


def verify_gradients(model_cfg=None, loss_cfg=None, trials=5, tolerance=1e-4, seed=0, eps=1e-5, variants=VERIFY_VARIANTS, zero_params=False, kink_margin=1e-3):
    """Compare analytic loss gradients with central differences for every param.

    For each variant and trial a random graph with 2..6 nodes and a random
    target is drawn; draws whose kinked activations sit closer than
    ``kink_margin`` to zero are redrawn. The overlap factor is frozen at the
    unperturbed value, matching how it enters the analytic gradient.
    Failures are reported, never raised.
    """
    base = model_cfg or ModelConfig(hidden_dim=6, edge_dim=3, t_obs=3, t_pred=4)
    loss_cfg = loss_cfg or LossConfig(delta=1.0, alpha=5.0, beta=1.0)
    rng = np.random.default_rng(seed)
    report = {"tolerance": tolerance, "variants": {}, "passed": True}
    for variant, heads in variants:
        cfg = replace(base, variant=variant, num_heads=heads, dropout_p=0.0, attention_dropout_p=0.0)
        per_param, trial_info = {}, []
        for _ in range(trials):
            for _attempt in range(50):
                n = int(rng.integers(2, 7))
                graph = random_graph(rng, n, cfg)
                params = init_params(cfg, seed=int(rng.integers(2**31)))
                for p in params:
                    if zero_params:
                        p.data[...] = 0.0
                    elif p.name.endswith((".b", ".b1", ".b2", ".edge_b")):
                        p.data[...] = rng.normal(scale=0.1, size=p.shape)
                gt = rng.normal(scale=1.5, size=(n, cfg.t_pred, 2))
                mask = np.ones(n, dtype=bool)
                mask[rng.integers(n)] = n == 1 or rng.random() < 0.5
                batch = batch_graphs(graph)
                pred = model_forward(batch, params, cfg)
                loss, overlaps = total_loss(pred, gt, mask, batch.edges, loss_cfg)
                if zero_params or nx.kink_margin(loss) >= kink_margin:
                    break
            params.zero_grad()
            loss.backward()

            def f(batch=batch, params=params, gt=gt, mask=mask, overlaps=overlaps):
                out = model_forward(batch, params, cfg)
                return total_loss(out, gt, mask, batch.edges, loss_cfg, overlaps=overlaps)[0]

            for p in params:
                analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
                numeric = nx.finite_diff_gradient(f, p, eps)
                err = relative_error(analytic, numeric)
                per_param[p.name] = max(per_param.get(p.name, 0.0), err)
            trial_info.append({"nodes": n, "overlap": float(overlaps[0])})
        worst = max(per_param.values())
        ok = worst < tolerance
        report["variants"][f"{variant}/{heads}h"] = {
            "max_rel_err": worst,
            "per_param": per_param,
            "params": sorted(per_param),
            "trials": trial_info,
            "passed": ok,
        }
        report["passed"] &= ok
    return report
