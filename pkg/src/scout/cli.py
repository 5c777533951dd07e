"""Command-line entry point: ``scout <command> [flags]``.

One YAML config per run with sections ``data``, ``model``, ``loss`` and
``train`` plus a root ``seed``. Flags override the file, the file overrides
the defaults. Every command writes a ``manifest.json`` into its output
directory. Errors exit with the code of their family (see ``errors``).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, fields
from datetime import datetime, timezone
from importlib import metadata as importlib_metadata
from pathlib import Path

import yaml

from . import attribution
from .data import (
    denormalize_positions,
    load_split,
    load_trajectories,
    normalize_sample,
    resample,
    save_split,
    split_by_recording,
    window_sequences,
)
from .errors import ConfigError, EmptyDataset, IoFailure, SchemaMismatch, ScoutError
from .layers import ModelConfig
from .losses import LossConfig
from .training import TrainConfig, evaluate, load_checkpoint, predict, save_checkpoint, train

DATA_DEFAULTS = {
    "csv": None,
    "format_spec": None,
    "source_hz": 2.5,
    "target_hz": 2.5,
    "stride": 1,
    "val_fraction": 0.2,
    "test_fraction": 1 / 3,
    "test_recordings": None,
    "val_recordings": None,
}
SECTIONS = {"model": ModelConfig, "loss": LossConfig, "train": TrainConfig}
SUBSETS = ("train", "val", "test")


# ---------------------------------------------------------------- config

def read_config(path):
    """Parsed YAML config and the raw bytes (for hashing); ``({}, b"")`` without a file."""
    if path is None:
        return {}, b""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(raw) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(doc) - {"seed", "data", *SECTIONS}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return doc, raw


def _section(cls, values, where):
    values = dict(values or {})
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def resolve_config(doc, args):
    """Merge defaults, file and flags into ``(seed, data, model, loss, train)``."""
    seed = args.seed if getattr(args, "seed", None) is not None else int(doc.get("seed", 0))
    data = dict(DATA_DEFAULTS)
    unknown = set(doc.get("data") or {}) - set(DATA_DEFAULTS) - {"t_obs", "t_pred"}
    if unknown:
        raise ConfigError(f"data: unknown keys {sorted(unknown)}")
    data.update(doc.get("data") or {})

    model_vals = dict(doc.get("model") or {})
    for key in ("t_obs", "t_pred"):
        if key in data:
            model_vals.setdefault(key, data[key])
    if getattr(args, "variant", None):
        model_vals["variant"] = args.variant
    if getattr(args, "heads", None) is not None:
        model_vals["num_heads"] = args.heads
    if model_vals.get("variant", "attention") != "attention" and "num_heads" not in model_vals:
        model_vals["num_heads"] = 1
    model = _section(ModelConfig, model_vals, "model")

    loss_vals = dict(doc.get("loss") or {})
    if getattr(args, "alpha", None) is not None:
        loss_vals["alpha"] = args.alpha
    if getattr(args, "beta", None) is not None:
        loss_vals["beta"] = args.beta
    loss = _section(LossConfig, loss_vals, "loss")

    train_vals = dict(doc.get("train") or {})
    train_vals["seed"] = seed
    train_cfg = _section(TrainConfig, train_vals, "train")
    data["t_obs"], data["t_pred"] = model.t_obs, model.t_pred
    return seed, data, model, loss, train_cfg


def _sha256(blob):
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------- manifest and outputs

def _version():
    try:
        return importlib_metadata.version("artifact")
    except importlib_metadata.PackageNotFoundError:
        return "unknown"


def _now():
    return datetime.now(timezone.utc).isoformat()


def _out_dir(args):
    if not args.out:
        raise ConfigError(f"{args.command}: --out is required")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    return out


def _write_json(path, doc):
    try:
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_manifest(out, args, started, raw_config, resolved, inputs, outputs):
    """RunManifest: command, config path and hash, seed, inputs, outputs, version, timestamps.

    ``config_hash`` is the SHA-256 of the config file bytes; the merged
    configuration (defaults, file, flags) is hashed separately.
    """
    doc = {
        "command": args.command,
        "config_path": args.config,
        "config_hash": _sha256(raw_config) if args.config else None,
        "resolved_config_hash": _sha256(json.dumps(resolved, sort_keys=True, default=str).encode()),
        "seed": resolved.get("seed"),
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": sorted(outputs),
        "code_version": _version(),
        "started": started,
        "finished": _now(),
    }
    _write_json(out / "manifest.json", doc)
    return doc


def _resolved_dict(seed, data, model, loss, train_cfg):
    return {"seed": seed, "data": data, "model": model.to_dict(), "loss": asdict(loss), "train": asdict(train_cfg)}


def _load_subset(path, subset):
    if not path:
        raise ConfigError("--split is required")
    split = load_split(path)
    samples = getattr(split, subset)
    if not samples:
        raise EmptyDataset(f"{path}: subset {subset!r} is empty")
    return samples


def _pick_scene(samples, scene_id):
    """Scene by index or by ``recording_id:anchor_frame``."""
    if scene_id is None:
        return samples[0]
    if ":" in scene_id:
        rec, anchor = scene_id.rsplit(":", 1)
        for s in samples:
            if s.recording_id == rec and s.anchor_frame == int(anchor):
                return s
        raise ConfigError(f"--scene-id {scene_id!r} not found")
    try:
        return samples[int(scene_id)]
    except (ValueError, IndexError):
        raise ConfigError(f"--scene-id {scene_id!r} is neither an index below {len(samples)} nor recording:frame") from None


def check_compatible(samples, model_cfg):
    """Raise SchemaMismatch unless the samples fit the model's input/output shapes."""
    for s in samples:
        if s.obs.shape[1:] != (model_cfg.t_obs, model_cfg.num_features):
            raise SchemaMismatch(
                f"scene {s.recording_id}:{s.anchor_frame} has observations {s.obs.shape[1:]}, "
                f"model expects ({model_cfg.t_obs}, {model_cfg.num_features})"
            )
        if s.fut.shape[1] != model_cfg.t_pred:
            raise SchemaMismatch(
                f"scene {s.recording_id}:{s.anchor_frame} has T_pred {s.fut.shape[1]}, model expects {model_cfg.t_pred}"
            )


# ---------------------------------------------------------------- commands

def prepare_dataset(data, seed):
    """CSV -> resampled, windowed, normalized, recording-disjoint split."""
    if not data.get("csv"):
        raise ConfigError("prepare: no input CSV (positional argument or data.csv)")
    tracks = load_trajectories(data["csv"], data.get("format_spec"))
    if not tracks:
        raise EmptyDataset(f"{data['csv']}: no trajectory rows")
    tracks = resample(tracks, data["source_hz"], data["target_hz"])
    windows = window_sequences(tracks, data["t_obs"], data["t_pred"], data["stride"])
    if not windows:
        raise EmptyDataset(f"{data['csv']}: no window of {data['t_obs']}+{data['t_pred']} frames fits any recording")
    samples = [normalize_sample(s) for s in windows]
    return split_by_recording(
        samples,
        val_fraction=data["val_fraction"],
        test_fraction=data["test_fraction"],
        seed=seed,
        test_recordings=data.get("test_recordings"),
        val_recordings=data.get("val_recordings"),
    )


def cmd_prepare(args, doc, raw):
    started = _now()
    if args.csv:
        doc = {**doc, "data": {**(doc.get("data") or {}), "csv": args.csv}}
    seed, data, model, loss, train_cfg = resolve_config(doc, args)
    out = _out_dir(args)
    split = prepare_dataset(data, seed)
    save_split(split, out / "dataset.json")
    counts = {name: len(getattr(split, name)) for name in SUBSETS}
    _write_json(out / "split_manifest.json", {"counts": counts, "recordings": split.provenance})
    write_manifest(
        out, args, started, raw, _resolved_dict(seed, data, model, loss, train_cfg),
        {"csv": data["csv"]}, ["dataset.json", "split_manifest.json"],
    )
    return counts


def cmd_train(args, doc, raw):
    started = _now()
    seed, data, model, loss, train_cfg = resolve_config(doc, args)
    out = _out_dir(args)
    if not args.split:
        raise ConfigError("train: --split (a prepared dataset.json) is required")
    split = load_split(args.split)
    if not split.train:
        raise EmptyDataset(f"{args.split}: training split is empty")
    check_compatible(split.train + split.val + split.test, model)
    result = train(split, model, loss, train_cfg, log_path=out / "train_log.jsonl", checkpoint_path=out / "checkpoint.json")
    save_checkpoint(out / "checkpoint.json", result.params, model, loss, train_cfg)
    eval_set = split.val or split.train
    report = evaluate(eval_set, result.params, model, subset="val" if split.val else "train", best_epoch=result.best_epoch)
    _write_json(out / "val_report.json", report.to_dict())
    write_manifest(
        out, args, started, raw, _resolved_dict(seed, data, model, loss, train_cfg),
        {"split": args.split}, ["checkpoint.json", "train_log.jsonl", "val_report.json"],
    )
    return report


def _evaluate_checkpoint(args, zero_shot=False):
    started = _now()
    if not args.checkpoint:
        raise ConfigError(f"{args.command}: --checkpoint is required")
    params, model, meta = load_checkpoint(args.checkpoint)
    samples = _load_subset(args.split, args.subset)
    check_compatible(samples, model)
    tags = {"subset": args.subset, "checkpoint": str(args.checkpoint), "split": str(args.split)}
    if zero_shot:
        tags["zero_shot"] = True
    report = evaluate(samples, params, model, **tags)
    out = _out_dir(args)
    name = "transfer_report.json" if zero_shot else "metrics.json"
    _write_json(out / name, report.to_dict())
    resolved = {"seed": meta.get("train", {}).get("seed"), "model": model.to_dict()}
    write_manifest(out, args, started, b"", resolved, {"checkpoint": args.checkpoint, "split": args.split}, [name])
    return report


def cmd_evaluate(args, doc, raw):
    return _evaluate_checkpoint(args)


def cmd_transfer_eval(args, doc, raw):
    return _evaluate_checkpoint(args, zero_shot=True)


def cmd_predict(args, doc, raw):
    started = _now()
    if not args.checkpoint:
        raise ConfigError("predict: --checkpoint is required")
    params, model, meta = load_checkpoint(args.checkpoint)
    sample = _pick_scene(_load_subset(args.split, args.subset), args.scene_id)
    check_compatible([sample], model)
    pred = predict([sample], params, model)[0]
    world = denormalize_positions(pred, sample.origin)
    doc_out = {
        "recording_id": sample.recording_id,
        "anchor_frame": sample.anchor_frame,
        "agents": [
            {"agent_id": int(a), "agent_type": t.value, "trajectory": world[k].tolist()}
            for k, (a, t) in enumerate(zip(sample.agent_ids, sample.agent_types))
        ],
    }
    out = _out_dir(args)
    _write_json(out / "trajectories.json", doc_out)
    resolved = {"seed": meta.get("train", {}).get("seed"), "model": model.to_dict()}
    write_manifest(out, args, started, b"", resolved, {"checkpoint": args.checkpoint, "split": args.split}, ["trajectories.json"])
    return doc_out


def cmd_attribute(args, doc, raw):
    started = _now()
    if not args.checkpoint:
        raise ConfigError("attribute: --checkpoint is required")
    params, model, meta = load_checkpoint(args.checkpoint)
    sample = _pick_scene(_load_subset(args.split, args.subset), args.scene_id)
    check_compatible([sample], model)
    if not 0 <= args.node < sample.num_agents:
        raise ConfigError(f"--node {args.node} out of range for {sample.num_agents} agents")
    graph, result = attribution.attribute_scene(sample, params, model, node=args.node, n_steps=args.n_steps)
    out = _out_dir(args)
    _write_json(out / "attribution.json", result.to_dict())
    attribution.export_interaction_graph(graph, result, out / "interaction.json", "json")
    attribution.export_interaction_graph(graph, result, out / "interaction.dot", "dot")
    resolved = {"seed": meta.get("train", {}).get("seed"), "model": model.to_dict()}
    write_manifest(
        out, args, started, b"", resolved, {"checkpoint": args.checkpoint, "split": args.split},
        ["attribution.json", "interaction.json", "interaction.dot"],
    )
    return result


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "attribute": cmd_attribute,
    "transfer-eval": cmd_transfer_eval,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="scout", description="Graph-attention trajectory forecasting.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--out", help="output directory")
        return p

    prep = common(sub.add_parser("prepare", help="CSV -> cached normalized split"))
    prep.add_argument("csv", nargs="?", help="trajectory CSV (overrides data.csv)")

    tr = common(sub.add_parser("train", help="train a model on a prepared split"))
    tr.add_argument("--split", help="dataset.json written by prepare")
    tr.add_argument("--variant", choices=["fixed_weight", "attention", "gated", "gcn"])
    tr.add_argument("--heads", type=int)
    tr.add_argument("--alpha", type=float)
    tr.add_argument("--beta", type=float)

    for name, help_text in (
        ("evaluate", "metrics of a checkpoint on a prepared split"),
        ("transfer-eval", "zero-shot evaluation on another scenario"),
        ("predict", "predicted trajectories for one scene"),
        ("attribute", "integrated gradients over the edges of one scene"),
    ):
        p = common(sub.add_parser(name, help=help_text))
        p.add_argument("--checkpoint", help="checkpoint.json written by train")
        p.add_argument("--split", help="dataset.json written by prepare")
        p.add_argument("--subset", choices=SUBSETS, default="test")
        if name in ("predict", "attribute"):
            p.add_argument("--scene-id", help="index in the subset or recording_id:anchor_frame")
        if name == "attribute":
            p.add_argument("--node", type=int, default=0, help="agent whose prediction is explained")
            p.add_argument("--n-steps", type=int, default=128)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        doc, raw = read_config(args.config)
        result = COMMANDS[args.command](args, doc, raw)
    except ScoutError as exc:
        print(f"scout {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    if hasattr(result, "to_json"):
        print(result.to_json())
    elif isinstance(result, dict):
        print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
