"""Trajectory ingestion: CSV parsing, resampling, windowing and normalization."""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    EmptyDataset,
    EmptyWindow,
    IoFailure,
    MissingColumn,
    NonDivisibleRates,
    NonMonotoneFrames,
    UnknownAgentType,
)

REQUIRED_COLUMNS = ("recording_id", "frame", "track_id", "x", "y", "heading", "agent_type")
SAMPLE_SCHEMA_VERSION = 1


class AgentType(enum.Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    BICYCLE = "bicycle"

    @property
    def index(self):
        return _TYPE_ORDER.index(self)


_TYPE_ORDER = [AgentType.VEHICLE, AgentType.PEDESTRIAN, AgentType.BICYCLE]
NUM_TYPES = len(_TYPE_ORDER)
NUM_FEATURES = 3 + NUM_TYPES  # x, y, heading, one-hot type

# raw dataset labels -> the three categories (cars/vans/trucks, scooters with
# pedestrians, motorcycles with bicycles)
AGENT_TYPE_ALIASES = {
    "vehicle": AgentType.VEHICLE,
    "car": AgentType.VEHICLE,
    "van": AgentType.VEHICLE,
    "truck": AgentType.VEHICLE,
    "truck_bus": AgentType.VEHICLE,
    "bus": AgentType.VEHICLE,
    "pedestrian": AgentType.PEDESTRIAN,
    "scooter": AgentType.PEDESTRIAN,
    "bicycle": AgentType.BICYCLE,
    "bicyclist": AgentType.BICYCLE,
    "cyclist": AgentType.BICYCLE,
    "motorcycle": AgentType.BICYCLE,
}


def parse_agent_type(label):
    try:
        return AGENT_TYPE_ALIASES[str(label).strip().lower()]
    except KeyError:
        raise UnknownAgentType(f"unknown agent_type {label!r}") from None


def wrap_heading(theta):
    """Map angles onto [-pi, pi)."""
    return (np.asarray(theta, dtype=float) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True)
class AgentTrack:
    recording_id: str
    agent_id: int
    agent_type: AgentType
    frames: np.ndarray  # (F,) int, strictly increasing
    xy: np.ndarray  # (F, 2) meters
    heading: np.ndarray  # (F,) radians in [-pi, pi)

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class SequenceSample:
    """One scene window.

    ``obs`` holds (x, y, heading, one-hot type) per agent and observed frame,
    zero where ``presence_mask`` is false. ``loss_mask`` is false for agents
    missing any future frame; such agents still take part in message passing.
    """

    recording_id: str
    anchor_frame: int
    agent_ids: tuple
    agent_types: tuple
    obs: np.ndarray  # (N, T_obs, C)
    fut: np.ndarray  # (N, T_pred, 2)
    presence_mask: np.ndarray  # (N, T_obs) bool
    loss_mask: np.ndarray  # (N,) bool
    origin: tuple = (0.0, 0.0)

    @property
    def num_agents(self):
        return self.obs.shape[0]

    @property
    def t_obs(self):
        return self.obs.shape[1]

    @property
    def t_pred(self):
        return self.fut.shape[1]

    @property
    def anchor_positions(self):
        return self.obs[:, -1, :2]

    @property
    def type_index(self):
        return np.array([t.index for t in self.agent_types], dtype=np.int64)


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)  # split name -> sorted recording ids

    def check_disjoint(self):
        seen = {}
        for name in ("train", "val", "test"):
            for rec in {s.recording_id for s in getattr(self, name)}:
                if rec in seen:
                    raise ValueError(f"recording {rec!r} appears in both {seen[rec]} and {name}")
                seen[rec] = name


# ---------------------------------------------------------------- loading

def load_trajectories(path, format_spec=None):
    """Read a UTF-8 CSV into one :class:`AgentTrack` per (recording, track).

    ``format_spec`` maps the canonical column names to the file's header names
    when they differ.
    """
    colmap = {c: c for c in REQUIRED_COLUMNS}
    colmap.update(format_spec or {})
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            for canon in REQUIRED_COLUMNS:
                if colmap[canon] not in header:
                    raise MissingColumn(f"{path}: missing column {colmap[canon]!r} (for {canon})")
            rows = list(reader)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    grouped = {}
    for lineno, row in enumerate(rows, start=2):
        key = (row[colmap["recording_id"]], int(row[colmap["track_id"]]))
        try:
            atype = parse_agent_type(row[colmap["agent_type"]])
        except UnknownAgentType as exc:
            raise UnknownAgentType(f"{path}:{lineno}: {exc}") from None
        entry = grouped.setdefault(key, {"type": atype, "rows": []})
        if entry["type"] is not atype:
            raise UnknownAgentType(f"{path}:{lineno}: track {key[1]} changes agent_type")
        entry["rows"].append(
            (
                int(row[colmap["frame"]]),
                float(row[colmap["x"]]),
                float(row[colmap["y"]]),
                float(row[colmap["heading"]]),
                lineno,
            )
        )

    tracks = []
    for (rec, tid), entry in sorted(grouped.items()):
        rs = sorted(entry["rows"], key=lambda r: (r[0], r[4]))
        frames = np.array([r[0] for r in rs], dtype=np.int64)
        dup = np.nonzero(np.diff(frames) <= 0)[0]
        if dup.size:
            bad = rs[dup[0] + 1]
            raise NonMonotoneFrames(
                f"{path}:{bad[4]}: track {tid} in recording {rec} repeats frame {bad[0]}"
            )
        tracks.append(
            AgentTrack(
                recording_id=rec,
                agent_id=tid,
                agent_type=entry["type"],
                frames=frames,
                xy=np.array([[r[1], r[2]] for r in rs], dtype=float),
                heading=wrap_heading([r[3] for r in rs]),
            )
        )
    return tracks


def write_trajectories(tracks, path):
    """Write tracks back to the CSV layout :func:`load_trajectories` reads."""
    rows = []
    for tr in tracks:
        for f, (x, y), h in zip(tr.frames, tr.xy, tr.heading):
            rows.append((tr.recording_id, int(f), tr.agent_id, repr(float(x)), repr(float(y)), repr(float(h)), tr.agent_type.value))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REQUIRED_COLUMNS)
        w.writerows(rows)


# ---------------------------------------------------------------- resampling / windowing

def resample(tracks, source_hz, target_hz):
    """Keep every (source/target)-th frame from each track's first frame.

    Kept frames are renumbered at the target rate (frame // factor); gaps in a
    track are respected, only frames that land on the stride are retained.
    """
    ratio = source_hz / target_hz
    factor = int(round(ratio))
    if factor < 1 or not math.isclose(ratio, factor, rel_tol=0, abs_tol=1e-9):
        raise NonDivisibleRates(f"{source_hz} Hz is not a multiple of {target_hz} Hz")
    if factor == 1:
        return list(tracks)
    out = []
    for tr in tracks:
        start = tr.frames[0]
        keep = (tr.frames - start) % factor == 0
        out.append(
            replace(
                tr,
                frames=start // factor + (tr.frames[keep] - start) // factor,
                xy=tr.xy[keep],
                heading=tr.heading[keep],
            )
        )
    return out


def window_sequences(tracks, t_obs, t_pred, stride):
    """Slice tracks of one or more recordings into scene windows.

    A window anchored at frame ``a`` observes ``a-t_obs+1..a`` and predicts
    ``a+1..a+t_pred``. Agents are included iff present at ``a``.
    """
    if t_obs < 1 or t_pred < 1 or stride < 1:
        raise ValueError("t_obs, t_pred and stride must be >= 1")
    by_rec = {}
    for tr in tracks:
        by_rec.setdefault(tr.recording_id, []).append(tr)

    samples = []
    for rec in sorted(by_rec):
        rec_tracks = sorted(by_rec[rec], key=lambda t: t.agent_id)
        first = min(int(t.frames[0]) for t in rec_tracks)
        last = max(int(t.frames[-1]) for t in rec_tracks)
        for start in range(first, last - (t_obs + t_pred) + 2, stride):
            anchor = start + t_obs - 1
            try:
                samples.append(_make_window(rec, rec_tracks, anchor, t_obs, t_pred))
            except EmptyWindow:
                continue
    return samples


def _make_window(rec, tracks, anchor, t_obs, t_pred):
    obs_frames = np.arange(anchor - t_obs + 1, anchor + 1)
    fut_frames = np.arange(anchor + 1, anchor + t_pred + 1)
    ids, types, obs, fut, pmask, lmask = [], [], [], [], [], []
    for tr in tracks:
        lookup = {int(f): k for k, f in enumerate(tr.frames)}
        if anchor not in lookup:
            continue
        o = np.zeros((t_obs, NUM_FEATURES))
        m = np.zeros(t_obs, dtype=bool)
        for k, f in enumerate(obs_frames):
            idx = lookup.get(int(f))
            if idx is not None:
                o[k, :2] = tr.xy[idx]
                o[k, 2] = tr.heading[idx]
                o[k, 3 + tr.agent_type.index] = 1.0
                m[k] = True
        y = np.zeros((t_pred, 2))
        complete = True
        for k, f in enumerate(fut_frames):
            idx = lookup.get(int(f))
            if idx is None:
                complete = False
            else:
                y[k] = tr.xy[idx]
        ids.append(tr.agent_id)
        types.append(tr.agent_type)
        obs.append(o)
        fut.append(y)
        pmask.append(m)
        lmask.append(complete)
    if not ids:
        raise EmptyWindow(f"recording {rec}: no agent present at anchor frame {anchor}")
    return SequenceSample(
        recording_id=rec,
        anchor_frame=int(anchor),
        agent_ids=tuple(ids),
        agent_types=tuple(types),
        obs=np.array(obs),
        fut=np.array(fut),
        presence_mask=np.array(pmask),
        loss_mask=np.array(lmask),
    )


# ---------------------------------------------------------------- normalization

def normalize_sample(sample):
    """Translate so the anchor-frame centroid sits at the origin.

    The shift accumulates into ``origin`` so :func:`denormalize_sample` can
    undo it; padded (absent) frames stay zero, headings are untouched.
    """
    centroid = sample.anchor_positions.mean(axis=0)
    return _shift(sample, -centroid, np.asarray(sample.origin) + centroid)


def denormalize_sample(sample):
    return _shift(sample, np.asarray(sample.origin), (0.0, 0.0))


def _shift(sample, delta, new_origin):
    obs = sample.obs.copy()
    obs[..., :2] += np.where(sample.presence_mask[..., None], delta, 0.0)
    fut = sample.fut + delta
    return replace(sample, obs=obs, fut=fut, origin=(float(new_origin[0]), float(new_origin[1])))


def denormalize_positions(positions, origin):
    return np.asarray(positions) + np.asarray(origin)


# ---------------------------------------------------------------- splits and caching

def split_by_recording(samples, val_fraction=0.2, test_fraction=1 / 3, seed=0, test_recordings=None, val_recordings=None):
    """Partition samples so that no recording spans two splits.

    Either give explicit held-out recordings (a whole scenario kept for
    testing) or fractions applied to a seeded shuffle of recording ids: the
    test fraction first, then the validation fraction of the remainder.
    """
    recs = sorted({s.recording_id for s in samples})
    if not recs:
        raise EmptyDataset("no samples to split")
    if test_recordings is not None or val_recordings is not None:
        test_set = set(test_recordings or ())
        val_set = set(val_recordings or ())
        train_set = set(recs) - test_set - val_set
    else:
        order = list(np.random.default_rng(seed).permutation(recs))
        n_test = int(round(len(order) * test_fraction))
        rest = order[n_test:]
        n_val = int(round(len(rest) * val_fraction))
        test_set, val_set, train_set = set(order[:n_test]), set(rest[:n_val]), set(rest[n_val:])
    split = DatasetSplit(
        train=[s for s in samples if s.recording_id in train_set],
        val=[s for s in samples if s.recording_id in val_set],
        test=[s for s in samples if s.recording_id in test_set],
        provenance={
            "train": sorted(train_set & set(recs)),
            "val": sorted(val_set & set(recs)),
            "test": sorted(test_set & set(recs)),
        },
    )
    split.check_disjoint()
    return split


def sample_to_record(sample):
    return {
        "recording_id": sample.recording_id,
        "anchor_frame": sample.anchor_frame,
        "agent_ids": list(sample.agent_ids),
        "agent_types": [t.value for t in sample.agent_types],
        "obs": sample.obs.tolist(),
        "fut": sample.fut.tolist(),
        "presence_mask": sample.presence_mask.tolist(),
        "loss_mask": sample.loss_mask.tolist(),
        "origin": list(sample.origin),
    }


def sample_from_record(rec):
    return SequenceSample(
        recording_id=rec["recording_id"],
        anchor_frame=int(rec["anchor_frame"]),
        agent_ids=tuple(rec["agent_ids"]),
        agent_types=tuple(AgentType(t) for t in rec["agent_types"]),
        obs=np.array(rec["obs"], dtype=float).reshape(len(rec["agent_ids"]), -1, NUM_FEATURES),
        fut=np.array(rec["fut"], dtype=float).reshape(len(rec["agent_ids"]), -1, 2),
        presence_mask=np.array(rec["presence_mask"], dtype=bool),
        loss_mask=np.array(rec["loss_mask"], dtype=bool),
        origin=tuple(rec["origin"]),
    )


def save_split(split, path):
    doc = {
        "schema_version": SAMPLE_SCHEMA_VERSION,
        "provenance": split.provenance,
        "splits": {name: [sample_to_record(s) for s in getattr(split, name)] for name in ("train", "val", "test")},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_split(path):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read dataset cache {path}: {exc}") from exc
    if doc.get("schema_version") != SAMPLE_SCHEMA_VERSION:
        raise IoFailure(f"{path}: unsupported sample schema {doc.get('schema_version')}")
    parts = {name: [sample_from_record(r) for r in doc["splits"].get(name, [])] for name in ("train", "val", "test")}
    return DatasetSplit(provenance=doc.get("provenance", {}), **parts)
