"""Synthetic interacting traffic for desk-scale experiments.

Scenes are small intersections simulated at the working rate. Main-road
agents drive straight at constant speed; crossing agents approach the main
road and yield (brake to a stop before the conflict point) while a main-road
agent is about to pass, then accelerate again. Pedestrians walk straight at
the roadside. Positions carry small Gaussian observation noise.
"""
from __future__ import annotations

import numpy as np

from .data import AgentTrack, AgentType, normalize_sample, wrap_heading, window_sequences

DT = 0.4  # seconds per frame at 2.5 Hz


def _headings(xy):
    d = np.diff(xy, axis=0)
    h = np.arctan2(d[:, 1], d[:, 0])
    return wrap_heading(np.concatenate([h[:1], h]))


def _yielding_path(main_agents, start, direction, v_des, num_frames, gap_s=2.5, clear_m=3.0):
    """Positions of an agent crossing the main road (the line y = 0).

    While any main-road agent is within ``gap_s`` seconds of the crossing (or
    less than ``clear_m`` past it) the agent brakes to stop 4 m before the road,
    otherwise it accelerates back to ``v_des``.
    """
    stop_dist, decel, accel = 4.0, 3.0, 1.5
    pos = np.zeros((num_frames, 2))
    p = np.array(start, dtype=float)
    v = v_des
    for t in range(num_frames):
        pos[t] = p
        to_road = -float(np.dot(p, direction))
        danger = False
        for x0, sign, speed in main_agents:
            approach = -sign * (x0 + sign * speed * DT * t)  # meters before the crossing
            if -clear_m < approach < speed * gap_s:
                danger = True
        if danger and to_road > stop_dist - 0.5:
            v = min(v, np.sqrt(2 * decel * max(to_road - stop_dist, 0.0)))
        else:
            v = min(v + accel * DT, v_des)
        p = p + direction * v * DT
    return pos


def interacting_tracks(rng, recording_id, num_frames=20, crossing_heavy=False, noise=0.03):
    """One synthetic recording: main-road traffic, crossing/yielding agents, pedestrians."""
    agents = []
    main_agents = []
    n_main = 1 if crossing_heavy else int(rng.integers(1, 3))
    for k in range(n_main):
        sign = 1 if k % 2 == 0 else -1
        speed = rng.uniform(5.0, 9.0)
        lane_y = -1.75 * sign
        # time at which this agent reaches the crossing point, in frames
        # crossing-heavy scenes put the conflict inside the prediction window
        t_cross = rng.uniform(9, 17) if crossing_heavy else rng.uniform(4, num_frames + 2)
        x0 = -sign * speed * DT * t_cross
        t = np.arange(num_frames)
        xy = np.stack([x0 + sign * speed * DT * t, np.full(num_frames, lane_y)], 1)
        main_agents.append((x0, sign, speed))
        agents.append((AgentType.VEHICLE, xy))

    n_cross = 1 if crossing_heavy else 1 + int(rng.random() < 0.5)
    for k in range(n_cross):
        sign = 1 if k % 2 == 0 else -1
        atype = AgentType.BICYCLE if rng.random() < 0.4 else AgentType.VEHICLE
        v_des = rng.uniform(3.0, 6.0) if atype is AgentType.BICYCLE else rng.uniform(4.0, 8.0)
        lateral = 1.75 * sign
        direction = np.array([0.0, float(sign)])
        if crossing_heavy:
            # free-flow arrival at the road close to a main-road agent's crossing
            _, _, speed_m = main_agents[k % n_main]
            t_main = abs(main_agents[k % n_main][0]) / (speed_m * DT)
            dist = v_des * DT * (t_main + rng.uniform(-2.0, 2.0))
        else:
            dist = rng.uniform(12.0, 35.0)
        start = np.array([lateral, -sign * dist])
        # crossing-heavy scenes use tight gaps so near misses are common
        gap = (rng.uniform(0.8, 1.5), 1.0) if crossing_heavy else (2.5, 3.0)
        agents.append((atype, _yielding_path(main_agents, start, direction, v_des, num_frames, *gap)))

    n_ped = 0 if crossing_heavy else int(rng.integers(0, 3))
    for _ in range(n_ped):
        speed = rng.uniform(1.0, 1.8)
        ang = rng.choice([0.0, np.pi / 2, np.pi, -np.pi / 2]) + rng.normal(scale=0.05)
        d = np.array([np.cos(ang), np.sin(ang)])
        start = rng.uniform(-10, 10, size=2)
        if crossing_heavy:
            # aim pedestrians across the main road near the junction
            start = np.array([rng.uniform(-4, 4), rng.choice([-5.0, 5.0])])
            d = np.array([rng.normal(scale=0.3), -np.sign(start[1])])
            d /= np.linalg.norm(d)
        t = np.arange(num_frames)[:, None]
        agents.append((AgentType.PEDESTRIAN, start + d * speed * DT * t))

    tracks = []
    for aid, (atype, xy) in enumerate(agents):
        noisy = xy + rng.normal(scale=noise, size=xy.shape)
        tracks.append(
            AgentTrack(
                recording_id=recording_id,
                agent_id=aid,
                agent_type=atype,
                frames=np.arange(num_frames, dtype=np.int64),
                xy=noisy,
                heading=_headings(xy),
            )
        )
    return tracks


def make_tracks(num_scenes, seed=0, crossing_heavy=False, num_frames=20, prefix="syn"):
    rng = np.random.default_rng(seed)
    tracks = []
    for k in range(num_scenes):
        tracks.extend(interacting_tracks(rng, f"{prefix}{k:04d}", num_frames, crossing_heavy))
    return tracks


def make_samples(num_scenes, seed=0, t_obs=8, t_pred=12, crossing_heavy=False, prefix="syn"):
    """Normalized samples, one window per synthetic recording."""
    tracks = make_tracks(num_scenes, seed, crossing_heavy, t_obs + t_pred, prefix)
    return [normalize_sample(s) for s in window_sequences(tracks, t_obs, t_pred, stride=t_obs + t_pred)]
