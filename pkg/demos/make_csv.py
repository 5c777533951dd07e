"""
Write a synthetic trajectory CSV for the command-line walkthrough
================================================================

Each recording is one small intersection: a vehicle on the main road, agents
crossing or yielding, and pedestrians. Usage::

    python3 demos/make_csv.py syn.csv [num_recordings] [seed]
"""

import sys

from scout.data import write_trajectories
from scout.synthetic import make_tracks

path = sys.argv[1] if len(sys.argv) > 1 else "syn.csv"
count = int(sys.argv[2]) if len(sys.argv) > 2 else 300
seed = int(sys.argv[3]) if len(sys.argv) > 3 else 1
write_trajectories(make_tracks(count, seed=seed), path)
print(f"wrote {count} recordings to {path}")
