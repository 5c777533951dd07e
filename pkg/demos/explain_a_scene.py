"""
Which neighbours drove a prediction?
====================================

Integrated gradients over edge weights attributes one agent's predicted
displacement to the edges of its scene graph. The starting point is the
same graph with every spatial edge removed, so the scores sum to the effect
of interaction as a whole.

Run with ``python3 demos/explain_a_scene.py``; it writes ``scene.dot``,
which Graphviz can render with ``neato -n -Tpng scene.dot``.
"""

import numpy as np

from scout.attribution import attribute_scene, export_interaction_graph
from scout.data import DatasetSplit
from scout.layers import ModelConfig
from scout.losses import LossConfig
from scout.synthetic import make_samples
from scout.training import TrainConfig, train

samples = make_samples(120, seed=3)
cfg = ModelConfig(output_mode="velocities", hidden_dim=48, num_heads=3, dropout_p=0.0, attention_dropout_p=0.0)
result = train(DatasetSplit(samples[:100], samples[100:]), cfg, LossConfig(), TrainConfig(lr=3e-3, max_epochs=60, eval_every=10))

# pick the busiest scene and explain its first agent
scene = max(samples[100:], key=lambda s: s.num_agents)
graph, attr = attribute_scene(scene, result.params, cfg, node=0, n_steps=256)
print(f"scene with {scene.num_agents} agents, {len(attr.edges)} undirected edges")
print(f"target with interaction {attr.target_input:.4f}, without {attr.target_baseline:.4f}")
print(f"sum of edge scores {attr.ig_scores.sum():.4f} (completeness gap {attr.completeness_gap:.1e})")

order = np.argsort(-np.abs(attr.ig_scores))
att = attr.attention["layer1"].mean(axis=1)
print("\n edge   IG score   layer-1 attention")
for k in order:
    i, j = attr.edges[k]
    if i != j:
        print(f"{i:>2}-{j:<2}  {attr.ig_scores[k]:+9.4f}   {att[k]:.3f}")

export_interaction_graph(graph, attr, "scene.dot", fmt="dot")
print("\nwrote scene.dot")
