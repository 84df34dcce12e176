"""
Which visual tokens survive one generation
==========================================

Walks a single step of a small episode by hand: attention in the first two
layers, the three selection stages, then the per-layer EMA cut.
"""

import numpy as np

from vlaprune import (
    ModelConfig, PrunerConfig, STRATEGIES, build_model, forward_masked, run_episode,
)
from vlaprune.scoring import task_attention_score, top_k_per_view
from vlaprune.sim import SceneSpec, TrajectorySpec, attention_bias_for, generate_episode, layout_for, visual_embeddings

# %%
# a 10x10 grid per camera keeps everything quick
scene = SceneSpec(grid_size=10, feature_dim=32, seed=4)
episode = generate_episode(scene, TrajectorySpec())
layout = layout_for(scene, num_text=16, num_action=8)
model = build_model(ModelConfig(num_layers=8, hidden_dim=32, num_heads=4, ffn_dim=128))
print(layout.num_visual, "visual tokens,", layout.seq_len, "in total")

# %%
step = episode[5]
emb = np.concatenate([visual_embeddings(step.grids, layout),
                      model.text_embeddings(16), model.action_embeddings(8)])
rec = forward_masked(model, emb, layout, bias=attention_bias_for(episode, 5, layout),
                     capture_layers=(1, 2, 8)).record

for layer in (1, 2, 8):
    s = task_attention_score(rec, layout, layer)
    top = top_k_per_view(s, layout, 10)
    task = step.truth.task_tokens(layout)
    print(f"layer {layer}: {np.isin(top, task).mean():.0%} of the per-view top-10 are task patches")

# %%
# the full pipeline over the episode; step 0 always runs unpruned
rows, _, _ = run_episode(model, episode, layout, PrunerConfig(), STRATEGIES["full"])
for r in rows[:8]:
    print(r["step"], r["mode"], r["stage_counts"], "->", r["final_visual"], "visual after the last cut")
