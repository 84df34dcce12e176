"""
Ablation table on a handful of episodes
=======================================

Uses a shallow model so it finishes in a minute or so. Swap in the default
32-layer config for timings that mean something.
"""

from vlaprune.config import config_from_dict
from vlaprune.harness import run_suite

cfg = config_from_dict({
    "model": {"num_layers": 6, "hidden_dim": 32, "num_heads": 4, "ffn_dim": 64},
    "scene": {"grid_size": 10, "feature_dim": 32},
    "episodes": 3,
    "strategies": ["none", "static", "static+layer", "full", "local_only", "global_only", "random"],
})
out = run_suite(cfg)

# %%
def fmt(x):
    return "  -  " if x is None else f"{x:.3f}"


for name, s in out["summary"]["strategies"].items():
    print(f"{name:13s} removed {fmt(s['static_removed_fraction'])}  error {fmt(s['action_error'])}  "
          f"recall {fmt(s['recall_final'])}  flops saved {fmt(s['flops_reduction'])}")

# %%
# random keeps as many tokens per view as the full selection did in the same step
print({k: round(v["speedup"], 2) for k, v in out["timing"].items()})
