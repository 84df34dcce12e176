"""
Retention maps
==============

Writes one PPM per camera per step: kept patches in their class colour,
pruned ones dimmed. Any image viewer that reads netpbm will open them.
"""

import sys
from pathlib import Path

from vlaprune.config import config_from_dict
from vlaprune.harness import read_ppm, render_episode

out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/retention")
cfg = config_from_dict({
    "model": {"num_layers": 4, "hidden_dim": 32, "num_heads": 4, "ffn_dim": 64},
    "scene": {"grid_size": 12, "feature_dim": 32},
    "steps": 10,
})
paths = render_episode(cfg, out_dir, final=True)
print(len(paths), "images in", out_dir)
print(read_ppm(paths[0]).shape)
