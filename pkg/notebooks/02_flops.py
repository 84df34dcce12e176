"""
Linear estimate against the per-layer FLOP sum
==============================================
"""

from vlaprune.flops import (
    dynamic_average, exact_reduction, layer_flops, paper_reduction_estimate, paper_trajectory,
)

# %%
# 32 layers, the first two unpruned, 48% of tokens kept afterwards and a
# mean layer-level retention of 0.81
print("estimate", round(paper_reduction_estimate(32, 0.48, 0.81), 4))
print("plain mean of 1, .9, .81, .729, .6561:", round(dynamic_average(), 4))
print("layer-weighted mean:", round(dynamic_average(num_layers=32), 4))

# %%
# token counts layer by layer, 600 visual tokens, 285 after static pruning
traj = paper_trajectory()
print(traj)

# at 7B widths the quadratic attention term is small next to the
# projections, so cost tracks the token count closely but not exactly
exact = exact_reduction(traj, 4096, 11008)
print("exact", round(exact.reduction_fraction, 4))
print("one full layer", layer_flops(600, 4096, 11008))
