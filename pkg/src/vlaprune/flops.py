"""Analytical FLOPs accounting for pruned decoder passes.

``layer_flops`` uses the multiply-accumulate convention (one MAC = one unit):
4LD^2 for the Q/K/V/O projections, 2L^2D for scores and weighted values and
2LDM for the two feed-forward products when M is the FFN width.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

from .dynamic_pruner import PAPER_PRUNE_LAYERS, retained_count


def layer_flops(L: int, D: int, M: int) -> int:
    if L < 0 or D < 0 or M < 0:
        raise ValueError("token count and widths must be non-negative")
    L, D, M = int(L), int(D), int(M)
    return 4 * L * D * D + 2 * L * L * D + 2 * L * D * M


def paper_reduction_estimate(num_layers: int, static_retention: float, dynamic_avg: float) -> float:
    """Linear estimate: all but the first two layers see ``static_retention *
    dynamic_avg`` of the tokens, and cost is taken as proportional to tokens."""
    for v in (static_retention, dynamic_avg):
        if not 0.0 < v <= 1.0:
            raise ValueError("retention factors must lie in (0, 1]")
    return 1.0 - (num_layers - 2) / num_layers * static_retention * dynamic_avg


@dataclass
class FlopsBreakdown:
    tokens: list
    flops: list
    full_flops: int
    pruned_flops: int
    reduction_fraction: float

    def to_dict(self) -> dict:
        return asdict(self)


def exact_reduction(
    trajectory: Sequence[int],
    hidden_dim: int,
    m: int,
    full_tokens: Optional[int] = None,
    num_layers: Optional[int] = None,
) -> FlopsBreakdown:
    """Sum ``layer_flops`` over the actual per-layer token counts."""
    tokens = [int(t) for t in trajectory]
    if num_layers is not None and len(tokens) != num_layers:
        raise ValueError(f"trajectory has {len(tokens)} layers, model has {num_layers}")
    if not tokens:
        raise ValueError("empty trajectory")
    full_tokens = tokens[0] if full_tokens is None else int(full_tokens)
    if any(t > full_tokens for t in tokens):
        raise ValueError("trajectory exceeds the full token count")
    per_layer = [layer_flops(t, hidden_dim, m) for t in tokens]
    full = layer_flops(full_tokens, hidden_dim, m) * len(tokens)
    pruned = sum(per_layer)
    return FlopsBreakdown(tokens, per_layer, full, pruned, 1.0 - pruned / full if full else 0.0)


def paper_trajectory(
    num_layers: int = 32,
    full_tokens: int = 600,
    static_retained: int = 285,
    prune_layers: Sequence[int] = PAPER_PRUNE_LAYERS,
    retention: float = 0.9,
    protected: int = 0,
) -> list:
    """Token count per layer: two full layers, the static cut from layer 3 and a
    ``retention`` step after each prune layer. ``protected`` tokens never shrink."""
    counts = [full_tokens, full_tokens]
    prunable = static_retained - protected
    for layer in range(3, num_layers + 1):
        counts.append(prunable + protected)
        if layer in prune_layers:
            prunable = retained_count(prunable, retention)
    return counts[:num_layers]


def dynamic_multipliers(prune_layers: Sequence[int] = PAPER_PRUNE_LAYERS, retention: float = 0.9) -> list:
    return [retention ** i for i in range(len(prune_layers) + 1)]


def dynamic_average(prune_layers: Sequence[int] = PAPER_PRUNE_LAYERS, retention: float = 0.9,
                    num_layers: Optional[int] = None) -> float:
    """Average retention of the layer-level stage.

    Without ``num_layers`` this is the plain mean of the step multipliers
    (1, r, r^2, ...); with it, each multiplier is weighted by the number of
    layers from 3 to ``num_layers`` it covers.
    """
    mults = dynamic_multipliers(prune_layers, retention)
    if num_layers is None:
        return sum(mults) / len(mults)
    total, level = 0.0, 0
    for layer in range(3, num_layers + 1):
        total += mults[level]
        if layer in prune_layers:
            level += 1
    return total / (num_layers - 2)
