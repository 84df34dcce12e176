"""Task attention scores of visual tokens, top-k selection and hit rate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from .model import AttentionRecord, TokenLayout

# text-query rows attending to visual-key columns (the only non-zero direction
# in a causal decoder with text after the image)
TEXT_TO_VISUAL = "text_to_visual"
# the literal reading: visual-query rows attending to text-key columns
VISUAL_TO_TEXT = "visual_to_text"


@dataclass
class TokenScoreVector:
    """Per visual token score keyed by original index."""

    indices: np.ndarray
    scores: np.ndarray
    layer: Union[int, str] = "aggregate"

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.indices.shape != self.scores.shape:
            raise ValueError("indices and scores must align")

    def __len__(self) -> int:
        return self.indices.size

    def subset(self, keep: np.ndarray) -> "TokenScoreVector":
        mask = np.isin(self.indices, keep)
        return TokenScoreVector(self.indices[mask], self.scores[mask], self.layer)

    def as_dict(self) -> dict:
        return dict(zip(self.indices.tolist(), self.scores.tolist()))


def scores_from_attention(
    weights: np.ndarray,
    positions: np.ndarray,
    layout: TokenLayout,
    layer: Union[int, str] = "aggregate",
    direction: str = TEXT_TO_VISUAL,
) -> TokenScoreVector:
    """Mean attention between the instruction tokens and each active visual token,
    averaged over heads and text tokens."""
    positions = np.asarray(positions)
    lo, hi = layout.text_range
    text = np.flatnonzero((positions >= lo) & (positions < hi))
    visual = np.flatnonzero(layout.is_visual(positions))
    m = text.size
    if m == 0:
        raise ValueError("empty text range: task attention score is undefined")
    heads = weights.shape[0]
    if direction == TEXT_TO_VISUAL:
        block = weights[:, text][:, :, visual]          # (H, m, V)
        total = block.sum(axis=(0, 1))
    elif direction == VISUAL_TO_TEXT:
        block = weights[:, visual][:, :, text]          # (H, V, m)
        total = block.sum(axis=(0, 2))
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return TokenScoreVector(positions[visual], total / (heads * m), layer)


def task_attention_score(
    record: AttentionRecord, layout: TokenLayout, layer: int, direction: str = TEXT_TO_VISUAL
) -> TokenScoreVector:
    weights, positions = record.require(layer)
    return scores_from_attention(weights, positions, layout, layer, direction)


def rank_order(scores: TokenScoreVector) -> np.ndarray:
    """Positions into ``scores`` sorted best first; ties go to the lower index."""
    return np.lexsort((scores.indices, -scores.scores))


def top_k_tokens(scores: TokenScoreVector, k: int) -> np.ndarray:
    """Original indices of the ``k`` highest scores, best first."""
    if k < 0:
        raise ValueError("k must be non-negative")
    return scores.indices[rank_order(scores)[:k]]


def top_k_per_view(scores: TokenScoreVector, layout: TokenLayout, k: int) -> np.ndarray:
    """Apply the budget ``k`` independently inside each view; sorted result."""
    picked = []
    for view in layout.views:
        picked.append(top_k_tokens(scores.subset(layout.view_indices(view)), k))
    return np.sort(np.concatenate(picked)) if picked else np.zeros(0, dtype=np.int64)


def hit_rate(
    early_layers: Iterable[int],
    final_layer: int,
    record: AttentionRecord,
    layout: TokenLayout,
    k: int,
    direction: str = TEXT_TO_VISUAL,
) -> float:
    """Share of the final layer's top-k found in the union of the early layers' top-k."""
    if k <= 0:
        raise ValueError("k must be positive")
    final = set(top_k_tokens(task_attention_score(record, layout, final_layer, direction), k).tolist())
    early = set()
    for layer in early_layers:
        early.update(top_k_tokens(task_attention_score(record, layout, layer, direction), k).tolist())
    return len(early & final) / k
