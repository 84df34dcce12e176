"""Layer-level pruning driven by an exponential moving average of token importance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_expit, softmax

from .model import AttentionRecord, TokenLayout
from .scoring import TEXT_TO_VISUAL, TokenScoreVector, rank_order, task_attention_score

PAPER_PRUNE_LAYERS = (5, 10, 15, 20)
PAPER_DEPTH = 32


def scaled_prune_layers(num_layers: int) -> tuple:
    """The reference prune layers moved to the same relative depth."""
    if num_layers == PAPER_DEPTH:
        return PAPER_PRUNE_LAYERS
    out = []
    for layer in PAPER_PRUNE_LAYERS:
        scaled = min(max(round(layer * num_layers / PAPER_DEPTH), 3), num_layers)
        if scaled not in out:
            out.append(scaled)
    return tuple(out)


@dataclass
class LayerScheduleConfig:
    update_layers: tuple
    prune_layers: tuple
    retention: float = 0.9
    steepness: float = 0.5
    epsilon: float = 1e-6
    beta: float = 0.2

    def __post_init__(self):
        self.update_layers = tuple(sorted(set(int(l) for l in self.update_layers)))
        self.prune_layers = tuple(sorted(set(int(l) for l in self.prune_layers)))
        if not set(self.prune_layers) <= set(self.update_layers):
            raise ValueError("every prune layer must also be an update layer")
        if not 0.0 < self.retention <= 1.0:
            raise ValueError("retention must lie in (0, 1]")
        if self.steepness <= 0 or self.epsilon <= 0:
            raise ValueError("steepness and epsilon must be positive")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")

    @classmethod
    def default(cls, num_layers: int, **kw) -> "LayerScheduleConfig":
        return cls(tuple(range(3, num_layers + 1)), scaled_prune_layers(num_layers), **kw)


@dataclass
class ImportanceState:
    """EMA importance ``S_i`` for the visual tokens still in the pass."""

    indices: np.ndarray
    scores: np.ndarray
    beta: float = 0.2
    last_layer: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def init(cls, indices, beta: float = 0.2) -> "ImportanceState":
        indices = np.sort(np.asarray(indices, dtype=np.int64))
        return cls(indices, np.zeros(indices.size), beta)

    def __len__(self) -> int:
        return self.indices.size

    def keep(self, retained: np.ndarray) -> None:
        mask = np.isin(self.indices, retained)
        self.indices = self.indices[mask]
        self.scores = self.scores[mask]


def rank_weight(scores: TokenScoreVector, k: float) -> np.ndarray:
    """Sigmoid-of-rank weights aligned with ``scores.indices`` (rank 1 = best)."""
    if len(scores) == 0:
        raise ValueError("rank_weight needs at least one token")
    if k <= 0:
        raise ValueError("steepness must be positive")
    ranks = np.empty(len(scores))
    ranks[rank_order(scores)] = np.arange(1, len(scores) + 1)
    # normalised in log space so long tails do not underflow the sum
    return softmax(log_expit(-k * ranks))


def confidence_from_attention(weights: np.ndarray, epsilon: float = 1e-6) -> float:
    return float(np.mean(weights) / (np.std(weights) + epsilon))


def layer_confidence(record: AttentionRecord, layer: int, epsilon: float = 1e-6) -> float:
    """Mean over standard deviation of every attention weight in the layer."""
    weights, _ = record.require(layer)
    return confidence_from_attention(weights, epsilon)


def apply_update(state: ImportanceState, scores: TokenScoreVector, confidence: float,
                 layer: int, steepness: float) -> ImportanceState:
    scores = scores.subset(state.indices)
    if not np.array_equal(scores.indices, state.indices):
        raise ValueError("attention scores do not cover the tracked tokens")
    s = rank_weight(scores, steepness) * confidence
    state.scores = (1.0 - state.beta) * state.scores + state.beta * s
    state.last_layer = layer
    state.history.append(layer)
    return state


def update_importance(
    state: ImportanceState,
    record: AttentionRecord,
    layout: TokenLayout,
    layer: int,
    cfg: LayerScheduleConfig,
    direction: str = TEXT_TO_VISUAL,
) -> ImportanceState:
    if layer not in cfg.update_layers:
        raise ValueError(f"layer {layer} is not an update layer")
    scores = task_attention_score(record, layout, layer, direction)
    conf = layer_confidence(record, layer, cfg.epsilon)
    return apply_update(state, scores, conf, layer, cfg.steepness)


def retained_count(n: int, retention: float) -> int:
    # guard against 0.9 * n landing a hair above an integer
    return min(n, int(math.ceil(retention * n - 1e-9)))


def layer_prune(state: ImportanceState, cfg: LayerScheduleConfig, layer: int,
                retention: float = None) -> np.ndarray:
    """Keep the top ``ceil(retention * n)`` tokens by EMA score; drop the rest from ``state``."""
    if layer not in cfg.prune_layers:
        raise ValueError(f"layer {layer} is not a prune layer")
    retention = cfg.retention if retention is None else retention
    n_keep = retained_count(len(state), retention)
    order = np.lexsort((state.indices, -state.scores))
    kept = np.sort(state.indices[order[:n_keep]])
    state.keep(kept)
    return kept
