"""Minimal decoder-only transformer that runs over a retained subset of tokens.

The model is deliberately small and untrained. All arithmetic is float64.
Pruned tokens are *removed* from the computation (the active set is compacted)
rather than masked with -inf, so the work done really shrinks with the
sequence. Rotary position indices are the tokens' original positions, which
therefore survive pruning unchanged.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

ROPE_BASE = 10000.0
NORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 32
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_layers < 3:
            # static pruning consumes the first two layers
            raise ValueError("num_layers must be >= 3")
        if self.hidden_dim % self.num_heads:
            raise ValueError(
                f"hidden_dim={self.hidden_dim} not divisible by num_heads={self.num_heads}"
            )
        if self.head_dim % 2:
            raise ValueError("head_dim must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


@dataclass(frozen=True)
class TokenLayout:
    """Index map of the model sequence: visual views, then text, then action slots."""

    view_ranges: tuple  # ((view_id, start, end), ...)
    text_range: tuple
    action_range: tuple

    def __post_init__(self):
        cursor = 0
        for view, start, end in self.view_ranges:
            if start != cursor or end <= start:
                raise ValueError(f"view {view!r} range ({start}, {end}) is not contiguous")
            cursor = end
        for name in ("text_range", "action_range"):
            start, end = getattr(self, name)
            if start != cursor or end < start:
                raise ValueError(f"{name} ({start}, {end}) is not contiguous")
            cursor = end

    @classmethod
    def build(cls, views: Sequence[tuple], num_text: int, num_action: int) -> "TokenLayout":
        """``views`` is a sequence of ``(view_id, num_tokens)``."""
        ranges = []
        cursor = 0
        for view, n in views:
            ranges.append((view, cursor, cursor + int(n)))
            cursor += int(n)
        text = (cursor, cursor + num_text)
        action = (text[1], text[1] + num_action)
        return cls(tuple(ranges), text, action)

    @property
    def seq_len(self) -> int:
        return self.action_range[1]

    @property
    def num_visual(self) -> int:
        return self.text_range[0]

    @property
    def num_text(self) -> int:
        return self.text_range[1] - self.text_range[0]

    @property
    def views(self) -> list:
        return [v for v, _, _ in self.view_ranges]

    def view_indices(self, view) -> np.ndarray:
        for v, start, end in self.view_ranges:
            if v == view:
                return np.arange(start, end)
        raise KeyError(view)

    def visual_indices(self) -> np.ndarray:
        return np.arange(0, self.num_visual)

    def text_indices(self) -> np.ndarray:
        return np.arange(*self.text_range)

    def action_indices(self) -> np.ndarray:
        return np.arange(*self.action_range)

    def protected_indices(self) -> np.ndarray:
        """Text and action positions; never prunable."""
        return np.arange(self.text_range[0], self.action_range[1])

    def is_visual(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return (idx >= 0) & (idx < self.num_visual)


@dataclass
class AttentionBiasSpec:
    """Additive pre-softmax bias on key positions, applied to selected query rows.

    ``key_bias`` and ``query_mask`` are indexed by original position.
    """

    key_bias: np.ndarray
    query_mask: np.ndarray

    def __post_init__(self):
        self.key_bias = np.asarray(self.key_bias, dtype=np.float64)
        self.query_mask = np.asarray(self.query_mask, dtype=bool)
        if self.key_bias.shape != self.query_mask.shape:
            raise ValueError("key_bias and query_mask must have the same length")
        if not np.all(np.isfinite(self.key_bias)):
            raise ValueError("attention bias must be finite")

    @classmethod
    def zeros(cls, layout: TokenLayout) -> "AttentionBiasSpec":
        mask = np.zeros(layout.seq_len, dtype=bool)
        mask[layout.text_indices()] = True
        return cls(np.zeros(layout.seq_len), mask)


@dataclass
class AttentionRecord:
    """Captured attention weights, one (heads, n, n) array per layer.

    ``positions[l]`` maps active row/column index -> original position.
    """

    weights: dict = field(default_factory=dict)
    positions: dict = field(default_factory=dict)

    @property
    def layers(self) -> list:
        return sorted(self.weights)

    def add(self, layer: int, weights: np.ndarray, positions: np.ndarray) -> None:
        self.weights[layer] = weights
        self.positions[layer] = positions

    def require(self, layer: int) -> tuple:
        if layer not in self.weights:
            raise KeyError(f"layer {layer} was not captured (have {self.layers})")
        return self.weights[layer], self.positions[layer]


@dataclass
class FlopCounter:
    """Counts multiply-accumulates in matrix products, plus one unit per
    softmax entry and per normalised element."""

    total: int = 0
    per_layer: dict = field(default_factory=dict)

    def add(self, layer: int, n: int) -> None:
        self.total += n
        self.per_layer[layer] = self.per_layer.get(layer, 0) + n


@dataclass
class Checkpoint:
    """Hidden states of the active tokens after ``layer`` layers."""

    hidden: np.ndarray
    positions: np.ndarray
    layer: int
    fingerprint: str


class Layer:
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        d, f = cfg.hidden_dim, cfg.ffn_dim
        resid = 1.0 / np.sqrt(2.0 * cfg.num_layers)
        self.wq = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
        self.wk = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
        self.wv = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
        self.wo = rng.normal(0.0, resid / np.sqrt(d), (d, d))
        self.w1 = rng.normal(0.0, 1.0 / np.sqrt(d), (d, f))
        self.w2 = rng.normal(0.0, resid / np.sqrt(f), (f, d))
        self.attn_gain = np.ones(d)
        self.ffn_gain = np.ones(d)
        self.wqkv = np.concatenate([self.wq, self.wk, self.wv], axis=1)

    def params(self) -> list:
        return [self.wq, self.wk, self.wv, self.wo, self.w1, self.w2, self.attn_gain, self.ffn_gain]


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS) * gain


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def rope_tables(positions: np.ndarray, head_dim: int) -> tuple:
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half) / half)
    angles = positions[:, None].astype(np.float64) * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: (heads, n, head_dim); rotate first/second halves as pairs
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


class Model:
    """Decoder-only transformer; parameters are immutable after construction."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.layers = [Layer(rng, cfg) for _ in range(cfg.num_layers)]
        self.final_gain = np.ones(cfg.hidden_dim)
        # embedding tables for the instruction and the empty action slots
        self._text_rng_seed = int(rng.integers(2**31))
        self._action_rng_seed = int(rng.integers(2**31))
        self.fingerprint = self.checksum()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            for p in layer.params():
                h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def text_embeddings(self, num_text: int) -> np.ndarray:
        rng = np.random.default_rng(self._text_rng_seed)
        return rng.normal(0.0, 1.0, (num_text, self.cfg.hidden_dim))

    def action_embeddings(self, num_action: int) -> np.ndarray:
        rng = np.random.default_rng(self._action_rng_seed)
        return rng.normal(0.0, 1.0, (num_action, self.cfg.hidden_dim))

    def apply_layer(
        self,
        layer: int,
        hidden: np.ndarray,
        positions: np.ndarray,
        bias: Optional[AttentionBiasSpec] = None,
        counter: Optional[FlopCounter] = None,
    ) -> tuple:
        """Apply 1-based ``layer`` to the active rows. Returns (hidden, attention)."""
        cfg = self.cfg
        p = self.layers[layer - 1]
        n, d = hidden.shape
        h, dh = cfg.num_heads, cfg.head_dim

        x = rms_norm(hidden, p.attn_gain)
        qkv = x @ p.wqkv
        q, k, v = (qkv[:, i * d:(i + 1) * d].reshape(n, h, dh).transpose(1, 0, 2) for i in range(3))
        cos, sin = rope_tables(positions, dh)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)

        logits = (q @ k.transpose(0, 2, 1)) / np.sqrt(dh)
        if bias is not None:
            rows = bias.query_mask[positions]
            if rows.any():
                logits[:, rows, :] += bias.key_bias[positions][None, None, :]
        logits += np.where(positions[None, :] > positions[:, None], -np.inf, 0.0)
        logits -= logits.max(axis=-1, keepdims=True)
        attn = np.exp(logits, out=logits)
        attn /= attn.sum(axis=-1, keepdims=True)

        ctx = (attn @ v).transpose(1, 0, 2).reshape(n, d)
        hidden = hidden + ctx @ p.wo
        y = rms_norm(hidden, p.ffn_gain)
        hidden = hidden + silu(y @ p.w1) @ p.w2

        if counter is not None:
            f = cfg.ffn_dim
            macs = 4 * n * d * d + 2 * n * n * d + 2 * n * d * f
            counter.add(layer, macs + h * n * n + 2 * n * d)
        return hidden, attn

    def final_hidden(self, hidden: np.ndarray) -> np.ndarray:
        return rms_norm(hidden, self.final_gain)


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)


@dataclass
class ForwardResult:
    action_hidden: np.ndarray
    record: AttentionRecord
    checkpoint: Checkpoint
    flops: FlopCounter


def as_index_array(indices) -> np.ndarray:
    """Sorted unique int64 array from any iterable of indices."""
    if isinstance(indices, (set, frozenset)):
        indices = sorted(indices)
    return np.unique(np.asarray(indices, dtype=np.int64).ravel())


def _check_retained(layout: TokenLayout, retained) -> np.ndarray:
    retained = as_index_array(retained)
    if retained.size and (retained[0] < 0 or retained[-1] >= layout.seq_len):
        raise IndexError(f"retained index out of range [0, {layout.seq_len})")
    missing = np.setdiff1d(layout.protected_indices(), retained)
    if missing.size:
        raise ValueError(f"text/action tokens cannot be pruned: {missing[:8].tolist()}")
    return retained


def run_layers(
    model: Model,
    hidden: np.ndarray,
    positions: np.ndarray,
    first: int,
    last: int,
    bias: Optional[AttentionBiasSpec] = None,
    capture_layers: Iterable[int] = (),
    counter: Optional[FlopCounter] = None,
    record: Optional[AttentionRecord] = None,
) -> tuple:
    capture = set(capture_layers)
    record = AttentionRecord() if record is None else record
    for layer in range(first, last + 1):
        hidden, attn = model.apply_layer(layer, hidden, positions, bias, counter)
        if layer in capture:
            record.add(layer, attn, positions.copy())
    return hidden, record


def forward_dense(
    model: Model,
    embeddings: np.ndarray,
    positions: np.ndarray,
    bias: Optional[AttentionBiasSpec] = None,
    capture_layers: Iterable[int] = (),
    stop_layer: Optional[int] = None,
) -> tuple:
    """Plain forward over ``embeddings`` whose original positions are ``positions``."""
    stop = model.cfg.num_layers if stop_layer is None else stop_layer
    counter = FlopCounter()
    hidden, record = run_layers(
        model, np.asarray(embeddings, dtype=np.float64), np.asarray(positions), 1, stop,
        bias, capture_layers, counter,
    )
    return hidden, record, counter


def _action_rows(layout: TokenLayout, positions: np.ndarray) -> np.ndarray:
    lo, hi = layout.action_range
    return (positions >= lo) & (positions < hi)


def forward_masked(
    model: Model,
    embeddings: np.ndarray,
    layout: TokenLayout,
    retained=None,
    bias: Optional[AttentionBiasSpec] = None,
    capture_layers: Iterable[int] = (),
    stop_layer: Optional[int] = None,
) -> ForwardResult:
    """Forward pass touching only ``retained`` positions.

    With ``stop_layer`` the pass halts after that layer and the returned
    checkpoint can be continued with :func:`forward_resume`.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape != (layout.seq_len, model.cfg.hidden_dim):
        raise ValueError(
            f"embeddings shape {embeddings.shape} != ({layout.seq_len}, {model.cfg.hidden_dim})"
        )
    if retained is None:
        positions = np.arange(layout.seq_len)
    else:
        positions = _check_retained(layout, retained)
    stop = model.cfg.num_layers if stop_layer is None else int(stop_layer)
    if not 1 <= stop <= model.cfg.num_layers:
        raise ValueError(f"stop_layer {stop} outside [1, {model.cfg.num_layers}]")
    counter = FlopCounter()
    hidden, record = run_layers(
        model, embeddings[positions], positions, 1, stop, bias, capture_layers, counter
    )
    ckpt = Checkpoint(hidden, positions, stop, model.fingerprint)
    action = model.final_hidden(hidden[_action_rows(layout, positions)])
    return ForwardResult(action, record, ckpt, counter)


def forward_resume(
    model: Model,
    checkpoint: Checkpoint,
    layout: TokenLayout,
    retained=None,
    bias: Optional[AttentionBiasSpec] = None,
    capture_layers: Iterable[int] = (),
    stop_layer: Optional[int] = None,
) -> ForwardResult:
    """Continue a checkpointed pass from layer ``checkpoint.layer + 1`` on a subset."""
    if checkpoint.fingerprint != model.fingerprint:
        raise ValueError("checkpoint was produced by a different model")
    if retained is None:
        positions = checkpoint.positions
        hidden = checkpoint.hidden
    else:
        positions = _check_retained(layout, retained)
        keep = np.isin(checkpoint.positions, positions)
        if keep.sum() != positions.size:
            extra = np.setdiff1d(positions, checkpoint.positions)
            raise ValueError(f"retained set is not a subset of the checkpoint's active set: {extra[:8].tolist()}")
        hidden = checkpoint.hidden[keep]
    stop = model.cfg.num_layers if stop_layer is None else int(stop_layer)
    counter = FlopCounter()
    hidden, record = run_layers(
        model, hidden, positions, checkpoint.layer + 1, stop, bias, capture_layers, counter
    )
    ckpt = Checkpoint(hidden, positions, stop, model.fingerprint)
    action = model.final_hidden(hidden[_action_rows(layout, positions)])
    return ForwardResult(action, record, ckpt, counter)
