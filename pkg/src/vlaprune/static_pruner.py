"""Action-level static pruning.

Before the third decoder layer the visual tokens are cut down to the union of
three sets, chosen per view:

* global:  best tokens by the previous generation's aggregate attention score
* dynamic: patches that changed most against a velocity-chosen reference frame
* local:   best tokens by attention in the first two layers of this generation
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import AttentionRecord, TokenLayout, as_index_array
from .scoring import TEXT_TO_VISUAL, TokenScoreVector, task_attention_score, top_k_per_view, top_k_tokens

log = logging.getLogger(__name__)

GLOBAL, DYNAMIC, LOCAL = "global", "dynamic", "local"
STAGES = (GLOBAL, DYNAMIC, LOCAL)

# frame offset formula variants
OFFSET_PROSE = "prose"          # (-16/3) * (v/6) + 22/3
OFFSET_ALGORITHM = "algorithm"  # (-16/3) * v + 22/3


@dataclass
class GlobalAttentionMemory:
    """Aggregate scores recorded by the previous generation (empty at step 0)."""

    scores: Optional[TokenScoreVector] = None
    generation: int = 0

    @property
    def empty(self) -> bool:
        return self.scores is None

    def update(self, scores: TokenScoreVector) -> None:
        self.scores = scores
        self.generation += 1


@dataclass
class FrameHistory:
    """Ring buffer of ``(step, {view: grid})``."""

    capacity: int = 12
    frames: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 12:
            raise ValueError("frame history needs capacity >= 12")

    def __len__(self) -> int:
        return len(self.frames)

    def push(self, step: int, grids: dict) -> None:
        if self.frames and step <= self.frames[-1][0]:
            raise ValueError(f"frame steps must increase (got {step} after {self.frames[-1][0]})")
        self.frames.append((step, grids))
        while len(self.frames) > self.capacity:
            self.frames.popleft()

    def get(self, step: int) -> Optional[dict]:
        for s, grids in self.frames:
            if s == step:
                return grids
        return None

    def reference(self, current_step: int, offset: int) -> tuple:
        """Frame ``offset`` steps back, or the oldest one held."""
        grids = self.get(current_step - offset)
        if grids is not None:
            return current_step - offset, grids
        return self.frames[0]


@dataclass
class StaticPruneResult:
    v_global: np.ndarray
    v_dynamic: np.ndarray
    v_local: np.ndarray
    v_retain: np.ndarray   # retained visual tokens plus all text/action tokens
    v_prune: np.ndarray
    provenance: dict       # stage -> tokens first attributed to that stage

    @property
    def retained_visual(self) -> np.ndarray:
        return np.union1d(np.union1d(self.v_global, self.v_dynamic), self.v_local)

    def stage_counts(self) -> dict:
        return {stage: int(self.provenance[stage].size) for stage in STAGES}


def select_global(
    memory: GlobalAttentionMemory, k_g: int, layout: Optional[TokenLayout] = None
) -> np.ndarray:
    if memory.empty or k_g <= 0:
        return np.zeros(0, dtype=np.int64)
    if layout is None:
        return np.sort(top_k_tokens(memory.scores, k_g))
    return top_k_per_view(memory.scores, layout, k_g)


def patch_similarity(grid_a: np.ndarray, grid_b: np.ndarray) -> np.ndarray:
    """Cosine similarity of corresponding patches of two (N, N, F) grids."""
    grid_a = np.asarray(grid_a, dtype=np.float64)
    grid_b = np.asarray(grid_b, dtype=np.float64)
    if grid_a.shape != grid_b.shape:
        raise ValueError(f"grid shapes differ: {grid_a.shape} vs {grid_b.shape}")
    na = np.linalg.norm(grid_a, axis=-1)
    nb = np.linalg.norm(grid_b, axis=-1)
    dot = np.einsum("...f,...f->...", grid_a, grid_b)
    za, zb = na == 0, nb == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = dot / (na * nb)
    if za.any() or zb.any():
        log.warning("zero-norm patches: %d in a, %d in b", int(za.sum()), int(zb.sum()))
        sim = np.where(za & zb, 1.0, sim)
        sim = np.where(za ^ zb, 0.0, sim)
    return np.clip(sim, -1.0, 1.0)


def frame_offset(v_t: float, history_len: int, variant: str = OFFSET_PROSE) -> int:
    """Reference-frame distance from the end-effector speed, clamped to the history."""
    if v_t < 0:
        raise ValueError("speed must be non-negative")
    if variant == OFFSET_PROSE:
        raw = math.floor((-16.0 / 3.0) * (v_t / 6.0) + 22.0 / 3.0) + 4
    elif variant == OFFSET_ALGORITHM:
        raw = math.floor((-16.0 / 3.0) * v_t + 22.0 / 3.0) + 4
    else:
        raise ValueError(f"unknown frame offset variant {variant!r}")
    return int(min(max(raw, 1), max(history_len, 1)))


def low_k_dynamic(sim: np.ndarray, tau: float, k_d: int) -> np.ndarray:
    """Flat patch indices with similarity below ``tau``, at most ``k_d`` of the lowest."""
    flat = np.asarray(sim).ravel()
    candidates = np.flatnonzero(flat < tau)
    if k_d <= 0 or candidates.size == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((candidates, flat[candidates]))
    return np.sort(candidates[order[:k_d]])


def select_dynamic(
    history: FrameHistory,
    current_step: int,
    v_t: float,
    tau: float,
    k_d: int,
    layout: TokenLayout,
    variant: str = OFFSET_PROSE,
    speed_scale: float = 1.0,
) -> np.ndarray:
    """Token indices of the most changed patches in each view."""
    current = history.get(current_step)
    if current is None:
        raise ValueError(f"step {current_step} is not in the frame history")
    offset = frame_offset(v_t * speed_scale, len(history) - 1, variant)
    _, reference = history.reference(current_step, offset)
    picked = []
    for view in layout.views:
        sim = patch_similarity(current[view], reference[view])
        picked.append(layout.view_indices(view)[low_k_dynamic(sim, tau, k_d)])
    return np.sort(np.concatenate(picked)) if picked else np.zeros(0, dtype=np.int64)


def select_local(
    record: AttentionRecord,
    layout: TokenLayout,
    k_base: int,
    layers=(1, 2),
    direction: str = TEXT_TO_VISUAL,
) -> np.ndarray:
    """Union over the speculation layers of each layer's per-view top-``k_base``."""
    out = np.zeros(0, dtype=np.int64)
    for layer in layers:
        scores = task_attention_score(record, layout, layer, direction)
        out = np.union1d(out, top_k_per_view(scores, layout, k_base))
    return out


def compose_static(v_global, v_dynamic, v_local, layout: TokenLayout) -> StaticPruneResult:
    sets = [as_index_array(s) for s in (v_global, v_dynamic, v_local)]
    for name, s in zip(STAGES, sets):
        bad = s[~layout.is_visual(s)]
        if bad.size:
            raise ValueError(f"{name} set holds non-visual indices {bad[:8].tolist()}")
    visual = layout.visual_indices()
    kept = np.zeros(0, dtype=np.int64)
    provenance = {}
    for name, s in zip(STAGES, sets):
        provenance[name] = np.setdiff1d(s, kept)
        kept = np.union1d(kept, s)
    v_retain = np.union1d(kept, layout.protected_indices())
    v_prune = np.setdiff1d(visual, kept)
    return StaticPruneResult(sets[0], sets[1], sets[2], v_retain, v_prune, provenance)
