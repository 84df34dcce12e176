"""One generation step of the action-aware pruning pipeline, and the episode loop.

Per step: classify the previous action, run layers 1-2 over every token,
cut the visual tokens down to global | dynamic | local, then run the rest of
the decoder while an EMA importance score trims 10% of the remaining visual
tokens at each scheduled layer. The aggregate attention each token collected
becomes the next step's global memory.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .controller import COARSE, ActionDelta, ControllerState, classify
from .dynamic_pruner import (
    ImportanceState,
    LayerScheduleConfig,
    apply_update,
    confidence_from_attention,
    layer_prune,
)
from .flops import exact_reduction
from .model import AttentionRecord, FlopCounter, Model, TokenLayout
from .scoring import TEXT_TO_VISUAL, TokenScoreVector, hit_rate, scores_from_attention
from .sim import (
    Episode,
    action_oracle,
    attention_bias_for,
    retained_patches,
    visual_embeddings,
)
from .static_pruner import (
    OFFSET_PROSE,
    FrameHistory,
    GlobalAttentionMemory,
    compose_static,
    select_dynamic,
    select_global,
    select_local,
)

SCHEMA_VERSION = 1


@dataclass
class PrunerConfig:
    alpha: float = 1.0
    tau: float = 0.95
    k_d: int = 16
    steepness: float = 0.5
    epsilon: float = 1e-6
    beta: float = 0.2
    retention: float = 0.9
    update_layers: Optional[tuple] = None
    prune_layers: Optional[tuple] = None
    v_t_th: float = 0.03
    v_r_th: float = 0.05
    v_z_th: float = 0.0
    offset_variant: str = OFFSET_PROSE
    speed_scale: float = 1.0
    global_aggregation: str = "mean"   # or "last"
    direction: str = TEXT_TO_VISUAL
    history_capacity: int = 12
    hit_rate_k: int = 20

    def __post_init__(self):
        if self.k_d < 0:
            raise ValueError("k_d must be non-negative")
        if not -1.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [-1, 1]")
        if self.global_aggregation not in ("mean", "last"):
            raise ValueError("global_aggregation must be 'mean' or 'last'")

    def schedule(self, num_layers: int) -> LayerScheduleConfig:
        default = LayerScheduleConfig.default(num_layers)
        return LayerScheduleConfig(
            self.update_layers if self.update_layers is not None else default.update_layers,
            self.prune_layers if self.prune_layers is not None else default.prune_layers,
            retention=self.retention, steepness=self.steepness,
            epsilon=self.epsilon, beta=self.beta,
        )

    def controller(self) -> ControllerState:
        return ControllerState(v_t_th=self.v_t_th, v_r_th=self.v_r_th, v_z_th=self.v_z_th, alpha=self.alpha)


@dataclass(frozen=True)
class Strategy:
    static: bool = True
    layer: bool = True
    controller: bool = True
    use_global: bool = True
    use_dynamic: bool = True
    use_local: bool = True
    random_equal: bool = False


# ablation rows and baselines
STRATEGIES = {
    "none": Strategy(static=False, layer=False, controller=False),
    "static": Strategy(layer=False, controller=False),
    "static+layer": Strategy(controller=False),
    "full": Strategy(),
    "local_only": Strategy(use_global=False, use_dynamic=False),
    "global_only": Strategy(use_local=False, use_dynamic=False),
    "random": Strategy(random_equal=True),
}


@dataclass
class GenerationResult:
    action_chunk: np.ndarray
    action: ActionDelta
    row: dict
    timing: dict
    retained_static: np.ndarray
    retained_final: np.ndarray
    record: Optional[AttentionRecord]


class PruneViolation(RuntimeError):
    """An invariant of the pruning pipeline was broken."""


@dataclass
class Pipeline:
    model: Model
    layout: TokenLayout
    config: PrunerConfig = field(default_factory=PrunerConfig)
    strategy: Strategy = field(default_factory=Strategy)
    seed: int = 0

    def __post_init__(self):
        self.schedule = self.config.schedule(self.model.cfg.num_layers)
        self.memory = GlobalAttentionMemory()
        self.history = FrameHistory(self.config.history_capacity)
        self.controller = self.config.controller()
        self.last_action: Optional[ActionDelta] = None
        self.rng = np.random.default_rng([self.seed, 3])
        self._text = self.model.text_embeddings(self.layout.num_text)
        n_action = self.layout.action_range[1] - self.layout.action_range[0]
        self._action = self.model.action_embeddings(n_action)
        head_rng = np.random.default_rng([self.model.cfg.seed, 5])
        self._head = head_rng.normal(0.0, 1.0 / np.sqrt(self.model.cfg.hidden_dim), (self.model.cfg.hidden_dim, 7))

    def embeddings(self, grids: dict) -> np.ndarray:
        return np.concatenate([visual_embeddings(grids, self.layout), self._text, self._action])

    def _static_selection(self, record, step: int, k_base: int):
        cfg, st, layout = self.config, self.strategy, self.layout
        empty = np.zeros(0, dtype=np.int64)
        v_global = select_global(self.memory, k_base, layout) if st.use_global else empty
        v_dynamic = (
            select_dynamic(self.history, step, self.controller.v_t, cfg.tau, cfg.k_d, layout,
                           cfg.offset_variant, cfg.speed_scale)
            if st.use_dynamic else empty
        )
        v_local = select_local(record, layout, k_base, (1, 2), cfg.direction) if st.use_local else empty
        return compose_static(v_global, v_dynamic, v_local, layout)

    def _random_equal(self, kept_visual: np.ndarray) -> np.ndarray:
        out = []
        for view in self.layout.views:
            idx = self.layout.view_indices(view)
            n = int(np.isin(kept_visual, idx).sum())
            out.append(np.sort(self.rng.choice(idx, size=n, replace=False)))
        return np.concatenate(out)

    def run_generation(self, step: int, grids: dict, bias=None, truth=None, scene=None) -> GenerationResult:
        """Algorithm flow for one action generation; updates memory and controller."""
        cfg, st, layout, model = self.config, self.strategy, self.layout, self.model
        num_layers = model.cfg.num_layers
        protected = layout.protected_indices()

        # nothing has been executed before the first generation
        state = self.controller if self.last_action is None else classify(self.last_action, self.controller)
        if not st.controller:
            state = replace(state, mode=COARSE)
        self.controller = state
        k_base = state.k_base
        self.history.push(step, grids)

        t0 = time.perf_counter()
        counter = FlopCounter()
        hidden = self.embeddings(grids)
        positions = np.arange(layout.seq_len)
        score_sum = np.zeros(layout.num_visual)
        score_cnt = np.zeros(layout.num_visual)
        last_score = np.zeros(layout.num_visual)
        record = AttentionRecord()
        trajectory = []

        def absorb(scores: TokenScoreVector):
            score_sum[scores.indices] += scores.scores
            score_cnt[scores.indices] += 1
            last_score[:] = 0.0
            last_score[scores.indices] = scores.scores

        for layer in (1, 2):
            trajectory.append(positions.size)
            hidden, attn = model.apply_layer(layer, hidden, positions, bias, counter)
            record.add(layer, attn, positions)
            absorb(scores_from_attention(attn, positions, layout, layer, cfg.direction))

        static_on = st.static and not self.memory.empty
        stage_counts = {}
        if static_on:
            result = self._static_selection(record, step, k_base)
            kept_visual = result.retained_visual
            if st.random_equal:
                kept_visual = self._random_equal(kept_visual)
                stage_counts["random"] = int(kept_visual.size)
            else:
                stage_counts.update(result.stage_counts())
            keep = np.isin(positions, kept_visual) | ~layout.is_visual(positions)
            positions, hidden = positions[keep], hidden[keep]
        else:
            stage_counts["unpruned"] = layout.num_visual
        stage_counts["protected"] = int(protected.size)
        retained_static = positions.copy()

        layer_on = static_on and st.layer
        importance = ImportanceState.init(positions[layout.is_visual(positions)], cfg.beta) if layer_on else None
        for layer in range(3, num_layers + 1):
            trajectory.append(positions.size)
            hidden, attn = model.apply_layer(layer, hidden, positions, bias, counter)
            scores = scores_from_attention(attn, positions, layout, layer, cfg.direction)
            absorb(scores)
            if layer == num_layers:
                record.add(layer, attn, positions)
            if layer_on and layer in self.schedule.update_layers:
                conf = confidence_from_attention(attn, cfg.epsilon)
                apply_update(importance, scores, conf, layer, cfg.steepness)
            if layer_on and layer in self.schedule.prune_layers:
                kept = layer_prune(importance, self.schedule, layer)
                keep = np.isin(positions, kept) | ~layout.is_visual(positions)
                positions, hidden = positions[keep], hidden[keep]
            if not np.isin(protected, positions).all():
                raise PruneViolation(f"text/action token dropped at layer {layer}")

        lo, hi = layout.action_range
        action_hidden = model.final_hidden(hidden[(positions >= lo) & (positions < hi)])
        chunk = action_hidden @ self._head
        elapsed = time.perf_counter() - t0

        if cfg.global_aggregation == "mean":
            agg = np.where(score_cnt > 0, score_sum / np.maximum(score_cnt, 1), 0.0)
        else:
            agg = last_score
        self.memory.update(TokenScoreVector(layout.visual_indices(), agg, "aggregate"))

        final_visual = positions[layout.is_visual(positions)]
        static_visual = retained_static[layout.is_visual(retained_static)]
        row = {
            "step": step,
            "mode": state.mode,
            "k_base": k_base,
            "v_t": state.v_t,
            "v_r": state.v_r,
            "n_visual": layout.num_visual,
            "stage_counts": stage_counts,
            "n_retain": int(retained_static.size),
            "n_retain_visual": int(static_visual.size),
            "static_removed_fraction": 1.0 - static_visual.size / layout.num_visual,
            "final_visual": int(final_visual.size),
            "token_trajectory": trajectory,
            "hit_rate": hit_rate((1, 2), num_layers, record, layout,
                                 min(cfg.hit_rate_k, int(final_visual.size)) or 1, cfg.direction),
            "flops_measured": counter.total,
        }
        breakdown = exact_reduction(trajectory, model.cfg.hidden_dim, model.cfg.ffn_dim,
                                    full_tokens=layout.seq_len, num_layers=num_layers)
        row["flops_analytical"] = breakdown.pruned_flops
        row["flops_full"] = breakdown.full_flops
        row["flops_reduction"] = breakdown.reduction_fraction

        executed = ActionDelta.from_array(chunk[0])
        if truth is not None and scene is not None:
            retained = retained_patches(layout, final_visual)
            executed, err = action_oracle(grids, truth, retained, scene)
            important = truth.important_tokens(layout)
            row["action_error"] = err
            row["recall_static"] = float(np.isin(important, static_visual).mean()) if important.size else 1.0
            row["recall_final"] = float(np.isin(important, final_visual).mean()) if important.size else 1.0
        self.last_action = executed
        self._check(row)
        return GenerationResult(chunk, executed, row, {"step": step, "forward_seconds": elapsed},
                                retained_static, positions, record)

    def _check(self, row: dict) -> None:
        if sum(row["stage_counts"].values()) != row["n_retain"]:
            raise PruneViolation(f"stage counts {row['stage_counts']} do not sum to {row['n_retain']}")


def run_episode(model: Model, episode: Episode, layout: TokenLayout, config: PrunerConfig,
                strategy: Strategy, bias_margin: float = 6.0, seed: int = 0,
                keep_records: bool = False) -> tuple:
    """Run every step of ``episode``; returns (rows, timings, results).

    Attention records hold full (heads, n, n) matrices, tens of megabytes per
    step at the default size, so they are dropped unless ``keep_records``.
    """
    if episode.scene.feature_dim != model.cfg.hidden_dim:
        raise ValueError(f"scene feature_dim {episode.scene.feature_dim} != model hidden_dim {model.cfg.hidden_dim}")
    pipe = Pipeline(model, layout, config, strategy, seed)
    rows, timings, results = [], [], []
    for s in episode.steps:
        bias = attention_bias_for(episode, s.step, layout, bias_margin)
        res = pipe.run_generation(s.step, s.grids, bias, s.truth, episode.scene)
        res.row["phase"] = s.phase
        rows.append(res.row)
        timings.append(res.timing)
        if not keep_records:
            res.record = None
        results.append(res)
    return rows, timings, results
