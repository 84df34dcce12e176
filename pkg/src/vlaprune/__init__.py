"""Action-aware visual token pruning for a toy vision-language-action decoder."""

from .controller import ActionDelta, ControllerState, classify
from .dynamic_pruner import ImportanceState, LayerScheduleConfig, layer_prune, update_importance
from .flops import exact_reduction, layer_flops, paper_reduction_estimate
from .model import (
    AttentionBiasSpec,
    AttentionRecord,
    ModelConfig,
    TokenLayout,
    build_model,
    forward_masked,
    forward_resume,
)
from .pipeline import STRATEGIES, Pipeline, PrunerConfig, run_episode
from .scoring import TokenScoreVector, hit_rate, task_attention_score, top_k_tokens
from .sim import SceneSpec, TrajectorySpec, action_oracle, attention_bias_for, generate_episode
from .static_pruner import compose_static, select_dynamic, select_global, select_local

__version__ = "0.1.0"
