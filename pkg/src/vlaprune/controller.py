"""Action-granularity controller: picks fine or coarse pruning budgets from
end-effector motion."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

FINE, COARSE = "fine", "coarse"

BASE_FINE = 40     # precise-mode top-K
BASE_COARSE = 24   # coarse-mode top-K

# prune ratio per task suite; the two sources disagree on Spatial and Long
ALPHA_PRESETS = {
    "paper-main": {"spatial": 1.0, "goal": 0.8, "object": 0.6, "long": 0.6},
    "paper-appendix": {"spatial": 0.6, "goal": 0.8, "object": 0.6, "long": 1.0},
}


@dataclass(frozen=True)
class ActionDelta:
    """One normalised action: translation, rotation (radians) and gripper command."""

    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    d_alpha: float = 0.0
    d_beta: float = 0.0
    d_gamma: float = 0.0
    gripper: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_array()):
            raise ValueError("action components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.d_alpha, self.d_beta, self.d_gamma, self.gripper])

    @classmethod
    def from_array(cls, a) -> "ActionDelta":
        return cls(*(float(v) for v in np.asarray(a, dtype=np.float64)[:7]))


def translational_speed(d: ActionDelta) -> float:
    return math.sqrt(d.dx ** 2 + d.dy ** 2 + d.dz ** 2)


def rotational_speed(d: ActionDelta) -> float:
    return math.sqrt(d.d_alpha ** 2 + d.d_beta ** 2 + d.d_gamma ** 2)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def base_budget(mode: str, alpha: float) -> int:
    return round_half_up(alpha * (BASE_FINE if mode == FINE else BASE_COARSE))


@dataclass(frozen=True)
class ControllerState:
    mode: str = COARSE
    v_t: float = 0.0
    v_r: float = 0.0
    v_t_th: float = 0.03
    v_r_th: float = 0.05
    v_z_th: float = 0.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.mode not in (FINE, COARSE):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.v_t_th <= 0 or self.v_r_th <= 0 or self.v_z_th < 0:
            raise ValueError("velocity thresholds must be positive")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")

    @property
    def k_base(self) -> int:
        return base_budget(self.mode, self.alpha)


def classify(d: ActionDelta, state: ControllerState) -> ControllerState:
    """Two-state machine: enter fine mode on slow, non-rising motion; leave it
    only when either speed exceeds its threshold."""
    v_t, v_r = translational_speed(d), rotational_speed(d)
    if state.mode == FINE:
        mode = COARSE if (v_t > state.v_t_th or v_r > state.v_r_th) else FINE
    else:
        enter = v_t < state.v_t_th and v_r < state.v_r_th and d.dz <= state.v_z_th
        mode = FINE if enter else COARSE
    return replace(state, mode=mode, v_t=v_t, v_r=v_r)
