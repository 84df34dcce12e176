"""Run configuration: JSON file + dotted overrides + environment output root."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .controller import ALPHA_PRESETS
from .model import ModelConfig
from .pipeline import STRATEGIES, PrunerConfig
from .sim import SceneSpec, TrajectorySpec, load_specs, scene_from_dict, trajectory_from_dict

OUTPUT_ENV = "VLAPRUNE_OUTPUT"

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    pruner: PrunerConfig = field(default_factory=PrunerConfig)
    specs: Optional[str] = None         # JSON file holding scene/trajectory
    preset: Optional[str] = None        # "paper-main" | "paper-appendix"
    task_suite: str = "spatial"
    strategies: tuple = ("full", "none", "random", "local_only", "global_only")
    episodes: int = 40
    seed: int = 0
    steps: Optional[int] = None         # truncate episodes; None runs every phase
    randomize_scenes: bool = True
    repetitions: int = 3                # timed forwards per measurement
    warmup: int = 1
    bias_margin: float = 6.0
    num_text: int = 16
    chunk: int = 8
    output_dir: str = "runs"
    workers: int = 1

    def __post_init__(self):
        if self.preset is not None:
            if self.preset not in ALPHA_PRESETS:
                raise ConfigError(f"unknown preset {self.preset!r}; have {sorted(ALPHA_PRESETS)}")
            suites = ALPHA_PRESETS[self.preset]
            if self.task_suite not in suites:
                raise ConfigError(f"unknown task suite {self.task_suite!r}; have {sorted(suites)}")
        unknown = [s for s in self.strategies if s not in STRATEGIES]
        if unknown:
            raise ConfigError(f"unknown strategies {unknown}; have {sorted(STRATEGIES)}")
        if self.specs is not None and not Path(self.specs).is_file():
            raise ConfigError(f"spec file {self.specs} does not exist")
        for name in ("episodes", "repetitions", "num_text", "chunk", "workers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        scene = self.resolved_specs()[0]
        if scene.feature_dim != self.model.hidden_dim:
            raise ConfigError(f"scene.feature_dim ({scene.feature_dim}) must equal model.hidden_dim ({self.model.hidden_dim})")
        if self.warmup < 0 or self.bias_margin < 0:
            raise ConfigError("warmup and bias_margin must be non-negative")
        # schedule and controller carry their own domain checks
        try:
            pruner = self.effective_pruner()
            pruner.schedule(self.model.num_layers)
            pruner.controller()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def alpha(self) -> float:
        if self.preset is None:
            return self.pruner.alpha
        return ALPHA_PRESETS[self.preset][self.task_suite]

    def effective_pruner(self) -> PrunerConfig:
        return replace(self.pruner, alpha=self.alpha)

    def resolved_specs(self) -> tuple:
        if self.specs is not None:
            return load_specs(self.specs)
        return self.scene, self.trajectory

    def output_root(self, override: Optional[str] = None) -> Path:
        if override:
            return Path(override)
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategies"] = list(self.strategies)
        return d


def _tuplify(x):
    return tuple(_tuplify(v) for v in x) if isinstance(x, list) else x


def _build(cls, data: dict):
    names = {f.name for f in fields(cls)}
    extra = set(data) - names
    if extra:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(extra)}")
    return cls(**{k: _tuplify(v) for k, v in data.items()})


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    try:
        parts = {
            "model": _build(ModelConfig, data.pop("model", {})),
            "scene": scene_from_dict(data.pop("scene", {})),
            "trajectory": trajectory_from_dict(data.pop("trajectory", {})),
            "pruner": _build(PrunerConfig, data.pop("pruner", {})),
        }
        return _build(RunConfig, {**data, **parts})
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``a.b=value`` strings; values are parsed as JSON when possible."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = data
        *path, leaf = key.strip().split(".")
        for p in path:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section")
        node[leaf] = parse_value(value)
    return data


def load_config(path=None, overrides=None) -> RunConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        if data.get("specs") and not Path(data["specs"]).is_absolute():
            data["specs"] = str(p.parent / data["specs"])
    return config_from_dict(apply_overrides(data, overrides))
