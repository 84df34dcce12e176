"""Batch runs over simulated episodes: suites, sweeps, FLOPs reports,
retention images and single-core timing."""

from __future__ import annotations

import itertools
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig, apply_overrides, config_from_dict
from .flops import (
    dynamic_average,
    exact_reduction,
    layer_flops,
    paper_reduction_estimate,
    paper_trajectory,
)
from .model import build_model
from .pipeline import SCHEMA_VERSION, STRATEGIES, run_episode
from .sim import (
    CLASSES,
    Episode,
    generate_episode,
    layout_for,
    random_episode_specs,
    retained_patches,
)

# one RGB colour per semantic class, in CLASSES order
CLASS_COLORS = np.array([
    [150, 120, 90],    # table
    [170, 170, 180],   # wall
    [60, 130, 200],    # cloth
    [200, 80, 200],    # distractor
    [90, 90, 90],      # arm
    [250, 210, 40],    # effector
    [230, 60, 50],     # object
    [60, 200, 90],     # goal
    [250, 150, 30],    # gripper
], dtype=np.uint8)
assert len(CLASS_COLORS) == len(CLASSES)

RENDER_SCALE = 8
DIM_SHIFT = 2      # pruned patches keep 1/4 of their brightness


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"cannot serialise {type(x).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=_jsonable)


def make_episode(cfg: RunConfig, index: int) -> Episode:
    scene, traj = cfg.resolved_specs()
    seed = cfg.seed + index
    if cfg.randomize_scenes:
        scene, traj = random_episode_specs(seed, scene, traj)
    else:
        scene = replace(scene, seed=seed)
    return generate_episode(scene, traj, cfg.steps, tau=cfg.pruner.tau,
                            history_capacity=cfg.pruner.history_capacity)


_MODELS = {}


def _model(cfg: RunConfig):
    key = cfg.model
    if key not in _MODELS:
        _MODELS.clear()
        _MODELS[key] = build_model(cfg.model)
    return _MODELS[key]


def _episode_job(args) -> tuple:
    cfg_dict, index, strategies = args
    cfg = config_from_dict(cfg_dict)
    with threadpool_limits(1):
        model = _model(cfg)
        episode = make_episode(cfg, index)
        layout = layout_for(episode.scene, cfg.num_text, cfg.chunk)
        pruner = cfg.effective_pruner()
        rows, timings = [], []
        for name in strategies:
            r, t, _ = run_episode(model, episode, layout, pruner, STRATEGIES[name],
                                  cfg.bias_margin, seed=cfg.seed + index)
            for row, tm in zip(r, t):
                row.update(strategy=name, episode=index)
                tm.update(strategy=name, episode=index)
            rows.extend(r)
            timings.extend(t)
    return rows, timings


def run_episodes(cfg: RunConfig, strategies=None) -> tuple:
    """Every (episode, strategy) pair; rows come back in episode order."""
    strategies = tuple(strategies or cfg.strategies)
    jobs = [(cfg.to_dict(), i, strategies) for i in range(cfg.episodes)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            parts = list(pool.map(_episode_job, jobs))
    else:
        parts = [_episode_job(j) for j in jobs]
    rows = [r for p in parts for r in p[0]]
    timings = [t for p in parts for t in p[1]]
    return rows, timings


def _mean(values) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def summarize(rows: list) -> dict:
    """Per-strategy means; static statistics use steps where static pruning ran."""
    out = {}
    bins = np.linspace(0.0, 1.0, 11)
    for name in dict.fromkeys(r["strategy"] for r in rows):
        rs = [r for r in rows if r["strategy"] == name]
        pruned = [r for r in rs if "unpruned" not in r["stage_counts"]]
        removed = [r["static_removed_fraction"] for r in pruned]
        hist, _ = np.histogram(removed, bins=bins)
        modes = [r["mode"] for r in rs]
        out[name] = {
            "steps": len(rs),
            "episodes": len({r["episode"] for r in rs}),
            "static_removed_fraction": _mean(removed),
            "final_visual": _mean(r["final_visual"] for r in pruned),
            "n_retain": _mean(r["n_retain"] for r in pruned),
            "action_error": _mean(r.get("action_error") for r in rs),
            "recall_static": _mean(r.get("recall_static") for r in pruned),
            "recall_final": _mean(r.get("recall_final") for r in pruned),
            "hit_rate": _mean(r["hit_rate"] for r in rs),
            "flops_reduction": _mean(r["flops_reduction"] for r in rs),
            "fine_fraction": modes.count("fine") / len(modes),
            "removed_histogram": {"edges": bins.round(2).tolist(), "counts": hist.tolist()},
        }
    return out


def timing_summary(timings: list) -> dict:
    """Median forward time per strategy and speedup against ``none``."""
    med = {}
    for name in dict.fromkeys(t["strategy"] for t in timings):
        # step 0 is unpruned for every strategy
        vals = [t["forward_seconds"] for t in timings if t["strategy"] == name and t["step"] > 0]
        med[name] = statistics.median(vals) if vals else None
    base = med.get("none")
    return {
        name: {"median_forward_seconds": m,
               "speedup": (base / m) if (base and m) else None}
        for name, m in med.items()
    }


def _table(summary: dict) -> str:
    cols = ["static_removed_fraction", "action_error", "recall_final", "hit_rate", "flops_reduction"]
    lines = ["| strategy | " + " | ".join(cols) + " |", "|" + "---|" * (len(cols) + 1)]
    for name, s in summary.items():
        cells = ["-" if s[c] is None else f"{s[c]:.4f}" for c in cols]
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def run_suite(cfg: RunConfig, out_dir=None) -> dict:
    """Run every strategy over ``cfg.episodes`` seeds and write the report.

    ``metrics.jsonl`` and ``summary.json`` are deterministic; wall-clock data
    goes to ``timings.jsonl`` / ``timing.json`` so reruns can be diffed.
    """
    rows, timings = run_episodes(cfg)
    summary = {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(),
               "strategies": summarize(rows)}
    timing = timing_summary(timings)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.jsonl", "w") as fh:
            for r in rows:
                fh.write(dumps({"schema_version": SCHEMA_VERSION, **r}) + "\n")
        with open(out / "timings.jsonl", "w") as fh:
            for t in timings:
                fh.write(dumps(t) + "\n")
        (out / "summary.json").write_text(dumps(summary) + "\n")
        (out / "timing.json").write_text(dumps(timing) + "\n")
        (out / "summary.md").write_text(_table(summary["strategies"]))
    return {"rows": rows, "timings": timings, "summary": summary, "timing": timing}


def sweep(cfg: RunConfig, grid: dict, out_dir=None, strategies=("full",)) -> list:
    """Cartesian sweep; ``grid`` maps dotted config keys to value lists."""
    keys = list(grid)
    results = []
    base = cfg.to_dict()
    for values in itertools.product(*(grid[k] for k in keys)):
        overrides = [f"{k}={json.dumps(v)}" for k, v in zip(keys, values)]
        point = config_from_dict(apply_overrides(base, overrides))
        point = replace(point, strategies=tuple(strategies))
        rows, _ = run_episodes(point)
        results.append({"params": dict(zip(keys, values)), "summary": summarize(rows)})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.jsonl", "w") as fh:
            for r in results:
                fh.write(dumps({"schema_version": SCHEMA_VERSION, **r}) + "\n")
    return results


def flops_report(cfg: Optional[RunConfig] = None, full_tokens: int = 600, static_retained: int = 285,
                 hidden_dim: int = 4096, ffn_dim: int = 11008, num_layers: int = 32) -> dict:
    """Linear estimate next to the exact per-layer sum for the reference
    trajectory, and the same for the configured toy model."""
    traj = paper_trajectory(num_layers, full_tokens, static_retained)
    exact = exact_reduction(traj, hidden_dim, ffn_dim)
    report = {
        "estimate": paper_reduction_estimate(num_layers, 0.48, 0.81),
        "estimate_from_token_table": paper_reduction_estimate(num_layers, static_retained / full_tokens, 0.81),
        "dynamic_average_mean": dynamic_average(),
        "dynamic_average_layer_weighted": dynamic_average(num_layers=num_layers),
        "reference": {"hidden_dim": hidden_dim, "ffn_dim": ffn_dim, "layer_flops_full": layer_flops(full_tokens, hidden_dim, ffn_dim),
                      **exact.to_dict()},
    }
    report["discrepancy"] = report["estimate"] - exact.reduction_fraction
    if cfg is not None:
        m = cfg.model
        scale = cfg.resolved_specs()[0].num_visual / full_tokens
        toy = paper_trajectory(m.num_layers, cfg.resolved_specs()[0].num_visual + cfg.num_text + cfg.chunk,
                               int(round(static_retained * scale)) + cfg.num_text + cfg.chunk,
                               prune_layers=cfg.effective_pruner().schedule(m.num_layers).prune_layers,
                               protected=cfg.num_text + cfg.chunk)
        report["toy"] = exact_reduction(toy, m.hidden_dim, m.ffn_dim).to_dict()
    return report


# portable pixmap output


def retention_image(classes: np.ndarray, retained, scale: int = RENDER_SCALE) -> np.ndarray:
    """(N*scale, N*scale, 3) uint8: class colour where retained, colour >> 2 elsewhere."""
    classes = np.asarray(classes)
    n = classes.shape[0]
    keep = np.zeros(n * n, dtype=bool)
    keep[np.asarray(list(retained), dtype=np.int64)] = True
    rgb = CLASS_COLORS[classes.ravel()].copy()
    rgb[~keep] >>= DIM_SHIFT
    img = rgb.reshape(n, n, 3)
    return np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)


def write_ppm(path, image: np.ndarray) -> Path:
    """Binary P6: ``P6\\n<width> <height>\\n255\\n`` then row-major RGB bytes."""
    path = Path(path)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError(f"{path} is not an 8-bit P6 image")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def render_retention(classes: dict, retained: dict, out_dir, step: int, scale: int = RENDER_SCALE) -> list:
    """One ``<view>_step<NNN>.ppm`` per view; ``retained`` maps view -> flat patch indices."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [write_ppm(out / f"{view}_step{step:03d}.ppm",
                      retention_image(cls, retained.get(view, ()), scale))
            for view, cls in classes.items()]


def render_episode(cfg: RunConfig, out_dir, index: int = 0, strategy: str = "full", final: bool = False) -> list:
    """Run one episode and draw the statically (or finally) retained patches per step."""
    model = _model(cfg)
    episode = make_episode(cfg, index)
    layout = layout_for(episode.scene, cfg.num_text, cfg.chunk)
    _, _, results = run_episode(model, episode, layout, cfg.effective_pruner(), STRATEGIES[strategy],
                                cfg.bias_margin, seed=cfg.seed + index)
    paths = []
    for s, res in zip(episode.steps, results):
        tokens = res.retained_final if final else res.retained_static
        paths += render_retention(s.truth.classes, retained_patches(layout, tokens), out_dir, s.step)
    return paths


# timing


def benchmark_speedup(cfg: RunConfig, index: int = 0, steps: int = 4, strategy: str = "full") -> dict:
    """Median single-threaded forward time of ``strategy`` against ``none``.

    Runs ``warmup + repetitions`` passes over the first ``steps`` generations
    of one episode and drops step 0, which is never pruned.
    """
    model = _model(cfg)
    scene, traj = cfg.resolved_specs()
    episode = generate_episode(replace(scene, seed=cfg.seed + index), traj, steps + 1,
                               tau=cfg.pruner.tau, history_capacity=cfg.pruner.history_capacity)
    layout = layout_for(episode.scene, cfg.num_text, cfg.chunk)
    pruner = cfg.effective_pruner()
    times = {"none": [], strategy: []}
    with threadpool_limits(1):
        for rep in range(cfg.warmup + cfg.repetitions):
            for name in times:
                _, t, _ = run_episode(model, episode, layout, pruner, STRATEGIES[name], cfg.bias_margin)
                if rep >= cfg.warmup:
                    times[name] += [x["forward_seconds"] for x in t if x["step"] > 0]
    med = {k: statistics.median(v) for k, v in times.items()}
    return {"median_none": med["none"], "median_pruned": med[strategy],
            "speedup": med["none"] / med[strategy], "samples": len(times[strategy]),
            "tokens": layout.seq_len, "layers": cfg.model.num_layers}

