"""Synthetic pick-and-place episodes with known important tokens.

A table-top world is rendered into two patch grids per step: a fixed
third-person camera looking down on the table and a wrist camera that travels
with the end effector. Each patch carries a feature vector built from an
orthonormal prototype of its semantic class, a small fixed texture and per
frame noise, so cosine similarity cleanly separates changed from unchanged
patches.

The end effector follows four scripted phases (targeting, approaching,
transferring, placing) at constant speed inside each phase.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .controller import ActionDelta, translational_speed
from .model import AttentionBiasSpec, TokenLayout
from .static_pruner import OFFSET_PROSE, frame_offset, patch_similarity

CLASSES = ("table", "wall", "cloth", "distractor", "arm", "effector", "object", "goal", "gripper")
CLASS_ID = {c: i for i, c in enumerate(CLASSES)}
TASK_CLASSES = ("object", "goal", "effector", "gripper")
MOVING_CLASSES = ("arm", "effector", "object", "gripper")
PHASES = ("targeting", "approaching", "transferring", "placing")
FINE_PHASES = ("approaching", "placing")
THIRD, WRIST = "third_person", "wrist"

# bias weight per task class; the order decides who wins the top-k slots
SALIENCE = {"object": 1.0, "effector": 0.9, "goal": 0.8, "gripper": 0.7}
DYNAMIC_SALIENCE = 0.5

# readout gain per (view, class) used by the action oracle
READOUT = {
    (THIRD, "object"): 0.5, (THIRD, "goal"): 0.3, (THIRD, "effector"): 0.5,
    (WRIST, "object"): 0.4, (WRIST, "goal"): 0.2,
}


@dataclass(frozen=True)
class SceneSpec:
    grid_size: int = 17
    views: tuple = (THIRD, WRIST)
    feature_dim: int = 64
    noise_scale: float = 0.02
    texture_scale: float = 0.15
    seed: int = 0
    object_radius: float = 0.08
    goal_radius: float = 0.10
    effector_radius: float = 0.06
    arm_width: float = 0.05
    arm_base: tuple = (0.5, -0.05)
    wrist_fov: float = 0.5
    wall_depth: float = 0.12
    cloth: tuple = (0.05, 0.2, 0.45, 0.5)   # x0, y0, x1, y1
    distractors: tuple = ((0.15, 0.8, 0.07), (0.88, 0.3, 0.06))

    def __post_init__(self):
        if self.grid_size < 4:
            raise ValueError("grid_size must be >= 4")
        if self.feature_dim < len(CLASSES):
            raise ValueError(f"feature_dim must be >= {len(CLASSES)} (one direction per class)")
        if self.noise_scale < 0 or self.texture_scale < 0:
            raise ValueError("noise and texture scales must be non-negative")
        if not set(self.views) <= {THIRD, WRIST} or not self.views:
            raise ValueError(f"views must be drawn from {(THIRD, WRIST)}")

    @property
    def patches_per_view(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def num_visual(self) -> int:
        return self.patches_per_view * len(self.views)


@dataclass(frozen=True)
class TrajectorySpec:
    start: tuple = (0.7, 0.15, 0.30)
    object_xy: tuple = (0.3, 0.6)
    goal_xy: tuple = (0.7, 0.72)
    hover_z: float = 0.30
    grasp_z: float = 0.18
    phases: tuple = (("targeting", 12), ("approaching", 6), ("transferring", 12), ("placing", 6))
    rotation_rate: float = 0.02
    fine_threshold: float = 0.03

    def __post_init__(self):
        names = tuple(p for p, _ in self.phases)
        if names != PHASES:
            raise ValueError(f"phases must be {PHASES} in order")
        if any(int(d) <= 0 for _, d in self.phases):
            raise ValueError("phase durations must be positive")
        for phase, speed in zip(PHASES, self.speeds()):
            slow = phase in FINE_PHASES
            if slow and not speed < self.fine_threshold:
                raise ValueError(f"{phase} speed {speed:.4f} is not below {self.fine_threshold}")
            if not slow and not speed > self.fine_threshold:
                raise ValueError(f"{phase} speed {speed:.4f} is not above {self.fine_threshold}")

    def waypoints(self) -> list:
        ox, oy = self.object_xy
        gx, gy = self.goal_xy
        return [
            np.array(self.start, dtype=np.float64),
            np.array([ox, oy, self.hover_z]),
            np.array([ox, oy, self.grasp_z]),
            np.array([gx, gy, self.hover_z]),
            np.array([gx, gy, self.grasp_z]),
        ]

    def speeds(self) -> list:
        """Constant per-phase translational speed (distance / duration)."""
        w = self.waypoints()
        return [float(np.linalg.norm(w[i + 1] - w[i]) / d) for i, (_, d) in enumerate(self.phases)]

    @property
    def num_steps(self) -> int:
        return int(sum(d for _, d in self.phases))


@dataclass
class GroundTruth:
    task: dict          # view -> flat patch indices of task classes
    dynamic: dict       # view -> flat patch indices below tau against the reference
    important: dict     # view -> union of the two
    classes: dict       # view -> (N, N) class ids
    target: ActionDelta
    reference_step: int

    def important_tokens(self, layout: TokenLayout) -> np.ndarray:
        return np.sort(np.concatenate([layout.view_indices(v)[self.important[v]] for v in layout.views]))

    def task_tokens(self, layout: TokenLayout) -> np.ndarray:
        return np.sort(np.concatenate([layout.view_indices(v)[self.task[v]] for v in layout.views]))


@dataclass
class EpisodeStep:
    step: int
    phase: str
    grids: dict
    action: ActionDelta
    truth: GroundTruth
    ee: np.ndarray


@dataclass
class Episode:
    scene: SceneSpec
    trajectory: TrajectorySpec
    steps: list = field(default_factory=list)
    tau: float = 0.95

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def __getitem__(self, i) -> EpisodeStep:
        return self.steps[i]


def prototypes(feature_dim: int, seed: int) -> np.ndarray:
    """Orthonormal class directions, one row per class."""
    rng = np.random.default_rng([seed, 7])
    q, _ = np.linalg.qr(rng.normal(size=(feature_dim, len(CLASSES))))
    return q.T.copy()


def _scene_rng(scene: SceneSpec, *key) -> np.random.Generator:
    return np.random.default_rng([scene.seed, *key])


def _ee_path(traj: TrajectorySpec) -> tuple:
    """Positions at every step plus the final resting point, and phase labels."""
    w = traj.waypoints()
    pos, labels = [], []
    for i, (phase, dur) in enumerate(traj.phases):
        for s in range(dur):
            pos.append(w[i] + (w[i + 1] - w[i]) * (s / dur))
            labels.append(phase)
    pos.append(w[-1])
    return np.array(pos), labels


def _segment_distance(px, py, a, b) -> np.ndarray:
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    t = np.zeros_like(px) if denom == 0 else np.clip(((px - ax) * dx + (py - ay) * dy) / denom, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _static_classes(scene: SceneSpec, x: np.ndarray, y: np.ndarray, goal_xy) -> np.ndarray:
    cls = np.full(x.shape, CLASS_ID["table"])
    x0, y0, x1, y1 = scene.cloth
    cls[(x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)] = CLASS_ID["cloth"]
    off_table = (x < 0) | (x > 1) | (y < 0) | (y > 1) | (y > 1 - scene.wall_depth)
    cls[off_table] = CLASS_ID["wall"]
    for dx_, dy_, r in scene.distractors:
        cls[np.hypot(x - dx_, y - dy_) <= r] = CLASS_ID["distractor"]
    cls[np.hypot(x - goal_xy[0], y - goal_xy[1]) <= scene.goal_radius] = CLASS_ID["goal"]
    return cls


def third_person_classes(scene: SceneSpec, traj: TrajectorySpec, ee, obj_xy) -> np.ndarray:
    n = scene.grid_size
    centers = (np.arange(n) + 0.5) / n
    x = np.broadcast_to(centers[None, :], (n, n))
    y = np.broadcast_to(1.0 - centers[:, None], (n, n))
    cls = _static_classes(scene, x, y, traj.goal_xy)
    cls[np.hypot(x - obj_xy[0], y - obj_xy[1]) <= scene.object_radius] = CLASS_ID["object"]
    cls[_segment_distance(x, y, scene.arm_base, ee[:2]) <= scene.arm_width / 2] = CLASS_ID["arm"]
    cls[np.hypot(x - ee[0], y - ee[1]) <= scene.effector_radius] = CLASS_ID["effector"]
    return cls


def _wrist_coords(scene: SceneSpec, ee) -> tuple:
    n = scene.grid_size
    offs = (np.arange(n) + 0.5 - n / 2) / n * scene.wrist_fov
    x = np.broadcast_to(ee[0] + offs[None, :], (n, n))
    y = np.broadcast_to(ee[1] - offs[:, None], (n, n))
    return x, y


def gripper_patches(n: int) -> tuple:
    c = n // 2
    rows = np.arange(n - 3, n)
    cols = np.array([max(c - 3, 0), min(c + 3, n - 1)])
    return np.repeat(rows, cols.size), np.tile(cols, rows.size)


def wrist_classes(scene: SceneSpec, traj: TrajectorySpec, ee, obj_xy) -> np.ndarray:
    x, y = _wrist_coords(scene, ee)
    cls = _static_classes(scene, x, y, traj.goal_xy)
    cls[np.hypot(x - obj_xy[0], y - obj_xy[1]) <= scene.object_radius] = CLASS_ID["object"]
    r, c = gripper_patches(scene.grid_size)
    cls[r, c] = CLASS_ID["gripper"]
    return cls


class _Renderer:
    def __init__(self, scene: SceneSpec):
        self.scene = scene
        n, f = scene.grid_size, scene.feature_dim
        self.protos = prototypes(f, scene.seed)
        rng = _scene_rng(scene, 11)
        self.third_texture = rng.normal(size=(n, n, f)) / np.sqrt(f) * scene.texture_scale
        self.cell = scene.wrist_fov / n
        self.world_cells = int(np.ceil((1.0 + 2 * scene.wrist_fov) / self.cell)) + 2
        self.wrist_texture = (
            rng.normal(size=(self.world_cells, self.world_cells, f)) / np.sqrt(f) * scene.texture_scale
        )
        self.moving = np.isin(np.arange(len(CLASSES)), [CLASS_ID[c] for c in MOVING_CLASSES])

    def features(self, view: str, cls: np.ndarray, ee, step: int) -> np.ndarray:
        scene = self.scene
        if view == THIRD:
            tex = self.third_texture
        else:
            x, y = _wrist_coords(scene, ee)
            ix = np.clip(np.floor((x + scene.wrist_fov) / self.cell).astype(int), 0, self.world_cells - 1)
            iy = np.clip(np.floor((y + scene.wrist_fov) / self.cell).astype(int), 0, self.world_cells - 1)
            tex = self.wrist_texture[iy, ix]
        tex = np.where(self.moving[cls][..., None], 0.0, tex)
        grid = self.protos[cls] + tex
        if scene.noise_scale > 0:
            rng = _scene_rng(scene, 23, step, scene.views.index(view))
            grid = grid + rng.normal(size=grid.shape) * (scene.noise_scale / np.sqrt(scene.feature_dim))
        return grid


def reference_step(step: int, prev_speed: float, capacity: int = 12, variant: str = OFFSET_PROSE,
                   speed_scale: float = 1.0) -> int:
    """Step of the comparison frame, matching what a ``FrameHistory`` of
    ``capacity`` frames returns (the oldest frame when the offset reaches back
    further than the history)."""
    held = min(step, capacity - 1)
    offset = frame_offset(prev_speed * speed_scale, held, variant)
    return max(step - offset, step - held)


def generate_episode(scene: SceneSpec, traj: TrajectorySpec, steps: Optional[int] = None,
                     tau: float = 0.95, history_capacity: int = 12) -> Episode:
    """Render the scripted episode; deterministic in ``scene.seed``."""
    total = traj.num_steps if steps is None else int(steps)
    if total <= 0 or total > traj.num_steps:
        raise ValueError(f"steps must lie in [1, {traj.num_steps}]")
    path, labels = _ee_path(traj)
    renderer = _Renderer(scene)
    grasp_step = dict(traj.phases)["targeting"] + dict(traj.phases)["approaching"]
    rot = {"targeting": traj.rotation_rate}

    ep = Episode(scene, traj, tau=tau)
    prev_speed = 0.0
    for t in range(total):
        ee = path[t]
        obj_xy = ee[:2] if t >= grasp_step else np.asarray(traj.object_xy)
        classes, grids = {}, {}
        for view in scene.views:
            fn = third_person_classes if view == THIRD else wrist_classes
            classes[view] = fn(scene, traj, ee, obj_xy)
            grids[view] = renderer.features(view, classes[view], ee, t)
        d = path[t + 1] - path[t]
        gripper = 1.0 if t >= grasp_step - 1 else -1.0
        action = ActionDelta(d[0], d[1], d[2], 0.0, 0.0, rot.get(labels[t], 0.0), gripper)

        ref = reference_step(t, prev_speed, history_capacity)
        task_ids = [CLASS_ID[c] for c in TASK_CLASSES]
        task, dyn, imp = {}, {}, {}
        for view in scene.views:
            task[view] = np.flatnonzero(np.isin(classes[view].ravel(), task_ids))
            ref_grid = grids[view] if ref == t else ep.steps[ref].grids[view]
            sim = patch_similarity(grids[view], ref_grid).ravel()
            dyn[view] = np.flatnonzero(sim < tau)
            imp[view] = np.union1d(task[view], dyn[view])
        truth = GroundTruth(task, dyn, imp, classes, action, ref)
        ep.steps.append(EpisodeStep(t, labels[t], grids, action, truth, ee.copy()))
        prev_speed = translational_speed(action)
    return ep


def random_episode_specs(seed: int, base_scene: Optional[SceneSpec] = None,
                         base_traj: Optional[TrajectorySpec] = None) -> tuple:
    """Scene and trajectory with object, goal, start and distractors drawn from ``seed``."""
    base_scene = base_scene or SceneSpec()
    base_traj = base_traj or TrajectorySpec()
    rng = np.random.default_rng([seed, 101])
    while True:
        obj = rng.uniform(0.2, 0.75, 2)
        goal = rng.uniform(0.2, 0.75, 2)
        start = np.array([rng.uniform(0.15, 0.85), rng.uniform(0.05, 0.2)])
        if np.linalg.norm(obj - goal) < 0.35 or np.linalg.norm(obj - start) < 0.35:
            continue
        distractors = []
        for _ in range(2):
            for _ in range(100):
                c = rng.uniform(0.1, 0.9, 2)
                if min(np.linalg.norm(c - obj), np.linalg.norm(c - goal)) > 0.22:
                    distractors.append((float(c[0]), float(c[1]), float(rng.uniform(0.05, 0.08))))
                    break
        try:
            traj = TrajectorySpec(
                start=(float(start[0]), float(start[1]), base_traj.hover_z),
                object_xy=(float(obj[0]), float(obj[1])),
                goal_xy=(float(goal[0]), float(goal[1])),
                hover_z=base_traj.hover_z, grasp_z=base_traj.grasp_z,
                phases=base_traj.phases, rotation_rate=base_traj.rotation_rate,
                fine_threshold=base_traj.fine_threshold,
            )
        except ValueError:
            continue
        scene = SceneSpec(**{**asdict(base_scene), "seed": int(seed), "distractors": tuple(distractors)})
        return scene, traj


def layout_for(scene: SceneSpec, num_text: int = 16, num_action: int = 8) -> TokenLayout:
    return TokenLayout.build([(v, scene.patches_per_view) for v in scene.views], num_text, num_action)


def visual_embeddings(grids: dict, layout: TokenLayout) -> np.ndarray:
    return np.concatenate([grids[v].reshape(-1, grids[v].shape[-1]) for v in layout.views])


def attention_bias_for(episode: Episode, step: int, layout: TokenLayout, margin: float = 6.0) -> AttentionBiasSpec:
    """Pre-softmax bias lifting instruction-to-important-patch attention.

    Task patches get ``margin * salience`` graded by class and by distance to
    the class centroid; changing background patches get a smaller lift.
    """
    key_bias = np.zeros(layout.seq_len)
    query = np.zeros(layout.seq_len, dtype=bool)
    query[layout.text_indices()] = True
    if margin == 0:
        return AttentionBiasSpec(key_bias, query)
    truth = episode.steps[step].truth
    n = episode.scene.grid_size
    rows, cols = np.divmod(np.arange(n * n), n)
    for view in layout.views:
        sal = np.zeros(n * n)
        cls = truth.classes[view].ravel()
        sal[truth.dynamic[view]] = DYNAMIC_SALIENCE
        for name, weight in SALIENCE.items():
            members = np.flatnonzero(cls == CLASS_ID[name])
            if members.size == 0:
                continue
            r0, c0 = rows[members].mean(), cols[members].mean()
            dist = np.hypot(rows[members] - r0, cols[members] - c0) / n
            sal[members] = weight * (1.0 - 0.5 * dist)
        key_bias[layout.view_indices(view)] = margin * sal
    return AttentionBiasSpec(key_bias, query)


def classify_patches(grid: np.ndarray, protos: np.ndarray) -> np.ndarray:
    flat = grid.reshape(-1, grid.shape[-1])
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    return np.argmax(flat @ protos.T / np.where(norms == 0, 1.0, norms), axis=1)


def action_oracle(grids: dict, truth: GroundTruth, retained: dict, scene: SceneSpec) -> tuple:
    """Action predicted from the retained patches, and its distance to the target.

    ``retained`` maps view -> flat patch indices. Object, goal and effector
    positions are read off as centroids of the retained patches recognised
    as that class (grid centre when none survive); their offsets from the
    true centroids pass through a fixed linear readout into the translation.
    """
    n = scene.grid_size
    protos = prototypes(scene.feature_dim, scene.seed)
    rows, cols = np.divmod(np.arange(n * n), n)
    coords = np.stack([(cols + 0.5) / n, 1.0 - (rows + 0.5) / n], axis=1)
    shift = np.zeros(3)
    for (view, name), gain in READOUT.items():
        if view not in grids:
            continue
        true_members = np.flatnonzero(truth.classes[view].ravel() == CLASS_ID[name])
        if true_members.size == 0:
            continue
        keep = np.asarray(retained.get(view, []), dtype=np.int64)
        seen = keep[classify_patches(grids[view], protos)[keep] == CLASS_ID[name]] if keep.size else keep
        est = coords[seen].mean(axis=0) if seen.size else np.array([0.5, 0.5])
        dx, dy = (est - coords[true_members].mean(axis=0)) * gain
        shift += np.array([dx, dy, 0.5 * (dx + dy)])
    target = truth.target.as_array()
    pred = target.copy()
    pred[:3] += shift
    return ActionDelta.from_array(pred), float(np.linalg.norm(pred - target))


def retained_patches(layout: TokenLayout, tokens) -> dict:
    tokens = np.asarray(tokens, dtype=np.int64)
    out = {}
    for view, start, end in layout.view_ranges:
        sel = tokens[(tokens >= start) & (tokens < end)]
        out[view] = sel - start
    return out


def save_episode(ep: Episode, path) -> Path:
    """Write an episode to ``.npz``; the format is described in the README."""
    path = Path(path)
    arrays = {
        "actions": np.stack([s.action.as_array() for s in ep.steps]),
        "ee": np.stack([s.ee for s in ep.steps]),
        "phases": np.array([s.phase for s in ep.steps]),
        "reference_step": np.array([s.truth.reference_step for s in ep.steps]),
        "meta": np.array(json.dumps({
            "version": 1, "tau": ep.tau,
            "scene": asdict(ep.scene), "trajectory": asdict(ep.trajectory),
        })),
    }
    n2 = ep.scene.patches_per_view
    for view in ep.scene.views:
        arrays[f"grids_{view}"] = np.stack([s.grids[view] for s in ep.steps])
        arrays[f"classes_{view}"] = np.stack([s.truth.classes[view] for s in ep.steps]).astype(np.int8)
        for key in ("task", "dynamic", "important"):
            mask = np.zeros((len(ep.steps), n2), dtype=bool)
            for i, s in enumerate(ep.steps):
                mask[i, getattr(s.truth, key)[view]] = True
            arrays[f"{key}_{view}"] = mask
    np.savez_compressed(path, **arrays)
    return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def _tuplify(x):
    return tuple(_tuplify(v) for v in x) if isinstance(x, list) else x


def scene_from_dict(d: dict) -> SceneSpec:
    return SceneSpec(**{k: _tuplify(v) for k, v in d.items()})


def trajectory_from_dict(d: dict) -> TrajectorySpec:
    return TrajectorySpec(**{k: _tuplify(v) for k, v in d.items()})


def load_episode(path) -> Episode:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        scene = scene_from_dict(meta["scene"])
        traj = trajectory_from_dict(meta["trajectory"])
        ep = Episode(scene, traj, tau=meta["tau"])
        for t in range(z["actions"].shape[0]):
            grids = {v: z[f"grids_{v}"][t] for v in scene.views}
            truth = GroundTruth(
                task={v: np.flatnonzero(z[f"task_{v}"][t]) for v in scene.views},
                dynamic={v: np.flatnonzero(z[f"dynamic_{v}"][t]) for v in scene.views},
                important={v: np.flatnonzero(z[f"important_{v}"][t]) for v in scene.views},
                classes={v: z[f"classes_{v}"][t].astype(np.int64) for v in scene.views},
                target=ActionDelta.from_array(z["actions"][t]),
                reference_step=int(z["reference_step"][t]),
            )
            ep.steps.append(EpisodeStep(t, str(z["phases"][t]), grids, truth.target, truth, z["ee"][t]))
    return ep


def load_specs(path) -> tuple:
    """Read ``{"scene": {...}, "trajectory": {...}}`` from a JSON file."""
    data = json.loads(Path(path).read_text())
    return scene_from_dict(data.get("scene", {})), trajectory_from_dict(data.get("trajectory", {}))
