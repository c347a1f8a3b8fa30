"""Continuous 2D navigation world.

Scenes are boolean occupancy grids (``True`` = blocked) indexed as
``grid[cy, cx]``; world coordinates are meters with ``x`` growing along
columns and ``y`` along rows. Headings are degrees counter-clockwise from
the +x axis and always stay on the 24-direction group of 15 degree steps.
"""

from __future__ import annotations

import heapq
import json
import math
import threading
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

STEP_M = 0.25
TURN_DEG = 15
MAX_MAGNITUDE = 3
SUCCESS_RADIUS_M = 3.0
LANDMARK_VISIT_RADIUS_M = 1.5
PATCH_SIZE = 11
SQRT2 = math.sqrt(2.0)
UNREACHABLE = math.inf

# Unit vectors for the 24 headings, rounded so axis-aligned headings are exact.
_DIRS = [
    (round(math.cos(math.radians(k * TURN_DEG)), 15), round(math.sin(math.radians(k * TURN_DEG)), 15))
    for k in range(360 // TURN_DEG)
]
_NEIGHBORS = [(-1, -1, 1), (-1, 0, 0), (-1, 1, 1), (0, -1, 0), (0, 1, 0), (1, -1, 1), (1, 0, 0), (1, 1, 1)]


class WorldError(Exception):
    """Base class for world-module errors."""


class InvalidEpisodeError(WorldError):
    pass


class InvalidPoseError(WorldError):
    pass


class SceneFormatError(WorldError):
    pass


class PrimitiveAction(str, Enum):
    FORWARD = "FORWARD"
    LEFT = "LEFT"
    RIGHT = "RIGHT"
    STOP = "STOP"


@dataclass(frozen=True)
class MergedAction:
    kind: PrimitiveAction
    magnitude: int = 1

    def __post_init__(self):
        kind = PrimitiveAction(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is PrimitiveAction.STOP and self.magnitude != 1:
            raise ValueError("STOP always has magnitude 1")
        if not 1 <= self.magnitude <= MAX_MAGNITUDE:
            raise ValueError(f"magnitude must be in 1..{MAX_MAGNITUDE}, got {self.magnitude}")

    def expand(self) -> list[PrimitiveAction]:
        return [self.kind] * self.magnitude

    @property
    def token(self) -> str:
        if self.kind is PrimitiveAction.STOP:
            return "STOP"
        return f"{self.kind.value[0]}{self.magnitude}"

    @classmethod
    def from_token(cls, token: str) -> "MergedAction":
        if token == "STOP":
            return cls(PrimitiveAction.STOP, 1)
        kinds = {"F": PrimitiveAction.FORWARD, "L": PrimitiveAction.LEFT, "R": PrimitiveAction.RIGHT}
        if len(token) != 2 or token[0] not in kinds or token[1] not in "123":
            raise ValueError(f"unknown action token {token!r}")
        return cls(kinds[token[0]], int(token[1]))


def expand_actions(actions: Iterable[MergedAction]) -> list[PrimitiveAction]:
    out: list[PrimitiveAction] = []
    for m in actions:
        out.extend(m.expand())
    return out


def normalize_heading(heading: float) -> float:
    h = float(heading) % 360.0
    return 0.0 if h == 360.0 else h


def wrap_degrees(angle: float) -> float:
    """Wrap an angle to (-180, 180]."""
    a = (angle + 180.0) % 360.0 - 180.0
    return 180.0 if a == -180.0 else a


def heading_vector(heading: float) -> tuple[float, float]:
    h = normalize_heading(heading)
    k, rem = divmod(h, TURN_DEG)
    if rem == 0:
        return _DIRS[int(k) % len(_DIRS)]
    return math.cos(math.radians(h)), math.sin(math.radians(h))


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", normalize_heading(self.heading))

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.heading]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Pose":
        if len(values) == 2:
            return cls(float(values[0]), float(values[1]), 0.0)
        return cls(float(values[0]), float(values[1]), float(values[2]))


def distance_field(grid: np.ndarray, goal: tuple[int, int], resolution: float) -> np.ndarray:
    """Geodesic distance (meters) from every cell to ``goal`` over 8-connected free cells.

    Straight and diagonal step counts are tracked as integers and the final value is
    ``resolution * (straight + diagonal * sqrt2)``, so results are exactly reproducible
    regardless of relaxation order. Blocked or unreachable cells hold ``inf``.
    """
    h, w = grid.shape
    gx, gy = goal
    out = np.full((h, w), UNREACHABLE)
    if not (0 <= gx < w and 0 <= gy < h) or grid[gy, gx]:
        raise InvalidPoseError(f"goal cell {goal} is blocked or outside the grid")
    free = ~grid
    best = np.full((h, w), UNREACHABLE)
    counts = np.zeros((h, w, 2), dtype=np.int64)
    done = np.zeros((h, w), dtype=bool)
    best[gy, gx] = 0.0
    heap = [(0.0, 0, 0, gy, gx)]
    while heap:
        d, a, b, y, x = heapq.heappop(heap)
        if done[y, x]:
            continue
        done[y, x] = True
        counts[y, x] = (a, b)
        for dy, dx, diag in _NEIGHBORS:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and free[ny, nx] and not done[ny, nx]:
                na, nb = (a, b + 1) if diag else (a + 1, b)
                nd = na + nb * SQRT2
                if nd < best[ny, nx]:
                    best[ny, nx] = nd
                    heapq.heappush(heap, (nd, na, nb, ny, nx))
    out[done] = resolution * (counts[done, 0] + counts[done, 1] * SQRT2)
    return out


class Scene:
    """Occupancy grid, landmarks and lazily computed per-goal distance fields.

    The grid and landmarks are never mutated after construction; the distance-field
    cache is guarded by a lock so a scene can be shared across threads.
    """

    def __init__(self, scene_id: str, grid: np.ndarray, landmarks: Sequence[tuple[int, tuple[int, int]]],
                 resolution: float = STEP_M):
        grid = np.array(grid, dtype=bool)
        if grid.ndim != 2 or grid.size == 0:
            raise SceneFormatError("grid must be a nonempty 2D array")
        if resolution <= 0:
            raise SceneFormatError("resolution must be positive")
        if grid.all():
            raise SceneFormatError("scene has no free cell")
        self.scene_id = str(scene_id)
        self.resolution = float(resolution)
        self.grid = grid
        self.grid.setflags(write=False)
        self.landmarks = [(int(lid), (int(c[0]), int(c[1]))) for lid, c in landmarks]
        self._landmark_cells = dict(self.landmarks)
        if len(self._landmark_cells) != len(self.landmarks):
            raise SceneFormatError("duplicate landmark id")
        for lid, (cx, cy) in self.landmarks:
            if not self.is_free_cell((cx, cy)):
                raise SceneFormatError(f"landmark {lid} at {(cx, cy)} is not on a free cell")
        self._fields: dict[tuple[int, int], np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def height_cells(self) -> int:
        return self.grid.shape[0]

    @property
    def width_cells(self) -> int:
        return self.grid.shape[1]

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(x / self.resolution)), int(math.floor(y / self.resolution))

    def center_of(self, cell: tuple[int, int]) -> tuple[float, float]:
        return (cell[0] + 0.5) * self.resolution, (cell[1] + 0.5) * self.resolution

    def in_bounds(self, cell: tuple[int, int]) -> bool:
        return 0 <= cell[0] < self.width_cells and 0 <= cell[1] < self.height_cells

    def is_free_cell(self, cell: tuple[int, int]) -> bool:
        return self.in_bounds(cell) and not self.grid[cell[1], cell[0]]

    def is_free_point(self, x: float, y: float) -> bool:
        return self.is_free_cell(self.cell_of(x, y))

    def landmark_cell(self, landmark_id: int) -> tuple[int, int]:
        return self._landmark_cells[landmark_id]

    def free_cells(self) -> np.ndarray:
        ys, xs = np.nonzero(~self.grid)
        return np.stack([xs, ys], axis=1)

    def distance_field(self, goal_cell: tuple[int, int]) -> np.ndarray:
        goal_cell = (int(goal_cell[0]), int(goal_cell[1]))
        with self._lock:
            f = self._fields.get(goal_cell)
        if f is None:
            f = distance_field(self.grid, goal_cell, self.resolution)
            f.setflags(write=False)
            with self._lock:
                f = self._fields.setdefault(goal_cell, f)
        return f

    def cached_goals(self) -> list[tuple[int, int]]:
        with self._lock:
            return list(self._fields)

    def geodesic_cells(self, a: tuple[int, int], b: tuple[int, int]) -> float:
        if not self.is_free_cell(a) or not self.is_free_cell(b):
            raise InvalidPoseError(f"endpoint on blocked cell: {a} -> {b}")
        return float(self.distance_field(b)[a[1], a[0]])

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "resolution": self.resolution,
            "width_cells": self.width_cells,
            "height_cells": self.height_cells,
            "occupancy": ["".join("1" if v else "0" for v in row) for row in self.grid],
            "landmarks": [{"id": lid, "cell": [cx, cy]} for lid, (cx, cy) in self.landmarks],
        }

    def to_text(self) -> str:
        d = self.to_dict()
        head = {k: d[k] for k in ("scene_id", "resolution", "width_cells", "height_cells")}
        lines = ["{"]
        for k, v in head.items():
            lines.append(f"  {json.dumps(k)}: {json.dumps(v)},")
        lines.append('  "occupancy": [')
        rows = d["occupancy"]
        lines.extend(f"    {json.dumps(r)}{',' if i < len(rows) - 1 else ''}" for i, r in enumerate(rows))
        lines.append("  ],")
        lines.append('  "landmarks": [')
        lms = d["landmarks"]
        lines.extend(f"    {json.dumps(m)}{',' if i < len(lms) - 1 else ''}" for i, m in enumerate(lms))
        lines.append("  ]")
        lines.append("}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        try:
            rows = d["occupancy"]
            if any(set(r) - {"0", "1"} for r in rows):
                raise SceneFormatError("occupancy rows must contain only '0'/'1'")
            grid = np.array([[c == "1" for c in r] for r in rows], dtype=bool)
            if grid.shape != (int(d["height_cells"]), int(d["width_cells"])):
                raise SceneFormatError("occupancy does not match declared bounds")
            landmarks = [(int(m["id"]), (int(m["cell"][0]), int(m["cell"][1]))) for m in d["landmarks"]]
            return cls(d["scene_id"], grid, landmarks, float(d["resolution"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneFormatError(f"malformed scene document: {exc}") from exc

    @classmethod
    def from_text(cls, text: str) -> "Scene":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SceneFormatError(f"scene document is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path) -> "Scene":
        return cls.from_text(Path(path).read_text())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.scene_id == other.scene_id and self.resolution == other.resolution
                and np.array_equal(self.grid, other.grid) and self.landmarks == other.landmarks)

    def __repr__(self) -> str:
        return f"Scene({self.scene_id!r}, {self.width_cells}x{self.height_cells}, {len(self.landmarks)} landmarks)"


def geodesic_distance(scene: Scene, start: Pose, goal: Pose) -> float:
    """Geodesic distance in meters between the cells containing two poses."""
    return scene.geodesic_cells(scene.cell_of(start.x, start.y), scene.cell_of(goal.x, goal.y))


def euclidean_distance(a: Pose, b: Pose) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


# -- episode state machine ------------------------------------------------

RELATIONS = ("TOWARD", "LEFT_OF", "RIGHT_OF", "STOP_AT")
STOP_AT = 3


def encode_instruction_token(landmark_id: int, relation: int) -> int:
    return int(landmark_id) * len(RELATIONS) + int(relation)


def decode_instruction_token(token: int) -> tuple[int, int]:
    return int(token) // len(RELATIONS), int(token) % len(RELATIONS)


@dataclass(frozen=True)
class EpisodeState:
    episode_id: str
    scene_id: str
    pose: Pose
    goal: Pose
    instruction: tuple[int, ...] = ()
    cursor: int = 0
    steps_taken: int = 0
    done: bool = False
    stopped: bool = False
    last_collision: bool = False
    min_goal_distance_seen: float = UNREACHABLE
    goal_metric: str = "geodesic"


def goal_distance(scene: Scene, pose: Pose, goal: Pose, metric: str = "geodesic") -> float:
    if metric == "euclidean":
        return euclidean_distance(pose, goal)
    return geodesic_distance(scene, pose, goal)


def _advance_cursor(scene: Scene, pose: Pose, instruction: tuple[int, ...], cursor: int) -> int:
    while cursor < len(instruction) - 1:
        lid, _ = decode_instruction_token(instruction[cursor])
        lx, ly = scene.center_of(scene.landmark_cell(lid))
        if math.hypot(lx - pose.x, ly - pose.y) > LANDMARK_VISIT_RADIUS_M:
            break
        cursor += 1
    return cursor


def start_episode(scene: Scene, episode_id: str, start: Pose, goal: Pose,
                  instruction: Sequence[int] = (), goal_metric: str = "geodesic") -> EpisodeState:
    """Create the initial state; both poses must lie on free cells."""
    for name, p in (("start", start), ("goal", goal)):
        if not scene.is_free_point(p.x, p.y):
            raise InvalidPoseError(f"{name} pose {p} is on a blocked cell or outside the scene")
    instruction = tuple(int(t) for t in instruction)
    for tok in instruction:
        lid, _ = decode_instruction_token(tok)
        if lid not in scene._landmark_cells:
            raise InvalidPoseError(f"instruction references unknown landmark {lid}")
    d = goal_distance(scene, start, goal, goal_metric)
    return EpisodeState(
        episode_id=str(episode_id), scene_id=scene.scene_id, pose=start, goal=goal,
        instruction=instruction, cursor=_advance_cursor(scene, start, instruction, 0),
        min_goal_distance_seen=d, goal_metric=goal_metric,
    )


def apply_primitive(state: EpisodeState, scene: Scene, action: PrimitiveAction) -> EpisodeState:
    if state.done:
        raise InvalidEpisodeError(f"episode {state.episode_id} is already done")
    action = PrimitiveAction(action)
    pose = state.pose
    collision = False
    if action is PrimitiveAction.FORWARD:
        dx, dy = heading_vector(pose.heading)
        nx, ny = pose.x + STEP_M * dx, pose.y + STEP_M * dy
        if scene.is_free_point(nx, ny):
            pose = Pose(nx, ny, pose.heading)
        else:
            collision = True
    elif action is PrimitiveAction.LEFT:
        pose = Pose(pose.x, pose.y, pose.heading + TURN_DEG)
    elif action is PrimitiveAction.RIGHT:
        pose = Pose(pose.x, pose.y, pose.heading - TURN_DEG)
    stop = action is PrimitiveAction.STOP
    d = goal_distance(scene, pose, state.goal, state.goal_metric)
    return replace(
        state, pose=pose, steps_taken=state.steps_taken + 1, done=stop, stopped=stop,
        last_collision=collision, min_goal_distance_seen=min(state.min_goal_distance_seen, d),
        cursor=_advance_cursor(scene, pose, state.instruction, state.cursor),
    )


def apply_merged(state: EpisodeState, scene: Scene, action: MergedAction,
                 trace: list | None = None) -> EpisodeState:
    """Apply each primitive of ``action`` in turn; ``trace`` collects intermediate states."""
    collided = False
    for prim in action.expand():
        state = apply_primitive(state, scene, prim)
        collided = collided or state.last_collision
        if trace is not None:
            trace.append(state)
    if collided and not state.last_collision:
        state = replace(state, last_collision=True)
    return state


def terminate(state: EpisodeState) -> EpisodeState:
    """Mark an episode done without a STOP (step limit or early stop)."""
    return replace(state, done=True, stopped=False)


def is_success(state: EpisodeState, scene: Scene, radius: float = SUCCESS_RADIUS_M) -> bool:
    if not state.stopped:
        return False
    return goal_distance(scene, state.pose, state.goal, state.goal_metric) <= radius


# -- observations -----------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    local_patch: np.ndarray
    goal_vec: tuple[float, float]
    instruction_features: np.ndarray
    collision_flag: int

    def to_dict(self) -> dict:
        return {
            "local_patch": ["".join(str(int(v)) for v in row) for row in self.local_patch],
            "goal_vec": [round(float(self.goal_vec[0]), 6), round(float(self.goal_vec[1]), 6)],
            "instruction_features": [round(float(v), 6) for v in self.instruction_features],
            "collision_flag": int(self.collision_flag),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Observation":
        patch = np.array([[int(c) for c in row] for row in d["local_patch"]], dtype=np.uint8)
        return cls(patch, (float(d["goal_vec"][0]), float(d["goal_vec"][1])),
                   np.asarray(d["instruction_features"], dtype=float), int(d["collision_flag"]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Observation):
            return NotImplemented
        return (np.array_equal(self.local_patch, other.local_patch) and self.goal_vec == other.goal_vec
                and np.array_equal(self.instruction_features, other.instruction_features)
                and self.collision_flag == other.collision_flag)


INSTRUCTION_FEATURES = 10
MAX_INSTRUCTION_TOKENS = 8
_FEATURE_DIST_SCALE = 10.0


def local_patch(scene: Scene, pose: Pose, size: int = PATCH_SIZE) -> np.ndarray:
    """Heading-aligned egocentric occupancy window.

    Row ``i`` is ``i - size//2`` cells ahead of the agent, column ``j`` is
    ``j - size//2`` cells to its left; out-of-bounds samples read as blocked.
    """
    half = size // 2
    fx, fy = heading_vector(pose.heading)
    lx, ly = -fy, fx
    offs = np.arange(-half, half + 1) * scene.resolution
    fwd = offs[:, None]
    lat = offs[None, :]
    px = pose.x + fwd * fx + lat * lx
    py = pose.y + fwd * fy + lat * ly
    cx = np.floor(px / scene.resolution).astype(int)
    cy = np.floor(py / scene.resolution).astype(int)
    inside = (cx >= 0) & (cx < scene.width_cells) & (cy >= 0) & (cy < scene.height_cells)
    patch = np.ones((size, size), dtype=np.uint8)
    patch[inside] = scene.grid[cy[inside], cx[inside]]
    return patch


def relative_bearing(pose: Pose, x: float, y: float) -> float:
    if math.isclose(x, pose.x, abs_tol=1e-12) and math.isclose(y, pose.y, abs_tol=1e-12):
        return 0.0
    return wrap_degrees(math.degrees(math.atan2(y - pose.y, x - pose.x)) - pose.heading)


def instruction_features(scene: Scene, pose: Pose, instruction: Sequence[int], cursor: int) -> np.ndarray:
    """Fixed-length encoding of the instruction and the agent's progress through it.

    Layout: token count, cursor position, one-hot relation of the current token (4),
    distance to its landmark, sin/cos of the landmark's relative bearing, and the
    landmark-relative fraction of the instruction already completed.
    """
    f = np.zeros(INSTRUCTION_FEATURES)
    n = len(instruction)
    if n == 0:
        return f
    lid, rel = decode_instruction_token(instruction[cursor])
    lx, ly = scene.center_of(scene.landmark_cell(lid))
    dist = math.hypot(lx - pose.x, ly - pose.y)
    bearing = math.radians(relative_bearing(pose, lx, ly))
    f[0] = n / MAX_INSTRUCTION_TOKENS
    f[1] = cursor / MAX_INSTRUCTION_TOKENS
    f[2 + rel] = 1.0
    f[6] = min(dist, 2 * _FEATURE_DIST_SCALE) / _FEATURE_DIST_SCALE
    f[7] = math.sin(bearing)
    f[8] = math.cos(bearing)
    f[9] = cursor / max(n - 1, 1)
    return f


def observe(state: EpisodeState, scene: Scene) -> Observation:
    """Symbolic egocentric observation; a pure function of pose, scene and instruction progress."""
    pose = state.pose
    d = goal_distance(scene, pose, state.goal, state.goal_metric)
    gx, gy = scene.center_of(scene.cell_of(state.goal.x, state.goal.y))
    return Observation(
        local_patch=local_patch(scene, pose),
        goal_vec=(d, relative_bearing(pose, gx, gy)),
        instruction_features=instruction_features(scene, pose, state.instruction, state.cursor),
        collision_flag=int(state.last_collision),
    )


OBS_DIM = PATCH_SIZE * PATCH_SIZE + 3 + INSTRUCTION_FEATURES + 1


def observation_vector(obs: Observation) -> np.ndarray:
    """Flatten an observation into the policy's input features."""
    d, bearing = obs.goal_vec
    b = math.radians(bearing)
    dn = min(d, 2 * _FEATURE_DIST_SCALE) / _FEATURE_DIST_SCALE if math.isfinite(d) else 2.0
    return np.concatenate([
        obs.local_patch.reshape(-1).astype(float),
        [dn, math.sin(b), math.cos(b)],
        obs.instruction_features,
        [float(obs.collision_flag)],
    ])
