"""Procedural scenes, episodes, symbolic instructions and expert trajectories."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .world import (
    LANDMARK_VISIT_RADIUS_M, MAX_INSTRUCTION_TOKENS, MAX_MAGNITUDE, STEP_M, STOP_AT, TURN_DEG,
    MergedAction, Pose, PrimitiveAction, Scene, apply_primitive, decode_instruction_token,
    encode_instruction_token, expand_actions, is_success, start_episode, wrap_degrees,
)


class GenerationError(Exception):
    pass


class DatasetError(Exception):
    pass


@dataclass
class SceneConfig:
    width: int = 64
    height: int = 64
    rooms: int = 4
    corridor_width: int = 3
    room_min: int = 9
    room_max: int = 16
    resolution: float = STEP_M
    furniture_per_room: int = 2
    extra_corridors: int = 1


@dataclass
class EpisodeConfig:
    min_goal_m: float = 3.0
    max_goal_m: float = 15.0
    max_attempts: int = 200
    max_expert_steps: int = 400
    # Reject episodes whose expert replay is longer than the start-goal geodesic.
    require_expert_within_geodesic: bool = True


@dataclass
class Episode:
    episode_id: str
    scene_id: str
    start: Pose
    goal: Pose
    instruction: tuple[int, ...]
    expert_actions: list[MergedAction]
    expert_path: list[Pose]
    expert_primitive_len: int
    geodesic_m: float = float("nan")

    def to_record(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "scene_id": self.scene_id,
            "start": self.start.to_list(),
            "goal": self.goal.to_list(),
            "instruction": list(self.instruction),
            "expert_actions": [m.token for m in self.expert_actions],
            "expert_path": [p.to_list() for p in self.expert_path],
            "expert_primitive_len": self.expert_primitive_len,
            "geodesic_m": self.geodesic_m,
        }

    @classmethod
    def from_record(cls, r: dict) -> "Episode":
        return cls(
            episode_id=str(r["episode_id"]),
            scene_id=str(r["scene_id"]),
            start=Pose.from_list(r["start"]),
            goal=Pose.from_list(r["goal"]),
            instruction=tuple(int(t) for t in r["instruction"]),
            expert_actions=[MergedAction.from_token(t) for t in r["expert_actions"]],
            expert_path=[Pose.from_list(p) for p in r["expert_path"]],
            expert_primitive_len=int(r["expert_primitive_len"]),
            geodesic_m=float(r.get("geodesic_m", float("nan"))),
        )


@dataclass
class DatasetManifest:
    split: str
    episode_count: int
    scenes: list[str] = field(default_factory=list)
    digest: str = ""

    def to_dict(self) -> dict:
        return {"split": self.split, "episode_count": self.episode_count, "scenes": self.scenes,
                "digest": self.digest}


# -- scenes -----------------------------------------------------------------

def _free_components(free: np.ndarray) -> int:
    _, n = ndimage.label(free, structure=np.ones((3, 3), dtype=int))
    return n


def generate_scene(seed: int, config: SceneConfig | None = None, scene_id: str | None = None) -> Scene:
    """Rooms joined by L-shaped corridors, with a little furniture inside rooms.

    Landmarks sit at room centers and corridor junctions. The result is a pure
    function of ``(seed, config)``.
    """
    cfg = config or SceneConfig()
    if cfg.rooms < 1:
        raise GenerationError("room count must be at least 1")
    if cfg.room_min < 3 or cfg.room_max < cfg.room_min:
        raise GenerationError("invalid room size range")
    if cfg.room_min + 2 > min(cfg.width, cfg.height):
        raise GenerationError("rooms do not fit in the grid")
    rng = np.random.default_rng(seed)
    grid = np.ones((cfg.height, cfg.width), dtype=bool)
    rooms: list[tuple[int, int, int, int]] = []
    for _ in range(cfg.rooms):
        for _attempt in range(400):
            w = int(rng.integers(cfg.room_min, cfg.room_max + 1))
            h = int(rng.integers(cfg.room_min, cfg.room_max + 1))
            if w + 2 > cfg.width or h + 2 > cfg.height:
                continue
            x0 = int(rng.integers(1, cfg.width - w))
            y0 = int(rng.integers(1, cfg.height - h))
            if all(x0 + w + 2 <= a or a + c + 2 <= x0 or y0 + h + 2 <= b or b + d + 2 <= y0
                   for a, b, c, d in rooms):
                rooms.append((x0, y0, w, h))
                break
        else:
            raise GenerationError(f"could not place {cfg.rooms} rooms in a {cfg.width}x{cfg.height} grid")
    for x0, y0, w, h in rooms:
        grid[y0:y0 + h, x0:x0 + w] = False
    centers = [(x0 + w // 2, y0 + h // 2) for x0, y0, w, h in rooms]

    half = cfg.corridor_width // 2
    junctions: list[tuple[int, int]] = []

    def carve(a: tuple[int, int], b: tuple[int, int]):
        (ax, ay), (bx, by) = a, b
        lo, hi = sorted((ax, bx))
        grid[max(ay - half, 1):min(ay - half + cfg.corridor_width, cfg.height - 1), max(lo - half, 1):min(hi + half + 1, cfg.width - 1)] = False
        lo, hi = sorted((ay, by))
        grid[max(lo - half, 1):min(hi + half + 1, cfg.height - 1), max(bx - half, 1):min(bx - half + cfg.corridor_width, cfg.width - 1)] = False
        junctions.append((bx, ay))

    order = sorted(range(len(rooms)), key=lambda i: (centers[i][0] + centers[i][1], i))
    for i in range(1, len(order)):
        carve(centers[order[i - 1]], centers[order[i]])
    for _ in range(cfg.extra_corridors if len(rooms) >= 3 else 0):
        i, j = rng.choice(len(rooms), size=2, replace=False)
        carve(centers[int(i)], centers[int(j)])

    points: list[tuple[int, int]] = []
    for c in centers + junctions:
        if all(max(abs(c[0] - p[0]), abs(c[1] - p[1])) > 3 for p in points):
            points.append(c)
    free_cells = np.argwhere(~grid)
    while len(points) < 4:
        y, x = free_cells[int(rng.integers(len(free_cells)))]
        c = (int(x), int(y))
        if all(max(abs(c[0] - p[0]), abs(c[1] - p[1])) > 3 for p in points):
            points.append(c)

    protected = np.zeros_like(grid)
    for cx, cy in points:
        protected[max(cy - 1, 0):cy + 2, max(cx - 1, 0):cx + 2] = True
    for x0, y0, w, h in rooms:
        for _ in range(cfg.furniture_per_room):
            fw, fh = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            if w - fw - 2 < 2 or h - fh - 2 < 2:
                continue
            fx = int(rng.integers(x0 + 2, x0 + w - fw - 1))
            fy = int(rng.integers(y0 + 2, y0 + h - fh - 1))
            if protected[fy:fy + fh, fx:fx + fw].any():
                continue
            trial = grid.copy()
            trial[fy:fy + fh, fx:fx + fw] = True
            if _free_components(~trial) == 1:
                grid = trial

    if _free_components(~grid) != 1:
        raise GenerationError("generated free space is not connected")
    landmarks = [(i, p) for i, p in enumerate(points)]
    return Scene(scene_id or f"scene_{seed:05d}", grid, landmarks, cfg.resolution)


def corridor_scene(length_cells: int, scene_id: str = "corridor", width_cells: int = 3,
                   landmark_spacing: int = 8) -> Scene:
    """A straight east-west corridor with landmarks every ``landmark_spacing`` cells."""
    grid = np.ones((width_cells + 2, length_cells + 2), dtype=bool)
    grid[1:-1, 1:-1] = False
    mid = 1 + width_cells // 2
    xs = list(range(1, length_cells + 1, landmark_spacing))
    if xs[-1] != length_cells:
        xs.append(length_cells)
    return Scene(scene_id, grid, [(i, (x, mid)) for i, x in enumerate(xs)])


# -- expert -----------------------------------------------------------------

def _descend(scene: Scene, fld: np.ndarray, cell: tuple[int, int], k: int) -> list[tuple[int, int]]:
    path = [cell]
    for _ in range(k):
        x, y = path[-1]
        best, best_d = None, fld[y, x]
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dx == dy == 0:
                    continue
                nx, ny = x + dx, y + dy
                if scene.in_bounds((nx, ny)) and fld[ny, nx] < best_d:
                    best, best_d = (nx, ny), fld[ny, nx]
        if best is None:
            break
        path.append(best)
    return path


def _segment_free(scene: Scene, x0: float, y0: float, x1: float, y1: float, step: float = 0.05) -> bool:
    n = max(int(math.hypot(x1 - x0, y1 - y0) / step), 1)
    for i in range(n + 1):
        t = i / n
        if not scene.is_free_point(x0 + t * (x1 - x0), y0 + t * (y1 - y0)):
            return False
    return True


def expert_primitives(scene: Scene, start: Pose, goal: Pose, max_steps: int = 400) -> list[PrimitiveAction]:
    """Shortest-path follower on the 24-heading grid.

    At each step the agent aims at the farthest visible cell among the next few on the
    geodesic path, turns until its heading is within 7.5 degrees of that bearing, then
    moves forward. It issues STOP on entering the goal cell.
    """
    goal_cell = scene.cell_of(goal.x, goal.y)
    fld = scene.distance_field(goal_cell)
    state = start_episode(scene, "expert", start, goal)
    actions: list[PrimitiveAction] = []
    while len(actions) < max_steps:
        pose = state.pose
        cell = scene.cell_of(pose.x, pose.y)
        if cell == goal_cell:
            actions.append(PrimitiveAction.STOP)
            return actions
        path = _descend(scene, fld, cell, 8)
        if len(path) < 2:
            raise GenerationError("expert is stuck: no descending neighbor")
        target = scene.center_of(path[1])
        for c in reversed(path[1:]):
            cx, cy = scene.center_of(c)
            if _segment_free(scene, pose.x, pose.y, cx, cy):
                target = (cx, cy)
                break
        bearing = math.degrees(math.atan2(target[1] - pose.y, target[0] - pose.x))
        diff = wrap_degrees(bearing - pose.heading)
        if abs(diff) > TURN_DEG / 2:
            a = PrimitiveAction.LEFT if diff > 0 else PrimitiveAction.RIGHT
        else:
            a = PrimitiveAction.FORWARD
        state = apply_primitive(state, scene, a)
        if state.last_collision:
            raise GenerationError("expert collided with an obstacle")
        actions.append(a)
    raise GenerationError(f"expert did not reach the goal within {max_steps} steps")


def compress_expert(primitives: Sequence[PrimitiveAction]) -> list[MergedAction]:
    """Merge runs of identical primitives into actions of magnitude at most 3."""
    if not primitives:
        raise ValueError("cannot compress an empty action sequence")
    prims = [PrimitiveAction(p) for p in primitives]
    if prims[-1] is not PrimitiveAction.STOP:
        raise ValueError("action sequence must end with STOP")
    out: list[MergedAction] = []
    i = 0
    while i < len(prims):
        kind = prims[i]
        if kind is PrimitiveAction.STOP:
            out.append(MergedAction(kind, 1))
            i += 1
            continue
        j = i
        while j < len(prims) and prims[j] is kind:
            j += 1
        run = j - i
        while run > 0:
            m = min(run, MAX_MAGNITUDE)
            out.append(MergedAction(kind, m))
            run -= m
        i = j
    return out


def replay(scene: Scene, episode: "Episode", actions: Iterable[MergedAction] | None = None):
    """Replay merged actions from the episode start; returns the list of visited states."""
    state = start_episode(scene, episode.episode_id, episode.start, episode.goal, episode.instruction)
    states = [state]
    for prim in expand_actions(actions if actions is not None else episode.expert_actions):
        state = apply_primitive(state, scene, prim)
        states.append(state)
        if state.done:
            break
    return states


def _relation(pose: Pose, lx: float, ly: float) -> int:
    dx, dy = lx - pose.x, ly - pose.y
    h = math.radians(pose.heading)
    lateral = -math.sin(h) * dx + math.cos(h) * dy
    if abs(lateral) < 0.5:
        return 0
    return 1 if lateral > 0 else 2


def build_instruction(scene: Scene, path: Sequence[Pose], goal_landmark: int) -> tuple[int, ...]:
    """Landmarks within 1.5 m of the path in first-visit order, ending with STOP_AT the goal."""
    seen: list[int] = []
    tokens: list[int] = []
    for pose in path:
        near = []
        for lid, cell in scene.landmarks:
            if lid == goal_landmark or lid in seen:
                continue
            lx, ly = scene.center_of(cell)
            d = math.hypot(lx - pose.x, ly - pose.y)
            if d <= LANDMARK_VISIT_RADIUS_M:
                near.append((d, lid, lx, ly))
        for _, lid, lx, ly in sorted(near):
            seen.append(lid)
            tokens.append(encode_instruction_token(lid, _relation(pose, lx, ly)))
    tokens = tokens[:MAX_INSTRUCTION_TOKENS - 1]
    tokens.append(encode_instruction_token(goal_landmark, STOP_AT))
    return tuple(tokens)


def make_episode(scene: Scene, episode_id: str, start: Pose, goal_landmark: int,
                 max_expert_steps: int = 400) -> Episode:
    goal = Pose(*scene.center_of(scene.landmark_cell(goal_landmark)), 0.0)
    prims = expert_primitives(scene, start, goal, max_expert_steps)
    state = start_episode(scene, episode_id, start, goal)
    path = [state.pose]
    for a in prims:
        state = apply_primitive(state, scene, a)
        path.append(state.pose)
    ep = Episode(
        episode_id=episode_id, scene_id=scene.scene_id, start=start, goal=goal,
        instruction=build_instruction(scene, path, goal_landmark),
        expert_actions=compress_expert(prims), expert_path=path,
        expert_primitive_len=len(prims),
        geodesic_m=scene.geodesic_cells(scene.cell_of(start.x, start.y), scene.cell_of(goal.x, goal.y)),
    )
    return ep


def path_length(path: Sequence[Pose]) -> float:
    return float(sum(math.hypot(b.x - a.x, b.y - a.y) for a, b in zip(path, path[1:])))


def generate_episode(scene: Scene, seed: int, config: EpisodeConfig | None = None,
                     episode_id: str | None = None) -> Episode:
    cfg = config or EpisodeConfig()
    if cfg.min_goal_m < 3.0 or cfg.max_goal_m > 15.0 or cfg.min_goal_m > cfg.max_goal_m:
        raise GenerationError(f"goal distance range [{cfg.min_goal_m}, {cfg.max_goal_m}] outside [3, 15] m")
    if len(scene.landmarks) < 2:
        raise GenerationError("scene needs at least two landmarks")
    rng = np.random.default_rng(seed)
    eid = episode_id or f"{scene.scene_id}_ep{seed}"
    for _ in range(cfg.max_attempts):
        goal_lid, goal_cell = scene.landmarks[int(rng.integers(len(scene.landmarks)))]
        fld = scene.distance_field(goal_cell)
        ys, xs = np.nonzero((fld >= cfg.min_goal_m) & (fld <= cfg.max_goal_m))
        if len(xs) == 0:
            continue
        k = int(rng.integers(len(xs)))
        heading = float(int(rng.integers(360 // TURN_DEG)) * TURN_DEG)
        cx, cy = scene.center_of((int(xs[k]), int(ys[k])))
        try:
            ep = make_episode(scene, eid, Pose(cx, cy, heading), goal_lid, cfg.max_expert_steps)
        except GenerationError:
            continue
        final = replay(scene, ep)[-1]
        if not is_success(final, scene):
            continue
        if cfg.require_expert_within_geodesic and path_length(ep.expert_path) > ep.geodesic_m + 1e-9:
            continue
        return ep
    raise GenerationError(f"no valid episode found in {scene.scene_id} after {cfg.max_attempts} attempts")


def corridor_episode(length_m: float, episode_id: str = "corridor", reverse: bool = False) -> tuple[Scene, Episode]:
    """Straight-corridor episode: the expert drives ``length_m`` along a 3-cell-wide corridor."""
    n = int(round(length_m / STEP_M))
    scene = corridor_scene(n + 1, scene_id=f"corridor_{n}")
    mid_y = scene.landmarks[0][1][1]
    goal_lid = scene.landmarks[-1][0]
    gx, _ = scene.landmark_cell(goal_lid)
    start_cell = (gx - n, mid_y)
    if reverse:
        start = Pose(*scene.center_of(start_cell), 180.0)
    else:
        start = Pose(*scene.center_of(start_cell), 0.0)
    return scene, make_episode(scene, episode_id, start, goal_lid)


# -- datasets ---------------------------------------------------------------

def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(episodes: Sequence[Episode], path, split: str | None = None) -> DatasetManifest:
    """Write one JSON record per line plus a ``<path>.manifest.json`` sidecar."""
    path = Path(path)
    with path.open("w") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_record(), sort_keys=True, separators=(",", ":")) + "\n")
    manifest = DatasetManifest(
        split=split or path.stem, episode_count=len(episodes),
        scenes=sorted({ep.scene_id for ep in episodes}), digest=_digest(path),
    )
    manifest_path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def read_manifest(path) -> DatasetManifest:
    d = json.loads(manifest_path(path).read_text())
    return DatasetManifest(d["split"], int(d["episode_count"]), list(d["scenes"]), d["digest"])


def read_dataset(path, verify: bool = True) -> list[Episode]:
    path = Path(path)
    if verify and manifest_path(path).exists():
        m = read_manifest(path)
        actual = _digest(path)
        if actual != m.digest:
            raise DatasetError(f"{path}: content digest {actual[:12]} does not match manifest {m.digest[:12]}")
    episodes = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                episodes.append(Episode.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed episode record ({exc})") from exc
    return episodes


def save_scenes(scenes: Iterable[Scene], directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [s.save(directory / f"{s.scene_id}.json") for s in scenes]


def load_scenes(directory) -> dict[str, Scene]:
    return {p.stem: Scene.load(p) for p in sorted(Path(directory).glob("*.json"))}


def generate_scenes(seed: int, n: int, config: SceneConfig | None = None) -> list[Scene]:
    return [generate_scene(seed * 1000 + i, config, scene_id=f"scene_{seed:03d}_{i:03d}") for i in range(n)]


def generate_episodes(scenes: Sequence[Scene], per_scene: int, seed: int,
                      config: EpisodeConfig | None = None, prefix: str = "ep") -> list[Episode]:
    episodes = []
    for si, scene in enumerate(scenes):
        for k in range(per_scene):
            s = (seed * 1_000_003 + si * 10_007 + k) % (2**32)
            episodes.append(generate_episode(scene, s, config, episode_id=f"{prefix}_{scene.scene_id}_{k:04d}"))
    return episodes


def expert_turn_chunks(actions: Sequence[MergedAction], chunk: int = 3) -> list[list[MergedAction]]:
    """Group merged actions into model turns of at most ``chunk`` actions."""
    return [list(actions[i:i + chunk]) for i in range(0, len(actions), chunk)]


def instruction_landmarks(instruction: Sequence[int]) -> list[int]:
    return [decode_instruction_token(t)[0] for t in instruction]
