"""VLN evaluation metrics: NE, SR, OSR, SPL, DTW and nDTW."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .world import SUCCESS_RADIUS_M, Pose, Scene, euclidean_distance, geodesic_distance


@dataclass
class TrajectoryRecord:
    episode_id: str
    path: list[tuple[float, float]]
    final_pose: Pose
    stopped: bool
    min_goal_distance_seen: float
    status: str = "stopped"
    final_goal_distance: float | None = None  # simulator-reported, preferred over recomputation

    def __post_init__(self):
        if not self.path:
            raise ValueError("trajectory path must be nonempty")

    @property
    def path_length(self) -> float:
        pts = np.asarray(self.path, dtype=float)
        if len(pts) < 2:
            return 0.0
        return float(np.sum(np.hypot(*(pts[1:] - pts[:-1]).T)))


@dataclass
class EpisodeMetrics:
    episode_id: str
    ne: float
    success: bool
    oracle_success: bool
    spl: float
    ndtw: float


@dataclass
class MetricReport:
    episodes: list[EpisodeMetrics] = field(default_factory=list)

    def _mean(self, attr: str) -> float:
        if not self.episodes:
            return float("nan")
        return float(np.mean([float(getattr(e, attr)) for e in self.episodes]))

    @property
    def ne(self) -> float:
        return self._mean("ne")

    @property
    def sr(self) -> float:
        return self._mean("success")

    @property
    def osr(self) -> float:
        return self._mean("oracle_success")

    @property
    def spl(self) -> float:
        return self._mean("spl")

    @property
    def ndtw(self) -> float:
        return self._mean("ndtw")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode_id", "NE", "SR", "OSR", "SPL", "nDTW"])
        for e in self.episodes:
            w.writerow([e.episode_id, f"{e.ne:.6f}", int(e.success), int(e.oracle_success),
                        f"{e.spl:.6f}", f"{e.ndtw:.6f}"])
        w.writerow(["MEAN", f"{self.ne:.6f}", f"{self.sr:.6f}", f"{self.osr:.6f}",
                    f"{self.spl:.6f}", f"{self.ndtw:.6f}"])
        return buf.getvalue()


def navigation_error(traj: TrajectoryRecord, goal: Pose, scene: Scene) -> float:
    if traj.final_goal_distance is not None:
        d = traj.final_goal_distance
    else:
        d = geodesic_distance(scene, traj.final_pose, goal)
    if not math.isfinite(d):
        raise ValueError(f"goal unreachable from final pose of {traj.episode_id}")
    return d


def success(traj: TrajectoryRecord, goal: Pose, scene: Scene, radius: float = SUCCESS_RADIUS_M,
            metric: str = "geodesic") -> bool:
    if not traj.stopped:
        return False
    if metric == "euclidean":
        return euclidean_distance(traj.final_pose, goal) <= radius
    return navigation_error(traj, goal, scene) <= radius


def oracle_success(traj: TrajectoryRecord, radius: float = SUCCESS_RADIUS_M) -> bool:
    return traj.min_goal_distance_seen <= radius


def spl(is_success: bool, path_length: float, reference_length: float) -> float:
    """Success weighted by ``reference_length / max(path_length, reference_length)``."""
    if not is_success:
        return 0.0
    denom = max(path_length, reference_length)
    return 1.0 if denom == 0 else reference_length / denom


def dtw(path_a, path_b) -> float:
    """Dynamic time warping cost under Euclidean point distance, boundaries matched."""
    a = np.asarray(path_a, dtype=float).reshape(-1, 2)
    b = np.asarray(path_b, dtype=float).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("DTW requires nonempty paths")
    cost = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev = acc[i], acc[i - 1]
        c = cost[i - 1]
        for j in range(1, m + 1):
            row[j] = c[j - 1] + min(prev[j - 1], prev[j], row[j - 1])
    return float(acc[n, m])


def ndtw(path, reference, threshold: float = SUCCESS_RADIUS_M) -> float:
    ref = np.asarray(reference, dtype=float).reshape(-1, 2)
    return float(math.exp(-dtw(path, ref) / (len(ref) * threshold)))


def xy(path: Sequence) -> list[tuple[float, float]]:
    out = []
    for p in path:
        if isinstance(p, Pose):
            out.append((p.x, p.y))
        else:
            out.append((float(p[0]), float(p[1])))
    return out


def evaluate_episode(traj: TrajectoryRecord, episode, scene: Scene, metric: str = "geodesic") -> EpisodeMetrics:
    """Score one trajectory against its episode; ``episode`` is a taskgen ``Episode``."""
    ne = navigation_error(traj, episode.goal, scene)
    ok = success(traj, episode.goal, scene, metric=metric)
    ref_len = geodesic_distance(scene, episode.start, episode.goal)
    return EpisodeMetrics(
        episode_id=traj.episode_id, ne=ne, success=ok, oracle_success=oracle_success(traj),
        spl=spl(ok, traj.path_length, ref_len), ndtw=ndtw(traj.path, xy(episode.expert_path)),
    )


def evaluate(trajectories: Sequence[TrajectoryRecord], episodes: dict, scenes: dict) -> MetricReport:
    report = MetricReport()
    for t in trajectories:
        ep = episodes[t.episode_id]
        report.episodes.append(evaluate_episode(t, ep, scenes[ep.scene_id]))
    return report
