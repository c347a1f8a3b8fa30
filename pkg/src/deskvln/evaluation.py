"""Held-out evaluation: greedy rollouts, metric reports and top-down SVG renders."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import MetricReport, evaluate
from .orchestrator import (
    LocalSimClient, PlanEntry, SimError, Trajectory, collect_batch, trajectory_seed,
)
from .simd import SimService
from .world import Pose, Scene


def local_clients(scenes: dict[str, Scene], cache_capacity: int = 32) -> list[LocalSimClient]:
    return [LocalSimClient(SimService(scenes, cache_capacity=cache_capacity, preload_workers=1))]


def rollout_policy(params, episodes: Sequence, mode: str, clients, temperature: float = 0.0,
                   t_max_fn=None, seed: int = 0, workers: int = 8) -> list[Trajectory]:
    """One trajectory per episode; ``t_max_fn(episode)`` enables early stopping."""
    plan = [PlanEntry(ep, 1, t_max_fn(ep) if t_max_fn else None, temperature,
                      [trajectory_seed(ep.episode_id, 0, 1, seed)]) for ep in episodes]
    groups = collect_batch(plan, params, clients, mode, workers=workers, base_seed=seed)
    out = []
    for ep, g in zip(episodes, groups):
        if not g:
            raise SimError(500, {"error": {"code": "sim_error", "message": ep.episode_id}})
        out.append(g[0])
    return out


def report_for(trajectories: Sequence[Trajectory], episodes: Sequence, scenes: dict) -> MetricReport:
    by_id = {e.episode_id: e for e in episodes}
    return evaluate([t.metrics_record() for t in trajectories], by_id, scenes)


def evaluate_policy(params, episodes: Sequence, scenes: dict, mode: str, clients=None,
                    workers: int = 8) -> tuple[MetricReport, list[Trajectory]]:
    """Greedy decoding, no early stopping, absolute 150-step cap."""
    clients = clients or local_clients(scenes)
    trajs = rollout_policy(params, episodes, mode, clients, temperature=0.0, workers=workers)
    return report_for(trajs, episodes, scenes), trajs


def expert_trajectory(episode, client) -> Trajectory:
    """Drive the simulator with the episode's expert actions (oracle-as-policy)."""
    sid = f"{episode.episode_id}.expert"
    resp = client.create_episode({"scene_id": episode.scene_id, "start": episode.start.to_list(),
                                  "goal": episode.goal.to_list(), "instruction": list(episode.instruction),
                                  "episode_id": sid})
    traj = Trajectory(episode.episode_id, 0, 1, 0)
    traj.poses.append(Pose.from_list(resp["info"]["pose"]))
    try:
        for a in episode.expert_actions:
            info_resp = client.step(sid, a)
            info = info_resp["info"]
            traj.poses.extend(Pose.from_list(p) for p in info["path"])
            traj.min_goal_distance = info["min_goal_distance"]
            traj.d_goal = info["d_goal"]
            traj.primitive_steps = info["steps_taken"]
            if info_resp["done"]:
                traj.stopped = True
                traj.success = bool(info["success"])
                break
        traj.status = "stopped" if traj.stopped else "step_capped"
    finally:
        client.delete(sid)
    return traj


def render_svg(scene: Scene, expert_path, rollout_path, title: str = "") -> str:
    """Top-down view: occupancy, expert path (green) and rollout path (red)."""
    res = scene.resolution
    h, w = scene.grid.shape
    px = 6
    rects = [f'<rect x="{cx * px}" y="{(h - 1 - cy) * px}" width="{px}" height="{px}" fill="#444"/>'
             for cy, cx in zip(*np.nonzero(scene.grid))]

    def poly(path, colour):
        pts = " ".join(f"{p[0] / res * px:.2f},{(h - p[1] / res) * px:.2f}" for p in path)
        return f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="2"/>'

    lm = [f'<circle cx="{(x + 0.5) * px}" cy="{(h - y - 0.5) * px}" r="{px * 0.6}" fill="#36c"/>'
          for _, (x, y) in scene.landmarks]
    label = f'<text x="4" y="14" font-size="12" fill="#000">{title}</text>' if title else ""
    body = "\n".join(rects + lm + [poly(expert_path, "#0a0"), poly(rollout_path, "#d00"), label])
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * px}" height="{h * px}" '
            f'viewBox="0 0 {w * px} {h * px}">\n<rect width="100%" height="100%" fill="#fff"/>\n{body}\n</svg>\n')


def write_renders(directory, trajectories: Sequence[Trajectory], episodes: Sequence, scenes: dict):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    by_id = {e.episode_id: e for e in episodes}
    for t in trajectories:
        ep = by_id[t.episode_id]
        svg = render_svg(scenes[ep.scene_id], [(p.x, p.y) for p in ep.expert_path],
                         [(p.x, p.y) for p in t.poses], title=t.episode_id)
        (d / f"{t.episode_id}.svg").write_text(svg)
