"""Client-side rollout collection against one or more simulator instances."""

from __future__ import annotations

import hashlib
import http.client
import json
import logging
import socket
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence
from urllib.parse import urlsplit

import numpy as np

from .metrics import TrajectoryRecord
from .policy import (
    EOT_ID, LogProbTrace, PolicyParams, TurnSequence, decode_token, initial_context, step_turn,
)
from .world import MergedAction, Observation, Pose, PrimitiveAction, observation_vector

log = logging.getLogger(__name__)

STEP_CAP = 150
DEFAULT_WORKERS = 8


class SimError(Exception):
    def __init__(self, status: int, body: dict | None):
        self.status = status
        self.body = body or {}
        code = self.body.get("error", {}).get("code", "unknown")
        super().__init__(f"simulator returned {status} ({code})")

    @property
    def code(self) -> str:
        return self.body.get("error", {}).get("code", "unknown")


# -- simulator clients ------------------------------------------------------------

class _ClientBase:
    def request(self, method: str, path: str, payload: dict | None = None) -> tuple[int, dict | None]:
        raise NotImplementedError

    def _ok(self, method, path, payload=None, expect=(200,)):
        status, body = self.request(method, path, payload)
        if status not in expect:
            raise SimError(status, body)
        return body

    def create_episode(self, payload: dict) -> dict:
        return self._ok("POST", "/episodes", payload, expect=(201,))

    def step(self, episode_id: str, action: MergedAction) -> dict:
        return self._ok("POST", f"/episodes/{episode_id}/step", {"action": action.token})

    def delete(self, episode_id: str) -> None:
        self._ok("DELETE", f"/episodes/{episode_id}", expect=(204, 404))

    def preload(self, scene_ids: Sequence[str], goals: dict | None = None) -> dict:
        return self._ok("POST", "/scenes/preload", {"scene_ids": list(scene_ids), "goals": goals or {}},
                        expect=(202,))

    def cache_stats(self) -> dict:
        return self._ok("GET", "/cache/stats")

    def session_count(self) -> int:
        return self._ok("GET", "/sessions")["count"]

    def healthy(self) -> bool:
        try:
            return self._ok("GET", "/healthz").get("status") == "ok"
        except (OSError, SimError):
            return False


class LocalSimClient(_ClientBase):
    """Calls a :class:`~deskvln.simd.SimService` in-process, bypassing HTTP."""

    def __init__(self, service):
        self.service = service

    def request(self, method, path, payload=None):
        return self.service.handle(method, path, payload)


class HTTPSimClient(_ClientBase):
    """Keep-alive JSON client; one connection per calling thread."""

    def __init__(self, url: str, timeout: float = 30.0):
        parts = urlsplit(url)
        self.url = url
        self.host = parts.hostname or "127.0.0.1"
        self.port = parts.port or 80
        self.timeout = timeout
        self._local = threading.local()

    def _conn(self) -> http.client.HTTPConnection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
            conn.connect()
            conn.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._local.conn = conn
        return conn

    def request(self, method, path, payload=None):
        data = None if payload is None else json.dumps(payload).encode()
        headers = {"Content-Type": "application/json"} if data is not None else {}
        for attempt in range(2):
            conn = self._conn()
            try:
                conn.request(method, path, body=data, headers=headers)
                resp = conn.getresponse()
                raw = resp.read()
                return resp.status, (json.loads(raw) if raw else None)
            except (http.client.HTTPException, ConnectionError, OSError):
                conn.close()
                self._local.conn = None
                if attempt == 1:
                    raise
        raise AssertionError("unreachable")


def make_clients(urls: str | Sequence[str]) -> list[HTTPSimClient]:
    if isinstance(urls, str):
        urls = [u for u in urls.split(",") if u]
    return [HTTPSimClient(u) for u in urls]


# -- trajectories ---------------------------------------------------------------

@dataclass
class Turn:
    obs: np.ndarray
    tokens: list[int]


@dataclass
class Trajectory:
    episode_id: str
    group_index: int
    attempt: int
    seed: int
    turns: list[Turn] = field(default_factory=list)
    logps: list[float] = field(default_factory=list)
    poses: list[Pose] = field(default_factory=list)
    status: str = "running"
    primitive_steps: int = 0
    stopped: bool = False
    success: bool = False
    d_goal: float = float("nan")
    min_goal_distance: float = float("inf")
    duration_s: float = 0.0
    reward: dict = field(default_factory=dict)

    @property
    def num_tokens(self) -> int:
        return sum(len(t.tokens) for t in self.turns)

    @property
    def tokens(self) -> list[list[int]]:
        return [t.tokens for t in self.turns]

    def turn_sequence(self) -> TurnSequence:
        return TurnSequence(np.array([t.obs for t in self.turns]), [list(t.tokens) for t in self.turns])

    def trace(self) -> LogProbTrace:
        turn_idx = [i for i, t in enumerate(self.turns) for _ in t.tokens]
        toks = [k for t in self.turns for k in t.tokens]
        return LogProbTrace(np.array(self.logps), np.zeros((len(self.logps), 0)),
                            np.array(turn_idx, dtype=np.int64), np.array(toks, dtype=np.int64))

    def metrics_record(self) -> TrajectoryRecord:
        return TrajectoryRecord(
            episode_id=self.episode_id, path=[(p.x, p.y) for p in self.poses], final_pose=self.poses[-1],
            stopped=self.stopped, min_goal_distance_seen=self.min_goal_distance, status=self.status,
            final_goal_distance=self.d_goal,
        )

    def to_record(self) -> dict:
        return {
            "episode_id": self.episode_id, "group_index": self.group_index, "attempt": self.attempt,
            "seed": self.seed, "tokens": self.tokens, "logps": [round(v, 12) for v in self.logps],
            "poses": [[round(p.x, 6), round(p.y, 6), round(p.heading, 6)] for p in self.poses],
            "status": self.status, "primitive_steps": self.primitive_steps, "stopped": self.stopped,
            "success": self.success, "d_goal": round(self.d_goal, 6),
            "min_goal_distance": round(self.min_goal_distance, 6), "reward": self.reward,
        }

    @classmethod
    def from_record(cls, r: dict) -> "Trajectory":
        t = cls(r["episode_id"], int(r["group_index"]), int(r.get("attempt", 1)), int(r.get("seed", 0)))
        t.turns = [Turn(np.zeros(0), list(toks)) for toks in r["tokens"]]
        t.logps = list(r.get("logps", []))
        t.poses = [Pose.from_list(p) for p in r["poses"]]
        t.status = r["status"]
        t.primitive_steps = int(r["primitive_steps"])
        t.stopped = bool(r["stopped"])
        t.success = bool(r["success"])
        t.d_goal = float(r["d_goal"])
        t.min_goal_distance = float(r["min_goal_distance"])
        t.reward = dict(r.get("reward", {}))
        return t


def trajectory_seed(episode_id: str, group_index: int, attempt: int, base_seed: int = 0) -> int:
    h = hashlib.sha256(f"{base_seed}|{episode_id}|{group_index}|{attempt}".encode()).digest()
    return int.from_bytes(h[:8], "little")


@dataclass
class PlanEntry:
    episode: object
    group_size: int
    t_max: int | None
    temperature: float
    seeds: list[int]
    attempt: int = 1
    endpoint: int = 0
    t_max_unit: str = "primitive"


def plan_group(episode, group_size: int, t_max: int | None, temperature: float, attempt: int = 1,
               base_seed: int = 0, endpoint: int = 0, t_max_unit: str = "primitive") -> PlanEntry:
    seeds = [trajectory_seed(episode.episode_id, g, attempt, base_seed) for g in range(group_size)]
    return PlanEntry(episode, group_size, t_max, temperature, seeds, attempt, endpoint, t_max_unit)


def rollout(episode, params, client, mode: str, seed: int, t_max: int | None = None,
            temperature: float = 1.0, group_index: int = 0, attempt: int = 1,
            step_cap: int = STEP_CAP, t_max_unit: str = "primitive") -> Trajectory:
    """Run one trajectory to STOP, the early-stop threshold or the absolute step cap.

    ``t_max`` counts primitive steps, or model turns when ``t_max_unit == "turns"``.
    """
    turn_limit = None
    if t_max is not None and t_max_unit == "turns":
        turn_limit, t_max = int(t_max), None
    view = params.compute_view() if isinstance(params, PolicyParams) else params
    rng = np.random.default_rng(seed)
    traj = Trajectory(episode.episode_id, group_index, attempt, seed)
    limit = step_cap if t_max is None else min(int(t_max), step_cap)
    limit_status = "early_stopped" if t_max is not None and t_max <= step_cap else "step_capped"
    sid = f"{episode.episode_id}.g{group_index}.a{attempt}.{seed % 10**8}"
    t0 = time.perf_counter()
    resp = client.create_episode({
        "scene_id": episode.scene_id, "start": episode.start.to_list(), "goal": episode.goal.to_list(),
        "instruction": list(episode.instruction), "episode_id": sid, "seed": seed % 2**31,
    })
    try:
        info = resp["info"]
        traj.poses.append(Pose.from_list(info["pose"]))
        traj.min_goal_distance = info["min_goal_distance"]
        traj.d_goal = info["d_goal"]
        obs = observation_vector(Observation.from_dict(resp["observation"]))
        ctx = initial_context(view)
        steps = 0
        while traj.status == "running":
            if len(traj.turns) >= step_cap:
                traj.status = "step_capped"
                break
            if turn_limit is not None and len(traj.turns) >= turn_limit:
                traj.status = "early_stopped"
                break
            tokens, ctx, entries = step_turn(view, ctx, obs, mode, rng, temperature, len(traj.turns))
            traj.turns.append(Turn(obs, tokens))
            traj.logps.extend(e.logp for e in entries)
            for tok in tokens:
                if tok == EOT_ID:
                    break
                action = decode_token(tok)
                if action.kind is not PrimitiveAction.STOP:
                    action = MergedAction(action.kind, min(action.magnitude, limit - steps))
                step = client.step(sid, action)
                info = step["info"]
                steps = info["steps_taken"]
                traj.poses.extend(Pose.from_list(p) for p in info["path"])
                traj.min_goal_distance = info["min_goal_distance"]
                traj.d_goal = info["d_goal"]
                obs = observation_vector(Observation.from_dict(step["observation"]))
                if step["done"]:
                    traj.status = "stopped"
                    traj.stopped = True
                    traj.success = bool(info["success"])
                    break
                if steps >= limit:
                    traj.status = limit_status
                    break
        traj.primitive_steps = steps
    finally:
        try:
            client.delete(sid)
        except (SimError, OSError) as exc:
            log.warning("failed to release session %s: %s", sid, exc)
    traj.duration_s = time.perf_counter() - t0
    return traj


def collect_batch(plan: Sequence[PlanEntry], params, clients: Sequence, mode: str,
                  workers: int = DEFAULT_WORKERS, base_seed: int = 0,
                  step_cap: int = STEP_CAP) -> list[list[Trajectory]]:
    """Roll out every plan entry in parallel lanes; returns one trajectory list per entry.

    A trajectory that hits a simulator error is re-rolled once with a fresh seed; if
    that also fails it is kept with status ``sim_error`` and excluded from the group.
    """
    view = params.compute_view() if isinstance(params, PolicyParams) else params
    jobs = [(pi, g) for pi, entry in enumerate(plan) for g in range(entry.group_size)]

    def run(job):
        pi, g = job
        entry = plan[pi]
        client = clients[(entry.endpoint + g) % len(clients)]
        seed = entry.seeds[g]
        for retry in range(2):
            try:
                return rollout(entry.episode, view, client, mode, seed, entry.t_max, entry.temperature,
                               g, entry.attempt, step_cap, entry.t_max_unit)
            except (SimError, OSError, KeyError) as exc:
                log.warning("rollout %s/%d failed (%s); re-rolling", entry.episode.episode_id, g, exc)
                seed = trajectory_seed(entry.episode.episode_id, g, entry.attempt + 1000 * (retry + 1), base_seed)
        t = Trajectory(entry.episode.episode_id, g, entry.attempt, seed, status="sim_error")
        return t

    if workers <= 1 or len(jobs) <= 1:
        results = [run(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    out: list[list[Trajectory]] = [[] for _ in plan]
    for (pi, _), t in zip(jobs, results):
        if t.status != "sim_error":
            out[pi].append(t)
    return out


def collect_group(entry: PlanEntry, params, client, mode: str, workers: int = DEFAULT_WORKERS) -> list[Trajectory]:
    clients = client if isinstance(client, (list, tuple)) else [client]
    return collect_batch([entry], params, clients, mode, workers)[0]


def announce_next_batch(scene_ids: Sequence[str], clients: Sequence, goals: dict | None = None,
                        enabled: bool = True) -> Future | None:
    """Ask every simulator to preload the next batch's scenes; returns immediately."""
    if not enabled or not scene_ids:
        return None
    fut: Future = Future()

    def send():
        results = {}
        for c in clients:
            try:
                r = c.preload(sorted(set(scene_ids)), goals)
                for sid, status in r.get("results", {}).items():
                    if status != "queued":
                        log.warning("preload of scene %s: %s", sid, status)
                    results[sid] = status
            except (SimError, OSError) as exc:
                log.warning("preload request failed: %s", exc)
        fut.set_result(results)

    threading.Thread(target=send, daemon=True).start()
    return fut


def scene_goals(episodes, res: float = 0.25) -> dict[str, list[list[int]]]:
    """Goal cells per scene for preload requests (distance fields are keyed by goal)."""
    out: dict[str, set] = {}
    for ep in episodes:
        cell = (int(ep.goal.x // res), int(ep.goal.y // res))
        out.setdefault(ep.scene_id, set()).add(cell)
    return {k: [list(c) for c in sorted(v)] for k, v in out.items()}


@dataclass
class TimingRow:
    configuration: str
    mean_rollout_s: float
    steps: int
    samples: list[float] = field(default_factory=list)


def measure_rollout_time(batches: dict[str, Callable[[], float]] | dict, steps: int = 25) -> list[TimingRow]:
    """Mean wall-clock rollout seconds per phase for each named configuration.

    ``batches`` maps a configuration name to a callable that runs ``steps`` rollout
    phases and returns the list of per-phase durations, or to a precomputed list.
    """
    rows = []
    for name, source in batches.items():
        samples = list(source() if callable(source) else source)
        rows.append(TimingRow(name, float(np.mean(samples)) if samples else float("nan"), len(samples), samples))
    return rows
