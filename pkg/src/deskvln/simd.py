"""Standalone HTTP simulator service with scene caching and preloading.

The routing core (:class:`SimService`) is transport-agnostic: ``handle`` takes a
method, a path and a decoded JSON payload and returns ``(status, body)``. The
HTTP layer only does (de)serialization, so in-process and networked clients
observe identical behavior.

Endpoints::

    POST   /episodes                {scene_id, start, goal, instruction?, episode_id?, seed?}
    POST   /episodes/{id}/step      {action: "F2"} or {kind: "FORWARD", magnitude: 2}
    DELETE /episodes/{id}
    POST   /scenes/preload          {scene_ids: [...], goals?: {scene_id: [[cx, cy], ...]}}
    GET    /cache/stats
    GET    /sessions
    GET    /healthz
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Mapping

from .world import (
    EpisodeState, InvalidEpisodeError, InvalidPoseError, MergedAction, Pose, PrimitiveAction,
    Scene, SceneFormatError, apply_merged, goal_distance, is_success, observe, start_episode,
)

log = logging.getLogger(__name__)

DEFAULT_CACHE_CAPACITY = 8
DEFAULT_IDLE_TIMEOUT_S = 600.0
DEFAULT_PORT = 8765


class SceneNotFound(Exception):
    pass


def dumps(obj) -> bytes:
    """Canonical JSON encoding used for every response body."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def _r6(x: float) -> float:
    return round(float(x), 6)


class SceneCache:
    """LRU cache of loaded scenes (and the distance fields they carry).

    ``capacity = 0`` disables caching: every request loads the scene afresh.
    Loads of the same scene that overlap in time share one in-flight load.
    """

    def __init__(self, source, capacity: int = DEFAULT_CACHE_CAPACITY):
        self.capacity = int(capacity)
        self._source = source
        self._entries: OrderedDict[str, Scene] = OrderedDict()
        self._inflight: dict[str, threading.Event] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        self.preloads = 0

    def _load(self, scene_id: str) -> Scene:
        src = self._source
        if isinstance(src, Mapping):
            if scene_id not in src:
                raise SceneNotFound(scene_id)
            s = src[scene_id]
            return Scene(s.scene_id, s.grid, s.landmarks, s.resolution)
        if "/" in scene_id or "\\" in scene_id or scene_id.startswith("."):
            raise SceneNotFound(scene_id)
        path = Path(src) / f"{scene_id}.json"
        if not path.is_file():
            raise SceneNotFound(scene_id)
        return Scene.load(path)

    def exists(self, scene_id: str) -> bool:
        if isinstance(self._source, Mapping):
            return scene_id in self._source
        return (Path(self._source) / f"{scene_id}.json").is_file()

    def _insert(self, scene: Scene):
        self._entries[scene.scene_id] = scene
        self._entries.move_to_end(scene.scene_id)
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)
            self.evictions += 1

    def get(self, scene_id: str, _preload: bool = False) -> Scene:
        if self.capacity <= 0:
            with self._lock:
                self.misses += 1
            return self._load(scene_id)
        while True:
            with self._lock:
                scene = self._entries.get(scene_id)
                if scene is not None:
                    self._entries.move_to_end(scene_id)
                    if not _preload:
                        self.hits += 1
                    return scene
                pending = self._inflight.get(scene_id)
                if pending is None:
                    pending = threading.Event()
                    self._inflight[scene_id] = pending
                    self.misses += 1
                    if _preload:
                        self.preloads += 1
                    owner = True
                else:
                    owner = False
            if not owner:
                pending.wait()
                with self._lock:
                    scene = self._entries.get(scene_id)
                    if scene is not None:
                        self._entries.move_to_end(scene_id)
                        if not _preload:
                            self.hits += 1
                        return scene
                continue
            try:
                scene = self._load(scene_id)
                with self._lock:
                    self._insert(scene)
                return scene
            finally:
                with self._lock:
                    self._inflight.pop(scene_id, None)
                pending.set()

    def contains(self, scene_id: str) -> bool:
        with self._lock:
            return scene_id in self._entries

    def stats(self) -> dict:
        with self._lock:
            return {"hits": self.hits, "misses": self.misses, "entries": len(self._entries),
                    "evictions": self.evictions, "preloads": self.preloads, "capacity": self.capacity}


@dataclass
class EpisodeSession:
    episode_id: str
    scene: Scene
    state: EpisodeState
    created: float
    last_used: float
    seed: int | None = None
    step_log: list = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)


def _pose_json(p: Pose) -> list[float]:
    return [_r6(p.x), _r6(p.y), _r6(p.heading)]


def _parse_action(body: dict) -> MergedAction:
    if "action" in body:
        tok = body["action"]
        if not isinstance(tok, str):
            raise ValueError("action must be a token string")
        return MergedAction.from_token(tok)
    kind = body.get("kind")
    if kind not in PrimitiveAction.__members__:
        raise ValueError(f"unknown action kind {kind!r}")
    return MergedAction(PrimitiveAction[kind], int(body.get("magnitude", 1)))


class SimService:
    def __init__(self, scene_source, cache_capacity: int = DEFAULT_CACHE_CAPACITY,
                 idle_timeout_s: float = DEFAULT_IDLE_TIMEOUT_S, preload_workers: int = 2,
                 clock: Callable[[], float] = time.monotonic):
        self.cache = SceneCache(scene_source, cache_capacity)
        self.idle_timeout_s = idle_timeout_s
        self.clock = clock
        self._sessions: dict[str, EpisodeSession] = {}
        self._lock = threading.Lock()
        self._counter = 0
        self._pool = ThreadPoolExecutor(max_workers=max(preload_workers, 1), thread_name_prefix="preload")
        self.preload_status: dict[str, str] = {}

    def close(self):
        self._pool.shutdown(wait=True)

    # -- routing -------------------------------------------------------------

    def handle(self, method: str, path: str, payload: dict | None = None) -> tuple[int, dict | None]:
        payload = payload or {}
        parts = [p for p in path.split("?")[0].split("/") if p]
        try:
            if method == "GET" and parts == ["healthz"]:
                return 200, {"status": "ok"}
            if method == "GET" and parts == ["cache", "stats"]:
                return 200, self.cache.stats()
            if method == "GET" and parts == ["sessions"]:
                self._expire_idle()
                with self._lock:
                    return 200, {"count": len(self._sessions)}
            if method == "POST" and parts == ["episodes"]:
                return self.create_episode(payload)
            if method == "POST" and len(parts) == 3 and parts[0] == "episodes" and parts[2] == "step":
                return self.step(parts[1], payload)
            if method == "DELETE" and len(parts) == 2 and parts[0] == "episodes":
                return self.delete(parts[1])
            if method == "POST" and parts == ["scenes", "preload"]:
                return self.preload(payload)
        except Exception as exc:  # pragma: no cover - defensive
            log.exception("internal error on %s %s", method, path)
            return 500, _error("internal", str(exc))
        return 404, _error("not_found", f"no route for {method} {path}")

    # -- episodes --------------------------------------------------------------

    def create_episode(self, body: dict) -> tuple[int, dict]:
        self._expire_idle()
        scene_id = body.get("scene_id")
        if not isinstance(scene_id, str):
            return 400, _error("bad_request", "scene_id is required")
        try:
            start = Pose.from_list(body["start"])
            goal = Pose.from_list(body["goal"])
            instruction = [int(t) for t in body.get("instruction", [])]
        except (KeyError, TypeError, ValueError) as exc:
            return 400, _error("bad_request", f"malformed pose or instruction: {exc}")
        try:
            scene = self.cache.get(scene_id)
        except SceneNotFound:
            return 404, _error("unknown_scene", f"scene {scene_id!r} not found")
        except SceneFormatError as exc:
            return 500, _error("bad_scene_file", str(exc))
        with self._lock:
            self._counter += 1
            eid = str(body.get("episode_id") or f"ep-{self._counter:06d}")
            if eid in self._sessions:
                return 409, _error("duplicate_episode", f"episode {eid!r} already exists")
        try:
            state = start_episode(scene, eid, start, goal, instruction, body.get("goal_metric", "geodesic"))
        except InvalidPoseError as exc:
            return 422, _error("invalid_pose", str(exc))
        now = self.clock()
        session = EpisodeSession(eid, scene, state, now, now, body.get("seed"))
        with self._lock:
            if eid in self._sessions:
                return 409, _error("duplicate_episode", f"episode {eid!r} already exists")
            self._sessions[eid] = session
        return 201, {"episode_id": eid, "observation": observe(state, scene).to_dict(),
                     "info": self._info(session, [])}

    def _info(self, session: EpisodeSession, path: list[Pose]) -> dict:
        st = session.state
        d = goal_distance(session.scene, st.pose, st.goal, st.goal_metric)
        return {
            "d_goal": _r6(d), "success": bool(st.stopped and is_success(st, session.scene)),
            "steps_taken": st.steps_taken, "collision": bool(st.last_collision),
            "pose": _pose_json(st.pose), "path": [_pose_json(p) for p in path],
            "min_goal_distance": _r6(st.min_goal_distance_seen), "cursor": st.cursor,
            "stopped": bool(st.stopped),
        }

    def _session(self, eid: str) -> EpisodeSession | None:
        with self._lock:
            return self._sessions.get(eid)

    def step(self, eid: str, body: dict) -> tuple[int, dict]:
        session = self._session(eid)
        if session is None:
            return 404, _error("unknown_episode", f"episode {eid!r} not found")
        try:
            action = _parse_action(body)
        except (ValueError, TypeError) as exc:
            return 400, _error("unknown_action", str(exc))
        with session.lock:
            if self._session(eid) is not session:
                return 404, _error("unknown_episode", f"episode {eid!r} not found")
            if session.state.done:
                return 409, _error("episode_done", f"episode {eid!r} is already done")
            trace: list[EpisodeState] = []
            try:
                session.state = apply_merged(session.state, session.scene, action, trace)
            except InvalidEpisodeError as exc:
                return 409, _error("episode_done", str(exc))
            session.last_used = self.clock()
            session.step_log.append(action.token)
            return 200, {"observation": observe(session.state, session.scene).to_dict(),
                         "done": session.state.done,
                         "info": self._info(session, [s.pose for s in trace])}

    def delete(self, eid: str) -> tuple[int, None | dict]:
        with self._lock:
            session = self._sessions.pop(eid, None)
        if session is None:
            return 404, _error("unknown_episode", f"episode {eid!r} not found")
        return 204, None

    def _expire_idle(self):
        if self.idle_timeout_s is None or self.idle_timeout_s <= 0:
            return
        now = self.clock()
        with self._lock:
            stale = [k for k, s in self._sessions.items() if now - s.last_used > self.idle_timeout_s]
            for k in stale:
                del self._sessions[k]

    def session_count(self) -> int:
        with self._lock:
            return len(self._sessions)

    # -- preloading -----------------------------------------------------------

    def preload(self, body: dict) -> tuple[int, dict]:
        ids = body.get("scene_ids", [])
        goals = body.get("goals", {}) or {}
        if not isinstance(ids, list):
            return 400, _error("bad_request", "scene_ids must be a list")
        results = {}
        for sid in ids:
            if not isinstance(sid, str) or not self.cache.exists(sid):
                results[str(sid)] = "unknown_scene"
                continue
            results[sid] = "queued"
            self.preload_status[sid] = "queued"
            self._pool.submit(self._preload_one, sid, [tuple(g) for g in goals.get(sid, [])])
        return 202, {"results": results}

    def _preload_one(self, scene_id: str, goals):
        try:
            scene = self.cache.get(scene_id, _preload=True)
            for g in goals:
                if scene.is_free_cell(g):
                    scene.distance_field(g)
            self.preload_status[scene_id] = "loaded"
        except Exception as exc:  # background worker: report, never raise
            log.warning("preload of %s failed: %s", scene_id, exc)
            self.preload_status[scene_id] = "failed"

    def wait_preloads(self, timeout: float = 30.0):
        """Block until queued preload jobs finish (testing and benchmarks)."""
        deadline = time.monotonic() + timeout
        while any(v == "queued" for v in list(self.preload_status.values())):
            if time.monotonic() > deadline:
                raise TimeoutError("preloads did not finish")
            time.sleep(0.001)


def _error(code: str, message: str) -> dict:
    return {"error": {"code": code, "message": message}}


# -- HTTP transport ---------------------------------------------------------------

class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    disable_nagle_algorithm = True
    service: SimService

    def log_message(self, format, *args):  # noqa: A002
        log.debug("%s - %s", self.address_string(), format % args)

    def _dispatch(self, method: str):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        try:
            payload = json.loads(raw) if raw else {}
        except json.JSONDecodeError:
            return self._send(400, _error("bad_request", "body is not valid JSON"))
        if not isinstance(payload, dict):
            return self._send(400, _error("bad_request", "body must be a JSON object"))
        status, body = self.service.handle(method, self.path, payload)
        self._send(status, body)

    def _send(self, status: int, body):
        data = b"" if body is None else dumps(body)
        self.send_response(status)
        if body is not None:
            self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        if data:
            self.wfile.write(data)

    def do_GET(self):  # noqa: N802
        self._dispatch("GET")

    def do_POST(self):  # noqa: N802
        self._dispatch("POST")

    def do_DELETE(self):  # noqa: N802
        self._dispatch("DELETE")


class SimServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128


def make_server(service: SimService, host: str = "127.0.0.1", port: int = 0) -> SimServer:
    handler = type("Handler", (_Handler,), {"service": service})
    return SimServer((host, port), handler)


class RunningServer:
    """A server running on a background thread; usable as a context manager."""

    def __init__(self, service: SimService, host: str = "127.0.0.1", port: int = 0):
        self.service = service
        self.server = make_server(service, host, port)
        self.thread = threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.05},
                                       daemon=True)
        self.thread.start()

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def stop(self):
        self.server.shutdown()
        self.server.server_close()
        self.service.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()

