import http.client
import json
from urllib.parse import urlparse

import numpy as np
import pytest

from builders import http_call, soak, transcript
from deskvln.simd import RunningServer, SimService, dumps


def create_body(ep, eid=None):
    return {"scene_id": ep.scene_id, "start": ep.start.to_list(), "goal": ep.goal.to_list(),
            "instruction": list(ep.instruction), "episode_id": eid or ep.episode_id}


@pytest.fixture
def service(scene_dir):
    svc = SimService(scene_dir, cache_capacity=2)
    yield svc
    svc.close()


def test_fresh_stats_are_zero(service):
    status, stats = service.handle("GET", "/cache/stats")
    assert status == 200
    assert {k: stats[k] for k in ("hits", "misses", "entries", "evictions")} == dict.fromkeys(
        ("hits", "misses", "entries", "evictions"), 0)
    assert service.handle("GET", "/healthz") == (200, {"status": "ok"})


def test_create_and_cache_hit(service, small_episodes):
    ep = small_episodes[0]
    status, body = service.handle("POST", "/episodes", create_body(ep))
    assert status == 201 and body["observation"] is not None and body["episode_id"] == ep.episode_id
    service.handle("POST", "/episodes", create_body(ep, "again"))
    assert service.cache.stats()["hits"] == 1 and service.cache.stats()["misses"] == 1


def test_error_codes(service, small_episodes, small_scenes):
    ep = small_episodes[0]
    status, body = service.handle("POST", "/episodes", {**create_body(ep), "scene_id": "nope"})
    assert status == 404 and body["error"]["code"] == "unknown_scene"
    sc = small_scenes[0]
    wy, wx = np.argwhere(sc.grid)[0]
    bad = {**create_body(ep), "scene_id": sc.scene_id, "start": list(sc.center_of((int(wx), int(wy)))) + [0]}
    status, body = service.handle("POST", "/episodes", bad)
    assert status == 422 and body["error"]["code"] == "invalid_pose"
    service.handle("POST", "/episodes", create_body(ep))
    status, body = service.handle("POST", f"/episodes/{ep.episode_id}/step", {"action": "F9"})
    assert status == 400 and body["error"]["code"] == "unknown_action"
    assert service.handle("POST", "/episodes/ghost/step", {"action": "F1"})[0] == 404
    assert service.handle("POST", "/episodes", create_body(ep))[0] == 409


def test_expert_stop_succeeds_then_conflict(service, small_episodes):
    ep = small_episodes[1]
    service.handle("POST", "/episodes", create_body(ep))
    for m in ep.expert_actions:
        status, body = service.handle("POST", f"/episodes/{ep.episode_id}/step", {"action": m.token})
        assert status == 200
    assert body["done"] and body["info"]["success"] and body["info"]["d_goal"] <= 3.0
    status, body = service.handle("POST", f"/episodes/{ep.episode_id}/step", {"action": "F1"})
    assert status == 409 and body["error"]["code"] == "episode_done"


def test_structured_action_form(service, small_episodes):
    ep = small_episodes[2]
    service.handle("POST", "/episodes", create_body(ep))
    status, body = service.handle("POST", f"/episodes/{ep.episode_id}/step", {"kind": "LEFT", "magnitude": 2})
    assert status == 200 and body["info"]["steps_taken"] == 2


def test_delete_semantics(service, small_episodes):
    ep = small_episodes[0]
    service.handle("POST", "/episodes", create_body(ep))
    assert service.handle("DELETE", f"/episodes/{ep.episode_id}") == (204, None)
    assert service.handle("POST", f"/episodes/{ep.episode_id}/step", {"action": "F1"})[0] == 404
    assert service.handle("DELETE", f"/episodes/{ep.episode_id}")[0] == 404


def test_thousand_create_delete_cycles_leak_nothing(service, small_episodes):
    ep = small_episodes[0]
    for i in range(1000):
        assert service.handle("POST", "/episodes", create_body(ep, f"c{i}"))[0] == 201
        assert service.handle("DELETE", f"/episodes/c{i}")[0] == 204
    assert service.handle("GET", "/sessions") == (200, {"count": 0})


def test_lru_eviction(service, small_scenes):
    ids = [s.scene_id for s in small_scenes]
    for sid in ids:
        service.cache.get(sid)
    assert not service.cache.contains(ids[0])
    assert service.cache.contains(ids[1]) and service.cache.contains(ids[2])
    assert service.cache.stats()["evictions"] == 1


def test_preload_then_create_adds_no_miss(scene_dir, small_episodes):
    svc = SimService(scene_dir, cache_capacity=4)
    ep = small_episodes[0]
    other = next(e for e in small_episodes if e.scene_id != ep.scene_id)
    status, body = svc.handle("POST", "/scenes/preload", {"scene_ids": [ep.scene_id, other.scene_id, "ghost"]})
    assert status == 202 and body["results"]["ghost"] == "unknown_scene"
    assert body["results"][ep.scene_id] == "queued"
    svc.wait_preloads()
    misses = svc.cache.stats()["misses"]
    svc.handle("POST", "/episodes", create_body(ep))
    assert svc.cache.stats()["misses"] == misses
    svc.close()


def test_cached_and_fresh_responses_identical(scene_dir, small_episodes):
    ep = small_episodes[3]
    bodies = []
    for cap in (0, 8):
        svc = SimService(scene_dir, cache_capacity=cap)
        svc.handle("POST", "/episodes", create_body(ep, "warm"))
        out = [dumps(svc.handle("POST", "/episodes", create_body(ep))[1])]
        for m in ep.expert_actions:
            out.append(dumps(svc.handle("POST", f"/episodes/{ep.episode_id}/step", {"action": m.token})[1]))
        bodies.append(out)
        svc.close()
    assert bodies[0] == bodies[1]


def test_interleaved_sessions_are_isolated(service, small_episodes):
    a, b = small_episodes[0], small_episodes[1]
    solo = SimService(service.cache._source)
    solo.handle("POST", "/episodes", create_body(a))
    ref = [solo.handle("POST", f"/episodes/{a.episode_id}/step", {"action": m.token})[1]
           for m in a.expert_actions]
    solo.close()
    service.handle("POST", "/episodes", create_body(a))
    service.handle("POST", "/episodes", create_body(b))
    got = []
    for m in a.expert_actions:
        got.append(service.handle("POST", f"/episodes/{a.episode_id}/step", {"action": m.token})[1])
        service.handle("POST", f"/episodes/{b.episode_id}/step", {"action": "L1"})
    assert [dumps(x) for x in got] == [dumps(x) for x in ref]


def test_idle_sessions_expire(scene_dir, small_episodes):
    now = [0.0]
    svc = SimService(scene_dir, idle_timeout_s=10, clock=lambda: now[0])
    svc.handle("POST", "/episodes", create_body(small_episodes[0]))
    now[0] = 11.0
    assert svc.handle("GET", "/sessions")[1] == {"count": 0}
    svc.close()


def test_http_transcripts_are_byte_identical(scene_dir, small_episodes):
    eps = small_episodes[:4]
    runs = []
    for _ in range(2):
        with RunningServer(SimService(scene_dir)) as srv:
            runs.append(transcript(srv.url, eps, lambda e: [m.token for m in e.expert_actions]))
    assert runs[0] == runs[1] and b"-> 201" in runs[0]


def test_http_errors_and_unknown_route(scene_dir):
    with RunningServer(SimService(scene_dir)) as srv:
        u = urlparse(srv.url)
        conn = http.client.HTTPConnection(u.hostname, u.port)
        assert http_call(conn, "GET", "/healthz") == (200, b'{"status":"ok"}')
        status, body = http_call(conn, "GET", "/nowhere")
        assert status == 404 and json.loads(body)["error"]["code"] == "not_found"
        conn.request("POST", "/episodes", body="{broken", headers={"Content-Type": "application/json"})
        resp = conn.getresponse()
        assert resp.status == 400
        resp.read()
        conn.close()


def test_concurrent_soak_preserves_order(scene_dir, small_episodes):
    """64 sessions stepped concurrently; each sees exactly its own request order."""
    with RunningServer(SimService(scene_dir)) as srv:
        assert soak(srv.url, small_episodes[0]) == []
        assert srv.service.session_count() == 0
