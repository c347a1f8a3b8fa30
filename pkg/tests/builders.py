"""Synthetic rollout groups for objective-level tests."""

import http.client
import json
from urllib.parse import urlparse

import numpy as np

from deskvln.orchestrator import Trajectory, Turn
from deskvln.policy import CHUNK, STOP_ID, VOCAB, Batch, forward
from deskvln.train_rl import RolloutGroup, group_advantages


def random_turns(rng, obs_dim, n_turns):
    turns = []
    for _ in range(n_turns):
        n = int(rng.integers(1, CHUNK + 1))
        toks = [int(rng.integers(0, STOP_ID)) for _ in range(n - 1)] + [int(rng.integers(0, len(VOCAB)))]
        turns.append(Turn(rng.normal(size=obs_dim), toks))
    return turns


def synthetic_group(rng, params, mode, G=4, rewards=None, ratio_noise=0.05, eid="g"):
    """A scored group whose old log-probs sit ``ratio_noise`` away from the current policy."""
    trajs = []
    for i in range(G):
        t = Trajectory(eid, i, 1, i)
        t.turns = random_turns(rng, params.config.obs_dim, int(rng.integers(1, 4)))
        logp = forward(params, Batch.from_sequences([t.turn_sequence()]), mode).logp[0]
        cur = logp[Batch.from_sequences([t.turn_sequence()]).mask[0] > 0]
        t.logps = list(cur + rng.uniform(-ratio_noise, ratio_noise, size=len(cur)))
        t.status = "stopped"
        trajs.append(t)
    g = RolloutGroup(None, trajs)
    g.rewards = list(rewards if rewards is not None else rng.uniform(0, 15, size=G))
    g.advantages, g.degenerate = group_advantages(g.rewards)
    return g



def http_call(conn, method, path, payload=None):
    """One raw request on an ``http.client`` connection; returns (status, body bytes)."""
    body = None if payload is None else json.dumps(payload)
    conn.request(method, path, body=body, headers={"Content-Type": "application/json"})
    resp = conn.getresponse()
    return resp.status, resp.read()


def transcript(url, episodes, actions_for):
    """Byte log of every request and response for a series of episodes on a live server."""
    u = urlparse(url)
    conn = http.client.HTTPConnection(u.hostname, u.port, timeout=30)
    log = []

    def call(method, path, payload=None):
        status, body = http_call(conn, method, path, payload)
        req = b"" if payload is None else json.dumps(payload, sort_keys=True).encode()
        log.append(b"%s %s %s -> %d %s" % (method.encode(), path.encode(), req, status, body))
        return status, body

    try:
        for ep in episodes:
            call("POST", "/episodes", {"scene_id": ep.scene_id, "start": ep.start.to_list(),
                                       "goal": ep.goal.to_list(), "instruction": list(ep.instruction),
                                       "episode_id": ep.episode_id, "seed": 0})
            for token in actions_for(ep):
                status, body = call("POST", f"/episodes/{ep.episode_id}/step", {"action": token})
                if status != 200 or json.loads(body)["done"]:
                    break
            call("DELETE", f"/episodes/{ep.episode_id}")
        call("GET", "/cache/stats")
    finally:
        conn.close()
    return b"\n".join(log)


def soak(url, episode, sessions=64, steps=20):
    """Step ``sessions`` episodes concurrently with random turns.

    Returns a list of (session, step) pairs whose reported heading disagrees with the
    heading implied by that session's own request order.
    """
    import threading
    u = urlparse(url)
    errors = []

    def worker(k):
        conn = http.client.HTTPConnection(u.hostname, u.port, timeout=60)
        eid = f"soak{k}"
        rng = np.random.default_rng(k)
        heading = episode.start.heading
        try:
            http_call(conn, "POST", "/episodes", {"scene_id": episode.scene_id, "start": episode.start.to_list(),
                                                  "goal": episode.goal.to_list(), "episode_id": eid})
            for i in range(1, steps + 1):
                turn, mag = ("L", "R")[int(rng.integers(2))], int(rng.integers(1, 4))
                heading = (heading + (15 if turn == "L" else -15) * mag) % 360
                status, body = http_call(conn, "POST", f"/episodes/{eid}/step", {"action": f"{turn}{mag}"})
                info = json.loads(body)["info"] if status == 200 else {}
                if info.get("pose", [0, 0, None])[2] != heading or info.get("steps_taken") is None:
                    errors.append((k, i))
            http_call(conn, "DELETE", f"/episodes/{eid}")
        finally:
            conn.close()

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(sessions)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return errors
