"""The simulator as a separate HTTP service.

Starts a server on a free port over a temporary scene directory, then talks to
it directly and through the rollout client. The same expert replay is run
in-process to show that both transports give identical trajectories.
"""

import json
import tempfile

from deskvln import taskgen
from deskvln.evaluation import expert_trajectory
from deskvln.orchestrator import HTTPSimClient, LocalSimClient
from deskvln.simd import RunningServer, SimService

scenes = taskgen.generate_scenes(seed=5, n=2)
episodes = taskgen.generate_episodes(scenes, per_scene=2, seed=3)
scene_dir = tempfile.mkdtemp(prefix="deskvln-scenes-")
taskgen.save_scenes(scenes, scene_dir)

with RunningServer(SimService(scene_dir, cache_capacity=4)) as srv:
    client = HTTPSimClient(srv.url)
    print("server at", srv.url, "healthy:", client.healthy())

    print("preload:", client.preload([s.scene_id for s in scenes]))
    srv.service.wait_preloads()

    ep = episodes[0]
    status, body = client.request("POST", "/episodes", {
        "scene_id": ep.scene_id, "start": ep.start.to_list(), "goal": ep.goal.to_list(),
        "instruction": list(ep.instruction), "episode_id": "demo"})
    print(f"\nPOST /episodes -> {status}, d_goal {body['info']['d_goal']} m")
    status, body = client.request("POST", "/episodes/demo/step", {"action": "F3"})
    print(f"step F3 -> {status}, pose {body['info']['pose']}, {len(body['info']['path'])} primitive poses")
    print("bad token ->", client.request("POST", "/episodes/demo/step", {"action": "F4"}))
    print("DELETE ->", client.request("DELETE", "/episodes/demo")[0])
    print("unknown episode ->", client.request("DELETE", "/episodes/demo"))

    remote = [expert_trajectory(e, client) for e in episodes]
    print("\ncache stats:", json.dumps(client.cache_stats()))
    print("open sessions after the replays:", client.session_count())

local = LocalSimClient(SimService(scene_dir))
same = all(expert_trajectory(e, local).to_record() == r.to_record() for e, r in zip(episodes, remote))
print("HTTP and in-process expert trajectories identical:", same)
print("successes:", [t.success for t in remote])
