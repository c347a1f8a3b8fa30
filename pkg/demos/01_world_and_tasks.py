"""Scenes, episodes and the expert.

Generates one procedural scene, draws a few episodes from it and replays each
expert demonstration through the world model. Also shows the merged-action
compression and the metrics on an expert trajectory.
"""

from deskvln import metrics, taskgen
from deskvln.world import RELATIONS, decode_instruction_token, expand_actions, geodesic_distance

scene = taskgen.generate_scene(seed=3)
free = int((~scene.grid).sum())
print(f"scene {scene.scene_id}: {scene.grid.shape[1]}x{scene.grid.shape[0]} cells, "
      f"{free} free, {len(scene.landmarks)} landmarks")

episodes = taskgen.generate_episodes([scene], per_scene=3, seed=11)
for ep in episodes:
    words = [f"{RELATIONS[r]}({lm})" for lm, r in map(decode_instruction_token, ep.instruction)]
    print(f"\n{ep.episode_id}: geodesic {ep.geodesic_m:.2f} m, instruction {' '.join(words)}")
    print("  expert turns:", " ".join(a.token for a in ep.expert_actions))
    prims = expand_actions(ep.expert_actions)
    assert taskgen.compress_expert(prims) == list(ep.expert_actions)
    print(f"  {len(prims)} primitives compress to {len(ep.expert_actions)} merged actions")

    final = taskgen.replay(scene, ep)[-1]
    d = geodesic_distance(scene, final.pose, ep.goal)
    print(f"  replay: stopped={final.stopped} after {final.steps_taken} primitives, "
          f"{d:.2f} m from the goal (success radius 3 m)")

# The expert is optimal by construction, so its nDTW against itself is 1.
path = metrics.xy(episodes[0].expert_path)
print(f"\nnDTW(expert, expert) = {metrics.ndtw(path, path):.3f}")
print(f"DTW between the first two expert paths = {metrics.dtw(path, metrics.xy(episodes[1].expert_path)):.2f}")
