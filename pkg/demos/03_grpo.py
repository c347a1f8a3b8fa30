"""GRPO post-training, piece by piece and then end to end.

First the building blocks on hand-made numbers: rewards, group-relative
advantages and the clipped surrogate. Then a short training run from a quick
imitation checkpoint against an in-process simulator.
"""

import numpy as np

from deskvln import taskgen
from deskvln.evaluation import evaluate_policy, local_clients
from deskvln.policy import init_params
from deskvln.train_il import ILConfig, expert_sequence, train_il
from deskvln.train_rl import RLConfig, clipped_term, early_stop_threshold, group_advantages, path_align_weights, train_rl

# Rewards: 15 for a perfect stop, scaled down linearly inside the 3 m radius.
for d in (0.0, 1.5, 2.9):
    print(f"soft reward for a successful stop {d} m from the goal: {15 * (3 - d) / 3:.2f}")
print("path-aligned weights for a 3:1 success:nDTW ratio:", path_align_weights(3.0))

# Advantages are normalised within a group of rollouts of the same episode.
adv, degenerate = group_advantages([15, 0, 0, 15])
print("\nadvantages of [15, 0, 0, 15]:", np.round(adv, 6), "degenerate:", degenerate)
print("a group of equal rewards is degenerate:", group_advantages([7, 7, 7, 7])[1])
print("advantages do not change when every reward shifts by 2:",
      np.allclose(adv, group_advantages([17, 2, 2, 17])[0], atol=0))

# The surrogate clips the probability ratio at 1 +/- 0.28.
print("\nclipped term, ratio 2.0, A=+1:", float(clipped_term(np.array(2.0), np.array(1.0), 0.28)))
print("clipped term, ratio 0.5, A=-1:", float(clipped_term(np.array(0.5), np.array(-1.0), 0.28)))

scenes = taskgen.generate_scenes(seed=21, n=3)
by_id = {s.scene_id: s for s in scenes}
train = taskgen.generate_episodes(scenes, per_scene=60, seed=1)
heldout = taskgen.generate_episodes(scenes, per_scene=8, seed=2, prefix="heldout")
ep = train[0]
print(f"\nearly-stop budget for {ep.episode_id}: expert uses {ep.expert_primitive_len} primitives, "
      f"rollouts stop after {early_stop_threshold(ep, RLConfig())}")

il, _ = train_il(ILConfig(learning_rate=3e-3, batch_size=8, epochs=15),
                 [expert_sequence(by_id[e.scene_id], e) for e in train], init_params(seed=0))
print(f"\nIL held-out SR: {evaluate_policy(il, heldout, by_id, 'multi_turn')[0].sr:.2f}")

cfg = RLConfig(learning_rate=2e-4, steps=20, prompts_per_batch=8, group_size=4)
rl, _, log = train_rl(cfg, train, by_id, il, local_clients(by_id))
for r in log[::5] + [log[-1]]:
    print(f"  step {r['step']:3d}  reward {r['reward_mean']:6.2f}  train SR {r['sr_train']:.2f}  "
          f"early-stopped {r['early_stop_rate']:.2f}  degenerate groups {r['degenerate_groups']}")
print(f"IL+RL held-out SR after {cfg.steps} steps: {evaluate_policy(rl, heldout, by_id, 'multi_turn')[0].sr:.2f}")
