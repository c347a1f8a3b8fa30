"""Imitation bootstrap in both conditioning modes.

Trains the policy on expert demonstrations from three small scenes and compares
held-out success before and after. ``multi_turn`` conditions each turn on the
actions already taken, ``single_turn`` only on the current observation.
"""

from deskvln import taskgen
from deskvln.evaluation import evaluate_policy
from deskvln.policy import init_params
from deskvln.train_il import ILConfig, expert_sequence, train_il

scenes = taskgen.generate_scenes(seed=21, n=3)
by_id = {s.scene_id: s for s in scenes}
train = taskgen.generate_episodes(scenes, per_scene=60, seed=1)
heldout = taskgen.generate_episodes(scenes, per_scene=8, seed=2, prefix="heldout")
seqs = [expert_sequence(by_id[e.scene_id], e) for e in train]
print(f"{len(train)} demonstrations, {sum(len(s.tokens) for s in seqs)} teacher-forced turns")

for mode in ("multi_turn", "single_turn"):
    p0 = init_params(seed=0)
    before = evaluate_policy(p0, heldout, by_id, mode)[0]
    cfg = ILConfig(learning_rate=3e-3, batch_size=8, epochs=15, mode=mode)
    params, log = train_il(cfg, seqs, p0)
    after = evaluate_policy(params, heldout, by_id, mode)[0]
    print(f"\n{mode}: loss {log[0]['loss']:.2f} -> {log[-1]['loss']:.2f} over {len(log)} steps")
    print(f"  held-out SR {before.sr:.2f} -> {after.sr:.2f}, SPL {after.spl:.2f}, NE {after.ne:.2f} m")
