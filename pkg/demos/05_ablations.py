"""Ablations on a tiny benchmark.

Two of the matched studies from ``deskvln.ablation``: the effect of the early-stop
budget on one fixed policy, and rollout time with caching, preloading and
early stopping turned off one at a time. The full-size versions run in the
acceptance suite and through ``deskvln ablate``.
"""

import tempfile
from pathlib import Path

from deskvln import ablation
from deskvln.benchmark import build_benchmark, run_il

bench = build_benchmark(seed=3, n_scenes=3, train_per_scene=40, heldout_per_scene=10)
work = Path(tempfile.mkdtemp(prefix="deskvln-ablate-"))
bench.save(work)
print(f"benchmark: {len(bench.scenes)} scenes, {len(bench.train)} train, {len(bench.heldout)} held-out episodes")

il, _ = run_il(bench, "multi_turn", n=120, learning_rate=3e-3, batch_size=8, epochs=15)

eff = ablation.early_stop_effect(bench, il, repeats=1)
print("\nearly stopping at 2x the expert length, same policy and seeds:")
print(f"  held-out SR {eff['sr_off']:.2f} without, {eff['sr_on']:.2f} with")
print(f"  {eff['early_stop_rate']:.0%} of rollouts cut short, rollout time {eff['time_reduction']:.0%} lower")

rows = ablation.speedups_study(bench, il, str(work / "scenes"), steps=4, repeats=1)
print("\nmean rollout seconds per RL step, policy frozen (lr 0), cold simulator:")
for r in rows:
    print(f"  {r['configuration']:14s} {r['mean_rollout_s']:.3f} s  ({r['relative']:+.1%} vs full)")
print("\n" + ablation.to_csv(rows), end="")
