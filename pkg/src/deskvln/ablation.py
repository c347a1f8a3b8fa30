"""Matched ablation studies: reward designs, paradigms and rollout speedups.

Every cell writes its result (and, for trained cells, a checkpoint) under the
output directory, so an interrupted study resumes where it stopped.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from pathlib import Path

import numpy as np

from .benchmark import Benchmark, cached_cell, run_il, run_rl
from .evaluation import evaluate_policy, local_clients, rollout_policy
from .orchestrator import LocalSimClient, scene_goals
from .simd import SimService
from .train_rl import RLConfig, early_stop_threshold, path_align_weights, train_rl

log = logging.getLogger(__name__)

STUDIES = ("reward", "paradigm", "speedups")
METRIC_COLUMNS = ("NE", "SR", "OSR", "SPL", "nDTW")


def _metrics(report) -> dict:
    return {"NE": report.ne, "SR": report.sr, "OSR": report.osr, "SPL": report.spl, "nDTW": report.ndtw}


def _cell(out_dir, name, compute):
    """Cached JSON result of ``compute()`` for one table cell."""
    if out_dir is None:
        return compute()
    p = Path(out_dir) / f"{name}.json"
    if p.exists():
        return json.loads(p.read_text())
    res = compute()
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    return res


def il_checkpoint(bench: Benchmark, mode: str, seed: int, out_dir=None, **il_overrides):
    def make():
        params, recs = run_il(bench, mode, seed=seed, **il_overrides)
        return params, {"mode": mode, "stage": "il", "seed": seed, "final_loss": recs[-1]["loss"]}
    return cached_cell(out_dir, f"il_{mode}_s{seed}", make)[0]


def rl_checkpoint(bench: Benchmark, il_params, mode: str, seed: int, name: str, out_dir=None, **rl_overrides):
    def make():
        params, recs = run_rl(bench, il_params, mode, seed=seed, **rl_overrides)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            with open(Path(out_dir) / f"{name}.log.jsonl", "w") as f:
                for r in recs:
                    f.write(json.dumps(r) + "\n")
        return params, {"mode": mode, "stage": "rl", "seed": seed}
    return cached_cell(out_dir, name, make)[0]


def paradigm_study(bench: Benchmark, seed: int = 0, out_dir=None, rl_overrides=None, il_overrides=None) -> list[dict]:
    """Rows {multi, single} x {IL, IL+RL} under matched seeds and budgets."""
    rows = []
    for mode in ("multi_turn", "single_turn"):
        il = il_checkpoint(bench, mode, seed, out_dir, **(il_overrides or {}))
        rl = rl_checkpoint(bench, il, mode, seed, f"rl_{mode}_s{seed}", out_dir, **(rl_overrides or {}))
        for stage, params in (("IL", il), ("IL+RL", rl)):
            res = _cell(out_dir, f"eval_{mode}_{stage.replace('+', '_')}_s{seed}",
                        lambda p=params: _metrics(evaluate_policy(p, bench.heldout, bench.scenes, mode)[0]))
            rows.append({"paradigm": mode, "stage": stage, **res})
    return rows


REWARD_ROWS = (("soft", {}), ("hard", {}), ("path_align 3:1", {"ratio": 3.0}),
               ("path_align 2:1", {"ratio": 2.0}), ("path_align 1:1", {"ratio": 1.0}))


def reward_study(bench: Benchmark, seed: int = 0, out_dir=None, rl_overrides=None, il_overrides=None) -> list[dict]:
    mode = "multi_turn"
    il = il_checkpoint(bench, mode, seed, out_dir, **(il_overrides or {}))
    rows = []
    for label, extra in REWARD_ROWS:
        kw = dict(rl_overrides or {})
        if "ratio" in extra:
            kw["reward_kind"] = "path_align"
            kw["w_succ"], kw["w_ndtw"] = path_align_weights(extra["ratio"])
        else:
            kw["reward_kind"] = label
        tag = label.replace(" ", "_").replace(":", "-")
        params = rl_checkpoint(bench, il, mode, seed, f"rl_reward_{tag}_s{seed}", out_dir, **kw)
        res = _cell(out_dir, f"eval_reward_{tag}_s{seed}",
                    lambda p=params: _metrics(evaluate_policy(p, bench.heldout, bench.scenes, mode)[0]))
        rows.append({"reward": label, **res})
    return rows


# -- speedups ---------------------------------------------------------------------

SPEEDUP_ROWS = (("full", {}), ("no-early-stop", {"early_stopping": False}),
                ("no-preload", {"preload": False}), ("no-cache", {"cache_capacity": 0}))


def timed_training(bench: Benchmark, params, scene_source, steps: int = 25, seed: int = 0,
                   cache_capacity: int = 8, mode: str = "multi_turn", **rl_overrides) -> list[dict]:
    """RL steps with a frozen policy (lr 0) against a cold simulator; returns the log."""
    service = SimService(scene_source, cache_capacity=cache_capacity)
    clients = [LocalSimClient(service)]
    cfg = RLConfig(**{"learning_rate": 0.0, "steps": steps, "seed": seed, "mode": mode, **rl_overrides})
    _, _, records = train_rl(cfg, bench.train, bench.scenes, params, clients)
    service.close()
    return records


def speedups_study(bench: Benchmark, params, scene_source, steps: int = 25, seed: int = 0,
                   repeats: int = 2, out_dir=None) -> list[dict]:
    """Mean rollout seconds per step for each ablated technique.

    Configurations are interleaved and repeated so slow drift of the machine
    does not favour any row.
    """
    def compute():
        samples = {name: [] for name, _ in SPEEDUP_ROWS}
        for _ in range(repeats):
            for name, kw in SPEEDUP_ROWS:
                recs = timed_training(bench, params, scene_source, steps, seed, **kw)
                samples[name].extend(r["wall_time_rollout_s"] for r in recs)
        base = float(np.mean(samples["full"]))
        return [{"configuration": name, "mean_rollout_s": float(np.mean(s)),
                 "relative": float(np.mean(s)) / base - 1.0, "steps": steps, "repeats": repeats}
                for name, s in samples.items()]
    return _cell(out_dir, f"speedups_s{seed}", compute)


def early_stop_effect(bench: Benchmark, params, mode: str = "multi_turn", seed: int = 0, repeats: int = 2,
                      alpha_roll: float = 2.0) -> dict:
    """Held-out greedy rollouts of one policy with the early-stop threshold on vs off.

    Seeds and parameters are matched, so the SR difference is exactly the successes
    that needed more than ``alpha_roll`` times the expert length.
    """
    cfg = RLConfig(alpha_roll=alpha_roll)
    clients = local_clients(bench.scenes, cache_capacity=len(bench.scenes))
    clients[0].preload(list(bench.scenes), scene_goals(bench.heldout))
    clients[0].service.wait_preloads(300)
    times = {True: [], False: []}
    sr = {}
    for _ in range(repeats):
        for es in (False, True):
            t0 = time.perf_counter()
            trajs = rollout_policy(params, bench.heldout, mode, clients, temperature=0.0,
                                   t_max_fn=(lambda e: early_stop_threshold(e, cfg)) if es else None, seed=seed)
            times[es].append(time.perf_counter() - t0)
            sr[es] = float(np.mean([t.success for t in trajs]))
            if es:
                rate = float(np.mean([t.status == "early_stopped" for t in trajs]))
    t_on, t_off = float(np.mean(times[True])), float(np.mean(times[False]))
    return {"time_on_s": t_on, "time_off_s": t_off, "time_reduction": 1.0 - t_on / t_off,
            "sr_on": sr[True], "sr_off": sr[False], "sr_change": sr[True] - sr[False], "early_stop_rate": rate}


# -- tables -------------------------------------------------------------------------

def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
