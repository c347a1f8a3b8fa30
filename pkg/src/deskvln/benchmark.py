"""Standard desk benchmark: fixed scenes, train/held-out splits and experiment helpers."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import taskgen
from .evaluation import evaluate_policy, local_clients
from .policy import PolicyParams, init_params, load_checkpoint, save_checkpoint
from .train_il import ILConfig, expert_sequence, train_il
from .train_rl import RLConfig, train_rl

log = logging.getLogger(__name__)

BENCH_SEED = 7
N_SCENES = 20
TRAIN_PER_SCENE = 100
HELDOUT_PER_SCENE = 10


@dataclass
class Benchmark:
    scenes: dict
    train: list
    heldout: list

    def save(self, directory) -> Path:
        d = Path(directory)
        taskgen.save_scenes(self.scenes.values(), d / "scenes")
        taskgen.write_dataset(self.train, d / "train.jsonl", split="train")
        taskgen.write_dataset(self.heldout, d / "heldout.jsonl", split="heldout")
        return d

    @classmethod
    def load(cls, directory) -> "Benchmark":
        d = Path(directory)
        return cls(taskgen.load_scenes(d / "scenes"), taskgen.read_dataset(d / "train.jsonl"),
                   taskgen.read_dataset(d / "heldout.jsonl"))


def build_benchmark(seed: int = BENCH_SEED, n_scenes: int = N_SCENES, train_per_scene: int = TRAIN_PER_SCENE,
                    heldout_per_scene: int = HELDOUT_PER_SCENE) -> Benchmark:
    """Held-out episodes share the scenes but use a disjoint seed stream."""
    scenes = taskgen.generate_scenes(seed, n_scenes)
    train = taskgen.generate_episodes(scenes, train_per_scene, seed * 2 + 1, prefix="train")
    heldout = taskgen.generate_episodes(scenes, heldout_per_scene, seed * 2 + 2, prefix="heldout")
    return Benchmark({s.scene_id: s for s in scenes}, train, heldout)


def cached_benchmark(directory, **kw) -> Benchmark:
    d = Path(directory)
    if (d / "heldout.jsonl").exists():
        return Benchmark.load(d)
    bench = build_benchmark(**kw)
    bench.save(d)
    return bench


# -- experiment presets --------------------------------------------------------------

IL_SUBSET = 400
IL_PRESET = dict(learning_rate=3e-3, batch_size=16, epochs=12)
RL_PRESET = dict(learning_rate=2e-4, steps=300)


def il_dataset(bench: Benchmark, n: int = IL_SUBSET, seed: int = 0):
    """A small expert subset: the first ``n`` training episodes in a seeded order."""
    idx = np.random.default_rng(seed).permutation(len(bench.train))[:n]
    eps = [bench.train[i] for i in sorted(idx)]
    return [expert_sequence(bench.scenes[e.scene_id], e) for e in eps]


def run_il(bench: Benchmark, mode: str, seed: int = 0, n: int = IL_SUBSET, **overrides) -> tuple[PolicyParams, list]:
    cfg = ILConfig(**{**IL_PRESET, **overrides, "mode": mode, "seed": seed})
    return train_il(cfg, il_dataset(bench, n, seed), init_params(seed=seed))


def run_rl(bench: Benchmark, params: PolicyParams, mode: str, seed: int = 0, clients=None, sink=None,
           **overrides) -> tuple[PolicyParams, list]:
    cfg = RLConfig(**{**RL_PRESET, **overrides, "mode": mode, "seed": seed})
    clients = clients or local_clients(bench.scenes, cache_capacity=N_SCENES)
    out, _, records = train_rl(cfg, bench.train, bench.scenes, params, clients, sink=sink)
    return out, records


def heldout_sr(bench: Benchmark, params, mode: str) -> float:
    report, _ = evaluate_policy(params, bench.heldout, bench.scenes, mode)
    return report.sr


def cell_path(directory, name: str) -> Path:
    return Path(directory) / f"{name}.ckpt"


def cached_cell(directory, name: str, make):
    """Run ``make() -> (params, meta)`` once and keep its checkpoint for resumption."""
    if directory is None:
        return make()
    p = cell_path(directory, name)
    if p.exists():
        params, _, meta = load_checkpoint(p)
        return params, meta
    params, meta = make()
    p.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, None, p, meta)
    return params, meta


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
