"""Command-line entry point: ``deskvln <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import taskgen
from .config import ConfigError, build, parse_file, parse_overrides, section
from .policy import PolicyConfig, init_params, load_checkpoint, save_checkpoint

log = logging.getLogger("deskvln")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class RuntimeFailure(Exception):
    pass


# -- shared helpers --------------------------------------------------------------

def _flat_config(args) -> dict:
    flat = parse_file(args.config) if getattr(args, "config", None) else {}
    flat.update(parse_overrides(getattr(args, "set", None)))
    return flat


def _asdict(obj) -> dict:
    return dataclasses.asdict(obj) if dataclasses.is_dataclass(obj) else dict(obj)


def _print_config(resolved: dict) -> int:
    print(json.dumps(resolved, indent=2, sort_keys=True, default=str))
    return EXIT_OK


def _data_paths(data_dir) -> dict:
    d = Path(data_dir)
    if not d.is_dir():
        raise RuntimeFailure(f"data directory not found: {d}")
    return {"scenes": d / "scenes", "train": d / "train.jsonl", "heldout": d / "heldout.jsonl"}


def _load_split(data_dir, split: str):
    paths = _data_paths(data_dir)
    if not paths[split].is_file():
        raise RuntimeFailure(f"{paths[split]} not found")
    return taskgen.load_scenes(paths["scenes"]), taskgen.read_dataset(paths[split])


def _clients(sim: str, scene_dir):
    from .orchestrator import LocalSimClient, make_clients
    from .simd import SimService
    if sim == "local":
        return [LocalSimClient(SimService(str(scene_dir)))]
    clients = make_clients(sim)
    if not clients:
        raise ConfigError("--sim needs at least one URL (or 'local')")
    for c in clients:
        if not c.healthy():
            raise RuntimeFailure(f"simulator at {c.url} is not healthy")
    return clients


def _write_jsonl(records, path):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


# -- subcommands ------------------------------------------------------------------

def cmd_gen_scenes(args) -> int:
    flat = _flat_config(args)
    cfg = build(taskgen.SceneConfig, section(flat, "scene"), "scene")
    resolved = {"scene": _asdict(cfg), "n": args.n, "seed": args.seed, "out": args.out}
    if args.print_config:
        return _print_config(resolved)
    scenes = taskgen.generate_scenes(args.seed, args.n, cfg)
    paths = taskgen.save_scenes(scenes, args.out)
    print(f"wrote {len(paths)} scenes to {args.out}")
    return EXIT_OK


def cmd_gen_episodes(args) -> int:
    flat = _flat_config(args)
    cfg = build(taskgen.EpisodeConfig, section(flat, "episode"), "episode")
    out = Path(args.out)
    target = out if out.suffix == ".jsonl" else out / f"{args.split}.jsonl"
    scene_dir = Path(args.scene_dir) if args.scene_dir else target.parent / "scenes"
    resolved = {"episode": _asdict(cfg), "episodes_per_scene": args.per_scene, "seed": args.seed,
                "split": args.split, "scene_dir": str(scene_dir), "out": str(target)}
    if args.print_config:
        return _print_config(resolved)
    if not scene_dir.is_dir():
        raise RuntimeFailure(f"scene directory not found: {scene_dir}")
    scenes = taskgen.load_scenes(scene_dir)
    if not scenes:
        raise RuntimeFailure(f"no scenes in {scene_dir}")
    ordered = [scenes[k] for k in sorted(scenes)]
    eps = taskgen.generate_episodes(ordered, args.per_scene, args.seed, cfg, prefix=args.split)
    target.parent.mkdir(parents=True, exist_ok=True)
    man = taskgen.write_dataset(eps, target, split=args.split)
    print(f"wrote {man.episode_count} episodes to {target} (sha256 {man.digest[:12]})")
    return EXIT_OK


def cmd_train_il(args) -> int:
    import numpy as np
    from .evaluation import evaluate_policy
    from .train_il import ILConfig, expert_sequence, train_il

    flat = _flat_config(args)
    il_section = section(flat, "il")
    subset = int(il_section.pop("subset", 0) or 0)
    val_n = int(il_section.pop("val_episodes", 50))
    if args.seed is not None:
        il_section["seed"] = args.seed
    cfg = build(ILConfig, il_section, "il")
    pcfg = build(PolicyConfig, section(flat, "policy"), "policy")
    resolved = {"il": _asdict(cfg), "il_subset": subset, "il_val_episodes": val_n, "policy": _asdict(pcfg),
                "data": args.data, "out": args.out}
    if args.print_config:
        return _print_config(resolved)
    scenes, train = _load_split(args.data, "train")
    if subset:
        idx = np.random.default_rng(cfg.seed).permutation(len(train))[:subset]
        train = [train[i] for i in sorted(idx)]
    seqs = [expert_sequence(scenes[e.scene_id], e) for e in train]
    validate = None
    heldout_path = _data_paths(args.data)["heldout"]
    if val_n and heldout_path.is_file():
        val = taskgen.read_dataset(heldout_path)[:val_n]
        validate = lambda p: evaluate_policy(p, val, scenes, cfg.mode)[0].sr  # noqa: E731
    log_path = args.log or f"{args.out}.log.jsonl"
    with open(log_path, "w") as fh:
        sink = lambda r: fh.write(json.dumps(r) + "\n")  # noqa: E731
        params, records = train_il(cfg, seqs, init_params(pcfg, seed=cfg.seed), validate, sink)
    save_checkpoint(params, None, args.out, {"mode": cfg.mode, "stage": "il", "config": resolved})
    print(f"IL done: {len(records)} steps, final loss {records[-1]['loss']:.4f}; checkpoint {args.out}")
    return EXIT_OK


def _checkpoint_mode(meta: dict, requested: str | None) -> str:
    ck_mode = meta.get("mode")
    if requested and ck_mode and requested != ck_mode:
        raise ConfigError(f"mode {requested!r} does not match checkpoint mode {ck_mode!r}")
    return requested or ck_mode or "multi_turn"


def cmd_train_rl(args) -> int:
    from .train_rl import RLConfig, train_rl

    flat = _flat_config(args)
    rl_section = section(flat, "rl")
    if args.seed is not None:
        rl_section["seed"] = args.seed
    if args.literal_soft_reward:
        rl_section["literal_soft_reward"] = True
    requested_mode = rl_section.pop("mode", None)
    if not Path(args.ckpt).is_file():
        raise RuntimeFailure(f"checkpoint not found: {args.ckpt}")
    params, _, meta = load_checkpoint(args.ckpt)
    rl_section["mode"] = _checkpoint_mode(meta, requested_mode)
    cfg = build(RLConfig, rl_section, "rl")
    resolved = {"rl": _asdict(cfg), "ckpt": args.ckpt, "sim": args.sim, "data": args.data, "out": args.out}
    if args.print_config:
        return _print_config(resolved)
    scenes, pool = _load_split(args.data, "train")
    clients = _clients(args.sim, _data_paths(args.data)["scenes"])
    log_path = args.log or f"{args.out}.log.jsonl"
    with open(log_path, "w") as fh:
        def sink(r):
            fh.write(json.dumps(r) + "\n")
            fh.flush()
        params, opt, records = train_rl(cfg, pool, scenes, params, clients, sink=sink,
                                        trajectory_file=args.trajectories, abort_checkpoint=f"{args.out}.abort")
    save_checkpoint(params, opt, args.out, {"mode": cfg.mode, "stage": "rl", "config": resolved})
    last = records[-1] if records else {}
    print(f"RL done: {len(records)} steps, last reward_mean {last.get('reward_mean', float('nan')):.3f}; "
          f"checkpoint {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import expert_trajectory, report_for, rollout_policy, write_renders

    resolved = {"ckpt": args.ckpt, "data": args.data, "split": args.split, "sim": args.sim, "mode": args.mode,
                "greedy": args.greedy, "expert": args.expert, "out": args.out, "render": args.render,
                "seed": args.seed or 0}
    if args.print_config:
        return _print_config(resolved)
    if not args.expert and not args.ckpt:
        raise ConfigError("eval needs --ckpt (or --expert)")
    scenes, episodes = _load_split(args.data, args.split)
    clients = _clients(args.sim, _data_paths(args.data)["scenes"])
    if args.expert:
        trajs = [expert_trajectory(e, clients[0]) for e in episodes]
    else:
        if not Path(args.ckpt).is_file():
            raise RuntimeFailure(f"checkpoint not found: {args.ckpt}")
        params, _, meta = load_checkpoint(args.ckpt)
        mode = _checkpoint_mode(meta, args.mode)
        trajs = rollout_policy(params, episodes, mode, clients, temperature=0.0 if args.greedy else 1.0,
                               seed=args.seed or 0)
    report = report_for(trajs, episodes, scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    _write_jsonl([t.to_record() for t in trajs], out / "trajectories.jsonl")
    if args.render:
        write_renders(args.render, trajs, episodes, scenes)
    print(f"SR {report.sr:.3f}  SPL {report.spl:.3f}  NE {report.ne:.3f}  OSR {report.osr:.3f}  "
          f"nDTW {report.ndtw:.3f}  ({len(trajs)} episodes) -> {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_serve_sim(args) -> int:
    from .simd import DEFAULT_CACHE_CAPACITY, DEFAULT_PORT, SimService, make_server

    port = args.port if args.port is not None else int(os.environ.get("SIM_PORT", DEFAULT_PORT))
    scene_dir = args.scene_dir or os.environ.get("SIM_SCENE_DIR")
    capacity = (args.cache_capacity if args.cache_capacity is not None
                else int(os.environ.get("SIM_CACHE_CAPACITY", DEFAULT_CACHE_CAPACITY)))
    resolved = {"host": args.host, "port": port, "scene_dir": scene_dir, "cache_capacity": capacity,
                "idle_timeout_s": args.idle_timeout}
    if args.print_config:
        return _print_config(resolved)
    if not scene_dir:
        raise ConfigError("scene directory required (--scene-dir or SIM_SCENE_DIR)")
    if not Path(scene_dir).is_dir():
        raise RuntimeFailure(f"scene directory not found: {scene_dir}")
    service = SimService(scene_dir, cache_capacity=capacity, idle_timeout_s=args.idle_timeout)
    server = make_server(service, args.host, port)
    print(f"serving scenes from {scene_dir} on http://{args.host}:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        service.close()
    return EXIT_OK


def cmd_ablate(args) -> int:
    from . import ablation
    from .benchmark import Benchmark

    flat = _flat_config(args)
    rl_over = section(flat, "rl")
    il_over = section(flat, "il")
    if args.steps is not None:
        rl_over["steps"] = args.steps
    resolved = {"study": args.study, "data": args.data, "out": args.out, "seed": args.seed or 0,
                "rl_overrides": rl_over, "il_overrides": il_over}
    if args.print_config:
        return _print_config(resolved)
    paths = _data_paths(args.data)
    bench = Benchmark(taskgen.load_scenes(paths["scenes"]), taskgen.read_dataset(paths["train"]),
                      taskgen.read_dataset(paths["heldout"]))
    out = Path(args.out)
    cells = out / "cells"
    seed = args.seed or 0
    if args.study == "paradigm":
        rows = ablation.paradigm_study(bench, seed, cells, rl_over, il_over)
    elif args.study == "reward":
        rows = ablation.reward_study(bench, seed, cells, rl_over, il_over)
    else:
        il = ablation.il_checkpoint(bench, "multi_turn", seed, cells, **il_over)
        rows = ablation.speedups_study(bench, il, str(paths["scenes"]), steps=int(rl_over.get("steps", 25)),
                                       seed=seed, out_dir=cells)
    table = ablation.to_csv(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.study}.csv").write_text(table)
    print(table, end="")
    return EXIT_OK


SERIES = (("reward", "reward_mean"), ("sr", "sr_train"), ("episode_len", "episode_len_mean"),
          ("early_stop_rate", "early_stop_rate"))


def cmd_report(args) -> int:
    resolved = {"log": args.log, "out": args.out, "trajectories": args.trajectories, "data": args.data}
    if args.print_config:
        return _print_config(resolved)
    if not args.log and not args.trajectories:
        raise ConfigError("report needs --log and/or --trajectories")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.log:
        p = Path(args.log)
        if not p.is_file():
            raise RuntimeFailure(f"log file not found: {p}")
        records = []
        for lineno, line in enumerate(p.read_text().splitlines(), 1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError:
                    raise RuntimeFailure(f"{p}:{lineno}: malformed log record") from None
        for name, key in SERIES:
            with open(out / f"{name}.csv", "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["step", name])
                for r in records:
                    if key not in r:
                        raise RuntimeFailure(f"log record for step {r.get('step')} lacks {key!r}")
                    w.writerow([r["step"], r[key]])
        print(f"wrote {len(SERIES)} series of {len(records)} rows to {out}")
    if args.trajectories:
        _report_trajectories(args, out)
    return EXIT_OK


def _report_trajectories(args, out: Path):
    from .orchestrator import Trajectory
    from .evaluation import report_for

    if not args.data:
        raise ConfigError("--trajectories needs --data for scenes and episodes")
    p = Path(args.trajectories)
    if not p.is_file():
        raise RuntimeFailure(f"trajectory file not found: {p}")
    trajs = [Trajectory.from_record(json.loads(line)) for line in p.read_text().splitlines() if line.strip()]
    scenes = taskgen.load_scenes(_data_paths(args.data)["scenes"])
    episodes = {}
    for split in ("train", "heldout"):
        path = _data_paths(args.data)[split]
        if path.is_file():
            episodes.update({e.episode_id: e for e in taskgen.read_dataset(path)})
    missing = {t.episode_id for t in trajs} - set(episodes)
    if missing:
        raise RuntimeFailure(f"{len(missing)} trajectories refer to unknown episodes")
    eps = list(episodes.values())
    (out / "metrics.csv").write_text(report_for(trajs, eps, scenes).to_csv())
    with open(out / "lengths.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["episode_id", "rollout_steps", "expert_steps", "status"])
        for t in trajs:
            w.writerow([t.episode_id, t.primitive_steps, episodes[t.episode_id].expert_primitive_len, t.status])


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (supports include)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    common.add_argument("--log-level", default="WARNING")

    ap = argparse.ArgumentParser(prog="deskvln", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", parents=[common], help="generate procedural scenes")
    p.add_argument("--out", required=True, help="scene directory")
    p.add_argument("--scenes", "--n", dest="n", type=int, default=20, help="number of scenes")
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("gen-episodes", parents=[common], help="generate episodes with expert demonstrations")
    p.add_argument("--out", required=True, help="dataset directory (or a .jsonl file path)")
    p.add_argument("--scene-dir", help="scenes to draw from (default: OUT/scenes)")
    p.add_argument("--episodes-per-scene", "--per-scene", dest="per_scene", type=int, default=100)
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_gen_episodes)

    p = sub.add_parser("train-il", parents=[common], help="imitation-learning bootstrap")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train_il)

    p = sub.add_parser("train-rl", parents=[common], help="GRPO post-training against simulators")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sim", required=True, help="comma-separated simulator URLs, or 'local'")
    p.add_argument("--data", required=True)
    p.add_argument("--log")
    p.add_argument("--trajectories", help="append trajectory records here")
    p.add_argument("--literal-soft-reward", action="store_true")
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("eval", parents=[common], help="held-out evaluation")
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="heldout", choices=["train", "heldout"])
    p.add_argument("--sim", default="local")
    p.add_argument("--mode", choices=["multi_turn", "single_turn"])
    g = p.add_mutually_exclusive_group()
    g.add_argument("--greedy", dest="greedy", action="store_true", default=True)
    g.add_argument("--sample", dest="greedy", action="store_false")
    p.add_argument("--expert", action="store_true", help="evaluate the expert demonstrations as a policy")
    p.add_argument("--out", required=True)
    p.add_argument("--render", help="directory for top-down SVG renders")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve-sim", parents=[common], help="run the HTTP simulator")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int)
    p.add_argument("--scene-dir")
    p.add_argument("--cache-capacity", type=int)
    p.add_argument("--idle-timeout", type=float, default=600.0)
    p.set_defaults(func=cmd_serve_sim)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation study")
    p.add_argument("--study", required=True, choices=["reward", "paradigm", "speedups"])
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", parents=[common], help="training-dynamics and trajectory reports")
    p.add_argument("--log")
    p.add_argument("--trajectories")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "gen-scenes" and args.seed is None:
        args.seed = 7
    if args.command == "gen-episodes" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # every other failure is a runtime error with a message
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
