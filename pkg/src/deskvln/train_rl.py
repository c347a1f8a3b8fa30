"""Multi-turn GRPO post-training with dynamic sampling and dynamic early stopping."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .metrics import ndtw, xy
from .orchestrator import (
    DEFAULT_WORKERS, STEP_CAP, Trajectory, announce_next_batch, collect_batch, plan_group, scene_goals,
)
from .policy import (
    AdamW, Batch, NumericFaultError, PolicyError, PolicyParams, backward, clip_grad_norm, forward,
    save_checkpoint,
)
from .world import SUCCESS_RADIUS_M, Scene, geodesic_distance

log = logging.getLogger(__name__)

REWARD_SCALE = 15.0
REWARD_KINDS = ("soft", "hard", "path_align")


@dataclass
class RLConfig:
    group_size: int = 4
    prompts_per_batch: int = 8
    clip_epsilon: float = 0.28
    kl_coefficient: float = 0.0
    learning_rate: float = 1e-5
    reward_kind: str = "soft"
    w_succ: float = 11.25
    w_ndtw: float = 3.75
    alpha_roll: float = 2.0
    max_resample_attempts: int = 2
    temperature: float = 1.0
    seed: int = 0
    steps: int = 300
    updates_per_batch: int = 1
    mode: str = "multi_turn"
    early_stopping: bool = True
    dynamic_sampling: bool = True
    literal_soft_reward: bool = False
    step_cap: int = STEP_CAP
    weight_decay: float = 0.0
    gradient_clip_norm: float = 1.0
    workers: int = DEFAULT_WORKERS
    preload: bool = True
    expert_length_unit: str = "primitive"

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.alpha_roll <= 1:
            raise ValueError("alpha_roll must exceed 1")
        if self.reward_kind not in REWARD_KINDS:
            raise ValueError(f"reward_kind must be one of {REWARD_KINDS}")
        if self.reward_kind == "path_align" and not math.isclose(self.w_succ + self.w_ndtw, REWARD_SCALE):
            raise ValueError("w_succ + w_ndtw must equal 15")
        if self.kl_coefficient != 0:
            raise ValueError("only kl_coefficient = 0 is supported")
        if self.expert_length_unit not in ("primitive", "turns"):
            raise ValueError("expert_length_unit must be 'primitive' or 'turns'")
        if self.max_resample_attempts < 1 or self.prompts_per_batch < 1:
            raise ValueError("max_resample_attempts and prompts_per_batch must be positive")


def path_align_weights(ratio: float) -> tuple[float, float]:
    """Split the reward scale as ``w_succ : w_ndtw = ratio : 1``."""
    w_s = REWARD_SCALE * ratio / (ratio + 1.0)
    return w_s, REWARD_SCALE - w_s


# -- rewards ------------------------------------------------------------------------

@dataclass
class RewardBreakdown:
    success: int
    d_goal: float
    ndtw_value: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def compute_reward(traj: Trajectory, episode, scene: Scene, config: RLConfig) -> RewardBreakdown:
    if traj.status == "running":
        raise ValueError("trajectory is not complete")
    # the simulator's distance is exact; recomputing from wire-rounded poses can land on a wall cell
    d = traj.d_goal if math.isfinite(traj.d_goal) else geodesic_distance(scene, traj.poses[-1], episode.goal)
    if not math.isfinite(d):
        raise ValueError(f"goal unreachable for {episode.episode_id}")
    ok = int(traj.stopped and d <= SUCCESS_RADIUS_M)
    dc = min(max(d, 0.0), SUCCESS_RADIUS_M)
    closeness = dc / SUCCESS_RADIUS_M if config.literal_soft_reward else (SUCCESS_RADIUS_M - dc) / SUCCESS_RADIUS_M
    nd = ndtw([(p.x, p.y) for p in traj.poses], xy(episode.expert_path))
    if config.reward_kind == "hard":
        total = REWARD_SCALE * ok
    elif config.reward_kind == "soft":
        total = REWARD_SCALE * ok * closeness
    else:
        total = config.w_succ * ok * closeness + config.w_ndtw * nd
    return RewardBreakdown(ok, d, nd, float(total))


# -- advantages and objective ---------------------------------------------------------

def group_advantages(rewards: Sequence[float]) -> tuple[np.ndarray, bool]:
    """Group-normalised advantages and whether the group is degenerate (zero variance)."""
    r = np.asarray(rewards, dtype=np.float64)
    if len(r) < 2:
        raise ValueError("a group needs at least two rewards")
    std = float(r.std())
    if std == 0.0 or np.all(r == r[0]):
        return np.zeros_like(r), True
    return (r - r.mean()) / (std + 1e-8), False


@dataclass
class RolloutGroup:
    episode: object
    trajectories: list[Trajectory]
    rewards: list[float] = field(default_factory=list)
    advantages: np.ndarray | None = None
    resample_attempts_used: int = 1
    degenerate: bool = False

    @property
    def successes(self) -> int:
        return sum(t.success for t in self.trajectories)

    def score(self, scene: Scene, config: RLConfig):
        if len(self.trajectories) < 2:
            self.rewards = [0.0] * len(self.trajectories)
            self.advantages = np.zeros(len(self.trajectories))
            self.degenerate = True
            return self
        breakdowns = [compute_reward(t, self.episode, scene, config) for t in self.trajectories]
        for t, b in zip(self.trajectories, breakdowns):
            t.reward = b.to_dict()
        self.rewards = [b.total for b in breakdowns]
        self.advantages, self.degenerate = group_advantages(self.rewards)
        return self


def clipped_term(ratio, adv, eps: float):
    """Per-token ``min(r A, clip(r, 1-eps, 1+eps) A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def grpo_objective(params, groups: Sequence[RolloutGroup], config: RLConfig, mode: str | None = None):
    """Clipped group-relative surrogate; returns ``(objective, grads_of_loss, stats)``.

    Gradients are of the loss ``-objective`` so an optimizer step descends them.
    Degenerate groups are skipped and contribute nothing.
    """
    mode = mode or config.mode
    live = [g for g in groups if not g.degenerate]
    seqs, olds, advs, weights = [], [], [], []
    for g in live:
        G = len(g.trajectories)
        for t, a in zip(g.trajectories, g.advantages):
            if len(t.logps) != t.num_tokens:
                raise PolicyError(f"trace/trajectory misalignment for {t.episode_id}: "
                                  f"{len(t.logps)} log-probs vs {t.num_tokens} tokens")
            seqs.append(t.turn_sequence())
            olds.append(np.asarray(t.logps, dtype=np.float64))
            advs.append(float(a))
            weights.append(1.0 / (G * t.num_tokens * len(live)))
    stats = {"groups": len(live), "trajectories": len(seqs), "clip_fraction": 0.0}
    if not seqs:
        return 0.0, None, stats
    batch = Batch.from_sequences(seqs)
    cache = forward(params, batch, mode)
    dlogp = np.zeros_like(cache.logp)
    objective = 0.0
    clipped = total = 0
    eps = config.clip_epsilon
    for b, (old, a, w) in enumerate(zip(olds, advs, weights)):
        m = batch.mask[b] > 0
        new = cache.logp[b][m]
        ratio = np.exp(new - old)
        unclipped = ratio * a
        term = clipped_term(ratio, a, eps)
        objective += w * float(term.sum())
        active = unclipped <= np.clip(ratio, 1.0 - eps, 1.0 + eps) * a
        g = np.where(active, a * ratio, 0.0) * w
        d = np.zeros_like(cache.logp[b])
        d[m] = -g
        dlogp[b] = d
        clipped += int((~active).sum())
        total += len(ratio)
    stats["clip_fraction"] = clipped / max(total, 1)
    return objective, backward(cache, dlogp), stats


def expert_length(episode, unit: str = "primitive") -> int:
    if unit == "turns":
        return -(-len(episode.expert_actions) // 3)
    return episode.expert_primitive_len


def early_stop_threshold(episode, config: RLConfig) -> int:
    """``ceil(alpha_roll * |tau*|)`` in the configured unit."""
    return int(math.ceil(config.alpha_roll * expert_length(episode, config.expert_length_unit) - 1e-9))


# -- sampling ----------------------------------------------------------------------

def dynamic_sampling(episode, params, config: RLConfig, rollout_fn: Callable[[object, int], list]) -> RolloutGroup:
    """Roll G trajectories, resampling the whole group while it has no success."""
    attempt = 1
    trajs = rollout_fn(episode, attempt)
    while (config.dynamic_sampling and not any(t.success for t in trajs)
           and attempt < config.max_resample_attempts):
        attempt += 1
        trajs = rollout_fn(episode, attempt)
    return RolloutGroup(episode, list(trajs), resample_attempts_used=attempt)


def collect_groups(episodes: Sequence, params, config: RLConfig, clients, scenes: dict) -> list[RolloutGroup]:
    """Batched dynamic sampling: all groups in parallel, then resample failed ones together."""
    view = params.compute_view() if isinstance(params, PolicyParams) else params

    def plan(eps, attempt):
        return [plan_group(ep, config.group_size,
                           early_stop_threshold(ep, config) if config.early_stopping else None,
                           config.temperature, attempt, config.seed, endpoint=i,
                           t_max_unit=config.expert_length_unit)
                for i, ep in enumerate(eps)]

    results = collect_batch(plan(episodes, 1), view, clients, config.mode, config.workers, config.seed,
                            config.step_cap)
    groups = [RolloutGroup(ep, trajs, resample_attempts_used=1) for ep, trajs in zip(episodes, results)]
    attempt = 1
    while config.dynamic_sampling and attempt < config.max_resample_attempts:
        retry = [g for g in groups if g.successes == 0]
        if not retry:
            break
        attempt += 1
        again = collect_batch(plan([g.episode for g in retry], attempt), view, clients, config.mode,
                              config.workers, config.seed, config.step_cap)
        for g, trajs in zip(retry, again):
            g.trajectories = trajs
            g.resample_attempts_used = attempt
    for g in groups:
        g.score(scenes[g.episode.scene_id], config)
    return groups


# -- training loop -------------------------------------------------------------------

LOG_COLUMNS = ("step", "reward_mean", "sr_train", "episode_len_mean", "early_stop_rate", "degenerate_groups",
               "wall_time_rollout_s", "wall_time_update_s")


def train_rl(config: RLConfig, episode_pool: Sequence, scenes: dict, params: PolicyParams, clients,
             sink: Callable[[dict], None] | None = None, trajectory_file=None, abort_checkpoint=None,
             start_step: int = 0, optimizer: AdamW | None = None):
    """GRPO loop; returns ``(params, optimizer, log_records)``."""
    if not episode_pool:
        raise PolicyError("episode pool is empty")
    params = params.copy()
    opt = optimizer or AdamW(params, config.learning_rate, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    n = min(config.prompts_per_batch, len(episode_pool))
    for _ in range(start_step):
        rng.choice(len(episode_pool), size=n, replace=False)
    records = []
    traj_out = open(trajectory_file, "a") if trajectory_file else None

    def sample():
        return [episode_pool[i] for i in rng.choice(len(episode_pool), size=n, replace=False)]

    batch = sample()
    try:
        for step in range(start_step + 1, config.steps + 1):
            t0 = time.perf_counter()
            groups = collect_groups(batch, params, config, clients, scenes)
            t_roll = time.perf_counter() - t0

            t1 = time.perf_counter()
            next_batch = sample() if step < config.steps else []
            if config.preload and next_batch:
                announce_next_batch([e.scene_id for e in next_batch], clients, scene_goals(next_batch))
            stats = {}
            for _ in range(config.updates_per_batch):
                objective, grads, stats = grpo_objective(params, groups, config)
                if not math.isfinite(objective):
                    _abort(params, opt, abort_checkpoint, step, "non-finite GRPO objective")
                if grads is None:
                    break
                clip_grad_norm(grads, config.gradient_clip_norm)
                try:
                    opt.step(params, grads)
                except NumericFaultError:
                    _abort(params, opt, abort_checkpoint, step, "non-finite parameters")
            t_upd = time.perf_counter() - t1

            trajs = [t for g in groups for t in g.trajectories]
            rec = {
                "step": step,
                "reward_mean": float(np.mean([r for g in groups for r in g.rewards])) if trajs else 0.0,
                "sr_train": float(np.mean([t.success for t in trajs])) if trajs else 0.0,
                "episode_len_mean": float(np.mean([t.primitive_steps for t in trajs])) if trajs else 0.0,
                "early_stop_rate": float(np.mean([t.status == "early_stopped" for t in trajs])) if trajs else 0.0,
                "degenerate_groups": sum(g.degenerate for g in groups),
                "wall_time_rollout_s": t_roll,
                "wall_time_update_s": t_upd,
                "resampled_groups": sum(g.resample_attempts_used > 1 for g in groups),
                "clip_fraction": stats.get("clip_fraction", 0.0),
            }
            records.append(rec)
            if sink:
                sink(rec)
            if traj_out:
                for t in trajs:
                    traj_out.write(json.dumps({"step": step, **t.to_record()}) + "\n")
            batch = next_batch
    finally:
        if traj_out:
            traj_out.close()
    return params, opt, records


def _abort(params, opt, path, step, why):
    if path:
        save_checkpoint(params, opt, path, {"aborted_at_step": step, "reason": why})
        log.error("%s at step %d; state dumped to %s", why, step, path)
    raise NumericFaultError(f"{why} at step {step}")


def config_dict(config: RLConfig) -> dict:
    return asdict(config)


def write_log(records: Sequence[dict], path) -> Path:
    p = Path(path)
    with open(p, "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
    return p
