"""Imitation-learning bootstrap: teacher-forced cross-entropy on expert turns."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .policy import (
    EOT_ID, STOP_ID, AdamW, Batch, NumericFaultError, PolicyError, PolicyParams, TurnSequence,
    backward, clip_grad_norm, encode_action, forward,
)
from .world import Observation, Scene, apply_merged, observation_vector, observe, start_episode

log = logging.getLogger(__name__)


@dataclass
class ILConfig:
    learning_rate: float = 3e-4
    batch_size: int = 64
    epochs: int = 1
    weight_decay: float = 0.0
    gradient_clip_norm: float = 1.0
    eval_every: int = 0
    mode: str = "multi_turn"
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")


def wire_features(obs: Observation) -> np.ndarray:
    """Feature vector of an observation as a client sees it after the JSON round trip."""
    return observation_vector(Observation.from_dict(obs.to_dict()))


def expert_tokens(actions) -> list[list[int]]:
    """Chunk merged expert actions into turns of up to three tokens.

    A short chunk that does not end in STOP is closed with EOT, matching what a
    policy must emit to end a turn early.
    """
    turns = []
    for i in range(0, len(actions), 3):
        chunk = [encode_action(a) for a in actions[i:i + 3]]
        if len(chunk) < 3 and chunk[-1] != STOP_ID:
            chunk.append(EOT_ID)
        turns.append(chunk)
    return turns


def expert_sequence(scene: Scene, episode) -> TurnSequence:
    """Teacher-forcing sequence: the observation at the start of each expert turn."""
    turns = expert_tokens(episode.expert_actions)
    if not turns:
        raise PolicyError(f"episode {episode.episode_id} has no expert actions")
    state = start_episode(scene, episode.episode_id, episode.start, episode.goal, episode.instruction)
    obs = []
    k = 0
    for t in turns:
        obs.append(wire_features(observe(state, scene)))
        for tok in t:
            if tok == EOT_ID:
                break
            state = apply_merged(state, scene, episode.expert_actions[k])
            k += 1
    return TurnSequence(np.array(obs), turns)


def il_loss(params, sequences: Sequence[TurnSequence], mode: str):
    """Mean over episodes of the summed expert-token negative log-likelihood."""
    if any(s.num_tokens == 0 for s in sequences):
        raise PolicyError("episode with an empty token sequence")
    batch = Batch.from_sequences(sequences)
    cache = forward(params, batch, mode)
    B = len(sequences)
    loss = -float(np.sum(cache.logp * batch.mask)) / B
    grads = backward(cache, -batch.mask / B)
    return loss, grads


def train_il(config: ILConfig, dataset: Sequence[TurnSequence], params: PolicyParams,
             validate: Callable[[PolicyParams], float] | None = None,
             sink: Callable[[dict], None] | None = None):
    """Run AdamW over shuffled minibatches; returns ``(params, log_records)``."""
    if not dataset:
        raise PolicyError("IL dataset is empty")
    params = params.copy()
    opt = AdamW(params, config.learning_rate, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    records = []
    step = 0

    def emit(rec):
        records.append(rec)
        if sink:
            sink(rec)

    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        for i in range(0, len(order), config.batch_size):
            if config.max_steps is not None and step >= config.max_steps:
                break
            batch = [dataset[j] for j in order[i:i + config.batch_size]]
            loss, grads = il_loss(params, batch, config.mode)
            if not math.isfinite(loss):
                raise NumericFaultError(f"non-finite IL loss at step {step}")
            grad_norm = clip_grad_norm(grads, config.gradient_clip_norm)
            opt.step(params, grads)
            step += 1
            rec = {"step": step, "epoch": epoch, "loss": loss, "lr": config.learning_rate,
                   "grad_norm": grad_norm, "val_sr": None}
            if validate and config.eval_every and step % config.eval_every == 0:
                rec["val_sr"] = validate(params)
            emit(rec)
    if validate and (not records or records[-1]["val_sr"] is None):
        emit({"step": step, "epoch": config.epochs - 1, "loss": records[-1]["loss"] if records else None,
              "lr": config.learning_rate, "grad_norm": None, "val_sr": validate(params)})
    return params, records


def config_dict(config: ILConfig) -> dict:
    return asdict(config)
