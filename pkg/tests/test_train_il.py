import math

import numpy as np
import pytest

from deskvln.evaluation import evaluate_policy
from deskvln.policy import EOT_ID, STOP_ID, NumericFaultError, PolicyError, TurnSequence, init_params
from deskvln.taskgen import corridor_episode
from deskvln.train_il import ILConfig, expert_sequence, expert_tokens, il_loss, train_il
from deskvln.world import MergedAction, PrimitiveAction as A


def corridor_set(n, seed):
    rng = np.random.default_rng(seed)
    scenes, eps = {}, []
    for i in range(n):
        length = float(rng.integers(12, 49)) * 0.25  # 3 to 12 m
        sc, ep = corridor_episode(length, episode_id=f"c{seed}_{i}", reverse=bool(i % 2))
        scenes[sc.scene_id] = sc
        eps.append(ep)
    return scenes, eps


@pytest.fixture(scope="module")
def corridors():
    scenes, train = corridor_set(200, 0)
    val_scenes, val = corridor_set(40, 1)
    seqs = [expert_sequence(scenes[e.scene_id], e) for e in train]
    return val_scenes, train, val, seqs


def test_expert_tokens_chunking():
    acts = [MergedAction(A.FORWARD, 3)] * 4 + [MergedAction(A.STOP, 1)]
    assert expert_tokens(acts) == [[2, 2, 2], [2, STOP_ID]]
    acts = [MergedAction(A.LEFT, 1)] * 4 + [MergedAction(A.STOP, 1)]
    assert expert_tokens(acts)[-1] == [3, STOP_ID]
    acts = [MergedAction(A.LEFT, 1)] * 2 + [MergedAction(A.FORWARD, 1)] * 2
    assert expert_tokens(acts) == [[3, 3, 0], [0, EOT_ID]]


def test_ten_token_uniform_loss():
    p = init_params(seed=0, dtype=np.float64)
    p.tensors["Wo"][:] = 0
    p.tensors["bo"][:] = 0
    seq = TurnSequence(np.zeros((4, p.config.obs_dim)), [[0, 0, 0], [1, 1, 1], [2, 2, 2], [STOP_ID]])
    loss, _ = il_loss(p, [seq], "multi_turn")
    assert loss == pytest.approx(10 * math.log(11), abs=1e-12)
    assert loss == pytest.approx(23.979, abs=1e-3)
    dup, _ = il_loss(p, [seq, seq], "multi_turn")
    assert dup == pytest.approx(loss, abs=1e-12)


def test_certain_model_has_zero_loss():
    p = init_params(seed=0, dtype=np.float64)
    p.tensors["Wo"][:] = 0
    p.tensors["bo"][:] = -1e4
    p.tensors["bo"][STOP_ID] = 0
    loss, _ = il_loss(p, [TurnSequence(np.zeros((1, p.config.obs_dim)), [[STOP_ID]])], "multi_turn")
    assert loss == 0.0


def test_per_episode_loss_ignores_order(corridors):
    _, _, _, seqs = corridors
    p = init_params(seed=1)
    a = [il_loss(p, [s], "multi_turn")[0] for s in seqs[:10]]
    rev = [il_loss(p, [s], "multi_turn")[0] for s in seqs[:10][::-1]][::-1]
    assert a == rev
    assert il_loss(p, seqs[:10], "multi_turn")[0] == pytest.approx(np.mean(a), rel=1e-12)


def test_zero_lr_is_identity(corridors):
    _, _, _, seqs = corridors
    p = init_params(seed=2)
    out, recs = train_il(ILConfig(learning_rate=0.0, batch_size=32, epochs=1), seqs, p)
    assert len(recs) == math.ceil(len(seqs) / 32)
    for k in p.tensors:
        assert np.array_equal(out.tensors[k], p.tensors[k])


def test_loss_strictly_decreases_over_first_hundred_steps(corridors):
    _, _, _, seqs = corridors
    cfg = ILConfig(learning_rate=1e-4, batch_size=len(seqs), epochs=100)
    _, recs = train_il(cfg, seqs, init_params(seed=0))
    losses = [r["loss"] for r in recs]
    assert len(losses) == 100
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_corridor_imitation_reaches_high_validation_sr(corridors):
    val_scenes, _, val, seqs = corridors
    cfg = ILConfig(learning_rate=1e-2, batch_size=8, epochs=2, eval_every=25)
    validate = lambda p: evaluate_policy(p, val, val_scenes, "multi_turn")[0].sr
    _, recs = train_il(cfg, seqs, init_params(seed=0), validate=validate)
    assert recs[-1]["val_sr"] >= 0.9
    assert all({"step", "loss", "lr", "val_sr"} <= set(r) for r in recs)


def test_errors():
    with pytest.raises(ValueError):
        ILConfig(batch_size=0)
    with pytest.raises(PolicyError):
        train_il(ILConfig(), [], init_params(seed=0))


def test_non_finite_loss_aborts():
    p = init_params(seed=0, dtype=np.float64)
    p.tensors["bo"][0] = np.inf
    seq = TurnSequence(np.zeros((1, p.config.obs_dim)), [[STOP_ID]])
    with pytest.raises(NumericFaultError):
        train_il(ILConfig(), [seq], p)
