import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskvln.policy import (
    CHUNK, EOT_ID, STOP_ID, VOCAB, AdamW, Batch, ChecksumError, CheckpointError, PolicyConfig, PolicyError,
    ShapeMismatchError, TurnSequence, backward, forward, init_params, initial_context, load_checkpoint,
    log_prob, log_softmax, save_checkpoint, step_turn, trace_from_entries,
)
from oracles import central_difference

SMALL = PolicyConfig(obs_dim=10, enc_width=6, hidden=8, emb_dim=4)


def rollout_tokens(params, mode, obs, rng, temperature=1.0):
    ctx = initial_context(params)
    turns, entries = [], []
    for t, o in enumerate(obs):
        toks, ctx, ent = step_turn(params, ctx, o, mode, rng, temperature, turn_index=t)
        turns.append(toks)
        entries += ent
    return turns, entries


def random_sequence(rng, cfg, turns):
    obs = rng.normal(size=(turns, cfg.obs_dim))
    toks = []
    for _ in range(turns):
        n = int(rng.integers(1, CHUNK + 1))
        body = [int(rng.integers(0, STOP_ID)) for _ in range(n - 1)]
        toks.append(body + [int(rng.integers(0, len(VOCAB)))])
    return TurnSequence(obs, toks)


def test_vocabulary():
    assert len(VOCAB) == 11 and VOCAB[STOP_ID] == "STOP" and VOCAB[EOT_ID] == "EOT"


def test_uniform_logits_give_minus_ln_eleven():
    p = init_params(SMALL, seed=1, dtype=np.float64)
    p.tensors["Wo"][:] = 0
    p.tensors["bo"][:] = 0
    seq = TurnSequence(np.ones((2, SMALL.obs_dim)), [[0, 1, 2], [EOT_ID]])
    tr = log_prob(p, seq, "multi_turn")
    assert np.allclose(tr.logp, -math.log(11), atol=1e-15)
    assert math.log(11) == pytest.approx(2.3979, abs=1e-4)


def test_dominant_logit_is_argmax_with_zero_logprob():
    p = init_params(SMALL, seed=1, dtype=np.float64)
    p.tensors["bo"][:] = 0
    p.tensors["bo"][3] = 1e4
    p.tensors["Wo"][:] = 0
    toks, _, ent = step_turn(p, initial_context(p), np.zeros(SMALL.obs_dim), "multi_turn", None, 0.0)
    assert toks == [3, 3, 3] and all(e.logp == 0.0 for e in ent)


def test_fourth_position_is_grammar_forced():
    p = init_params(SMALL, seed=1, dtype=np.float64)
    p.tensors["bo"][:] = -50
    p.tensors["bo"][0] = 50  # F1 is always preferred, never EOT
    toks, ctx, ent = step_turn(p, initial_context(p), np.zeros(SMALL.obs_dim), "multi_turn", None, 0.0)
    assert len(toks) == CHUNK and ctx.tokens_emitted_this_turn == CHUNK
    with pytest.raises(PolicyError):
        TurnSequence(np.zeros((1, SMALL.obs_dim)), [[0, 0, 0, EOT_ID]])


def test_seeded_sampling_is_deterministic():
    p = init_params(SMALL, seed=2)
    obs = np.random.default_rng(0).normal(size=(5, SMALL.obs_dim))
    a = rollout_tokens(p, "multi_turn", obs, np.random.default_rng(9))[0]
    b = rollout_tokens(p, "multi_turn", obs, np.random.default_rng(9))[0]
    assert a == b


@pytest.mark.parametrize("mode", ["multi_turn", "single_turn"])
def test_rescoring_matches_sampling_trace(mode):
    p = init_params(SMALL, seed=3)
    obs = np.random.default_rng(1).normal(size=(6, SMALL.obs_dim))
    turns, entries = rollout_tokens(p, mode, obs, np.random.default_rng(4))
    sampled = trace_from_entries(entries)
    rescored = log_prob(p, TurnSequence(obs, turns), mode)
    assert np.max(np.abs(sampled.logp - rescored.logp)) < 1e-9
    assert np.array_equal(sampled.turn_index, rescored.turn_index)
    assert len(rescored) == sum(len(t) for t in turns)


def test_zeroed_feedback_makes_modes_identical():
    p = init_params(SMALL, seed=5, dtype=np.float64)
    p.tensors["emb"][:] = 0
    seq = random_sequence(np.random.default_rng(2), SMALL, 5)
    a = forward(p, Batch.from_sequences([seq]), "multi_turn")
    b = forward(p, Batch.from_sequences([seq]), "single_turn")
    assert np.array_equal(a.logits, b.logits)
    q = init_params(SMALL, seed=5, dtype=np.float64)
    c = forward(q, Batch.from_sequences([seq]), "multi_turn")
    assert not np.allclose(c.logits, b.logits)


def test_softmax_normalised_and_shift_invariant():
    rng = np.random.default_rng(0)
    for _ in range(50):
        z = rng.normal(scale=30, size=11)
        assert abs(np.exp(log_softmax(z)).sum() - 1) < 1e-9
        assert np.argmax(z) == np.argmax(z + rng.normal() * 100)
    assert np.isfinite(log_softmax(np.array([1e6, 0.0, -1e6]))).all()


def test_mismatched_lengths_rejected():
    with pytest.raises(PolicyError):
        TurnSequence(np.zeros((2, SMALL.obs_dim)), [[EOT_ID]])
    with pytest.raises(PolicyError):
        TurnSequence(np.zeros((1, SMALL.obs_dim)), [[STOP_ID, 0]])
    with pytest.raises(PolicyError):
        TurnSequence(np.zeros((1, SMALL.obs_dim)), [[11]])


def loss_and_grad(p, seqs, mode, weights):
    cache = forward(p, Batch.from_sequences(seqs), mode)
    return float((cache.logp * weights).sum()), backward(cache, weights)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


@settings(max_examples=8)
@given(st.integers(0, 10**6), st.sampled_from(["multi_turn", "single_turn"]))
def test_backward_matches_finite_differences(seed, mode):
    rng = np.random.default_rng(seed)
    p = init_params(SMALL, seed=seed, dtype=np.float64)
    seqs = [random_sequence(rng, SMALL, int(rng.integers(1, 4))) for _ in range(2)]
    B = Batch.from_sequences(seqs)
    w = rng.normal(size=B.mask.shape) * B.mask
    _, g = loss_and_grad(p, seqs, mode, w)
    for name in p.tensors:
        num = central_difference(lambda: loss_and_grad(p, seqs, mode, w)[0], p.tensors[name])
        assert rel_err(g[name], num) < 1e-4 or np.linalg.norm(num) < 1e-10, name


def test_constant_loss_zero_grad_and_linearity():
    rng = np.random.default_rng(0)
    p = init_params(SMALL, seed=0, dtype=np.float64)
    seqs = [random_sequence(rng, SMALL, 3)]
    B = Batch.from_sequences(seqs)
    _, g0 = loss_and_grad(p, seqs, "multi_turn", np.zeros(B.mask.shape))
    assert all(not v.any() for v in g0.values())
    w1, w2 = rng.normal(size=B.mask.shape), rng.normal(size=B.mask.shape)
    _, ga = loss_and_grad(p, seqs, "multi_turn", w1)
    _, gb = loss_and_grad(p, seqs, "multi_turn", w2)
    _, gs = loss_and_grad(p, seqs, "multi_turn", w1 + w2)
    for k in gs:
        assert np.allclose(gs[k], ga[k] + gb[k], atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(seed=4)
    opt = AdamW(p, 1e-3)
    opt.step(p, {k: np.ones_like(v) for k, v in p.tensors.items()})
    path = save_checkpoint(p, opt, tmp_path / "c.ckpt", {"mode": "multi_turn"})
    q, o2, meta = load_checkpoint(path)
    assert meta == {"mode": "multi_turn"} and o2.t == 1
    for k in p.tensors:
        assert p.tensors[k].tobytes() == q.tensors[k].tobytes()
        assert opt.m[k].tobytes() == o2.m[k].tobytes() and opt.v[k].tobytes() == o2.v[k].tobytes()


def test_checkpoint_corruption_and_shape_errors(tmp_path):
    path = save_checkpoint(init_params(PolicyConfig(hidden=64)), None, tmp_path / "c.ckpt")
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(path, expected=PolicyConfig(hidden=128))
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)
    (tmp_path / "x").write_bytes(b"garbage!" + bytes(20))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x")


def test_params_stay_finite_after_updates():
    p = init_params(SMALL, seed=1)
    opt = AdamW(p, 1e-2)
    rng = np.random.default_rng(0)
    seqs = [random_sequence(rng, SMALL, 3) for _ in range(4)]
    for _ in range(20):
        B = Batch.from_sequences(seqs)
        _, g = loss_and_grad(p, seqs, "multi_turn", -B.mask)
        opt.step(p, g)
        assert p.is_finite()
