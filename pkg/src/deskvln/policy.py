"""Recurrent instruction-conditioned policy with hand-written backpropagation.

Each model turn encodes the current observation, advances a gated recurrent cell
and then emits up to three action tokens autoregressively, with an end-of-turn
token forced at the fourth position.

Per turn ``t`` and token position ``i``::

    x_t   = tanh(tanh(o_t W1 + b1) W2 + b2)
    s_t   = sum(emb[a_{t-1, j}])                  multi-turn only, else 0
    h_t   = GRU(h_{t-1}, [x_t ; s_t])
    c_ti  = sum(emb[a_{t, j}] for j < i)          multi-turn only, else 0
    logit = tanh(h_t + c_ti Wc + P[i]) Wo + bo

so the two conditioning modes differ exactly through the token-embedding table.
All arithmetic runs in float64; parameters may be stored as float32.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .world import OBS_DIM, MergedAction, Observation, observation_vector

VOCAB = ("F1", "F2", "F3", "L1", "L2", "L3", "R1", "R2", "R3", "STOP", "EOT")
TOKEN_ID = {t: i for i, t in enumerate(VOCAB)}
STOP_ID = TOKEN_ID["STOP"]
EOT_ID = TOKEN_ID["EOT"]
CHUNK = 3
MODES = ("multi_turn", "single_turn")

PARAM_NAMES = ("W1", "b1", "W2", "b2", "emb", "Wx", "Wh", "bx", "bh", "Wc", "P", "Wo", "bo")


class PolicyError(Exception):
    pass


class NumericFaultError(PolicyError):
    pass


class CheckpointError(PolicyError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    obs_dim: int = OBS_DIM
    enc_width: int = 64
    hidden: int = 128
    emb_dim: int = 32

    def shapes(self) -> dict[str, tuple[int, ...]]:
        V, H, E, D = len(VOCAB), self.hidden, self.enc_width, self.emb_dim
        return {
            "W1": (self.obs_dim, E), "b1": (E,), "W2": (E, E), "b2": (E,),
            "emb": (V, D),
            "Wx": (E + D, 3 * H), "Wh": (H, 3 * H), "bx": (3 * H,), "bh": (3 * H,),
            "Wc": (D, H), "P": (CHUNK, H),
            "Wo": (H, V), "bo": (V,),
        }


def decode_token(token_id: int) -> MergedAction | None:
    """Map a vocabulary id to a merged action; ``None`` for end-of-turn."""
    if token_id == EOT_ID:
        return None
    return MergedAction.from_token(VOCAB[token_id])


def encode_action(action: MergedAction) -> int:
    return TOKEN_ID[action.token]


@dataclass
class PolicyParams:
    config: PolicyConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "PolicyParams":
        return PolicyParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def compute_view(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(v, dtype=np.float64) for k, v in self.tensors.items()}

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(config: PolicyConfig | None = None, seed: int = 0, dtype=np.float32) -> PolicyParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, update-gate bias +1."""
    cfg = config or PolicyConfig()
    rng = np.random.default_rng(seed)
    fan_in = {"W1": cfg.obs_dim, "b1": cfg.obs_dim, "W2": cfg.enc_width, "b2": cfg.enc_width,
              "emb": 1, "Wx": cfg.enc_width + cfg.emb_dim, "bx": cfg.hidden, "Wh": cfg.hidden,
              "bh": cfg.hidden, "Wc": cfg.emb_dim, "P": 1, "Wo": cfg.hidden, "bo": cfg.hidden}
    tensors = {}
    for name, shape in cfg.shapes().items():
        bound = 1.0 / math.sqrt(fan_in[name])
        if name == "emb":
            bound = 0.1
        elif name == "P":
            bound = 0.5
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    tensors["bx"][: cfg.hidden] = 1.0
    tensors["bh"][: cfg.hidden] = 0.0
    return PolicyParams(cfg, {k: v.astype(dtype) for k, v in tensors.items()})


def zeros_like(params: PolicyParams) -> dict[str, np.ndarray]:
    return {k: np.zeros(v.shape) for k, v in params.tensors.items()}


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_mode(mode: str):
    if mode not in MODES:
        raise PolicyError(f"unknown mode {mode!r}; expected one of {MODES}")


# -- incremental inference ---------------------------------------------------

@dataclass
class TurnContext:
    hidden_state: np.ndarray
    feedback: np.ndarray
    tokens_emitted_this_turn: int = 0


@dataclass
class TraceEntry:
    turn: int
    position: int
    token: int
    logp: float
    logits: np.ndarray


def initial_context(params) -> TurnContext:
    """Zero recurrent state; accepts :class:`PolicyParams` or a compute view."""
    if isinstance(params, PolicyParams):
        return TurnContext(np.zeros(params.config.hidden), np.zeros(params.config.emb_dim), 0)
    return TurnContext(np.zeros(params["Wh"].shape[0]), np.zeros(params["emb"].shape[1]), 0)


def _gru_step(p, h, u):
    H = h.shape[-1]
    gx = u @ p["Wx"] + p["bx"]
    gh = h @ p["Wh"] + p["bh"]
    z = _sigmoid(gx[..., :H] + gh[..., :H])
    r = _sigmoid(gx[..., H:2 * H] + gh[..., H:2 * H])
    n = np.tanh(gx[..., 2 * H:] + r * gh[..., 2 * H:])
    return (1.0 - z) * n + z * h


def _sample(logits: np.ndarray, rng: np.random.Generator, temperature: float) -> int:
    if temperature == 0:
        return int(np.argmax(logits))
    z = logits / temperature
    prob = np.exp(z - z.max())
    cdf = np.cumsum(prob)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(prob) - 1)


def step_turn(params, ctx: TurnContext, obs, mode: str, rng: np.random.Generator | None,
              temperature: float = 1.0, turn_index: int = 0):
    """Run one model turn: returns ``(token_ids, new_ctx, trace_entries)``.

    ``params`` is a :class:`PolicyParams` or its float64 ``compute_view()``; ``obs``
    is an :class:`Observation` or an already-flattened feature vector. Logged
    log-probabilities are under the untempered distribution.
    """
    _check_mode(mode)
    if temperature < 0:
        raise PolicyError("temperature must be >= 0")
    if temperature > 0 and rng is None:
        raise PolicyError("sampling requires an rng")
    p = params.compute_view() if isinstance(params, PolicyParams) else params
    o = observation_vector(obs) if isinstance(obs, Observation) else np.asarray(obs, dtype=np.float64)
    multi = mode == "multi_turn"
    x = np.tanh(np.tanh(o @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"])
    s = ctx.feedback if multi else np.zeros(p["emb"].shape[1])
    h = _gru_step(p, ctx.hidden_state, np.concatenate([x, s]))
    c = np.zeros(p["emb"].shape[1])
    tokens: list[int] = []
    entries: list[TraceEntry] = []
    for i in range(CHUNK):
        q = np.tanh(h + c @ p["Wc"] + p["P"][i])
        logits = q @ p["Wo"] + p["bo"]
        if not np.isfinite(logits).all():
            raise NumericFaultError("non-finite logits during sampling")
        tok = _sample(logits, rng, temperature)
        ls = log_softmax(logits)
        tokens.append(tok)
        entries.append(TraceEntry(turn_index, i, tok, float(ls[tok]), logits))
        if tok in (STOP_ID, EOT_ID):
            break
        if multi:
            c = c + p["emb"][tok]
    fb = np.zeros(p["emb"].shape[1])
    if multi:
        for tok in tokens:
            fb = fb + p["emb"][tok]
    return tokens, TurnContext(h, fb, len(tokens)), entries


def forced_eot(tokens: Sequence[int]) -> bool:
    """True when a turn ended by the grammar limit rather than an emitted STOP/EOT."""
    return len(tokens) == CHUNK and tokens[-1] not in (STOP_ID, EOT_ID)


# -- teacher-forced batch forward/backward ----------------------------------------

@dataclass
class TurnSequence:
    """Observation features and recorded tokens for each turn of one trajectory."""
    obs: np.ndarray
    tokens: list[list[int]]

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        if self.obs.ndim != 2 or len(self.obs) != len(self.tokens):
            raise PolicyError(f"turn/observation length mismatch: {len(self.obs)} observations, "
                              f"{len(self.tokens)} token turns")
        for t, toks in enumerate(self.tokens):
            if not 1 <= len(toks) <= CHUNK:
                raise PolicyError(f"turn {t} has {len(toks)} tokens; expected 1..{CHUNK}")
            for i, tok in enumerate(toks):
                if not 0 <= tok < len(VOCAB):
                    raise PolicyError(f"token {tok} outside the vocabulary")
                if tok in (STOP_ID, EOT_ID) and i != len(toks) - 1:
                    raise PolicyError(f"turn {t} continues after a terminating token")

    @property
    def num_tokens(self) -> int:
        return sum(len(t) for t in self.tokens)


@dataclass
class Batch:
    obs: np.ndarray
    tokens: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_sequences(cls, seqs: Sequence[TurnSequence]) -> "Batch":
        if not seqs:
            raise PolicyError("empty batch")
        B, T = len(seqs), max(len(s.tokens) for s in seqs)
        D = seqs[0].obs.shape[1]
        obs = np.zeros((B, T, D))
        tokens = np.zeros((B, T, CHUNK), dtype=np.int64)
        mask = np.zeros((B, T, CHUNK))
        for b, s in enumerate(seqs):
            if s.obs.shape[1] != D:
                raise PolicyError("observation width differs across the batch")
            obs[b, : len(s.tokens)] = s.obs
            for t, toks in enumerate(s.tokens):
                tokens[b, t, : len(toks)] = toks
                mask[b, t, : len(toks)] = 1.0
        return cls(obs, tokens, mask)


@dataclass
class ForwardCache:
    mode: str
    batch: Batch
    logp: np.ndarray
    logits: np.ndarray
    store: dict = field(default_factory=dict)


def forward(params, batch: Batch, mode: str) -> ForwardCache:
    _check_mode(mode)
    p = params.compute_view() if isinstance(params, PolicyParams) else params
    O, A, M = batch.obs, batch.tokens, batch.mask
    B, T, _ = O.shape
    H = p["Wh"].shape[0]
    De = p["emb"].shape[1]
    multi = mode == "multi_turn"

    X1 = np.tanh(O @ p["W1"] + p["b1"])
    X = np.tanh(X1 @ p["W2"] + p["b2"])
    E = p["emb"][A] * M[..., None]
    S = np.zeros((B, T, De))
    C = np.zeros((B, T, CHUNK, De))
    if multi:
        S[:, 1:] = E[:, :-1].sum(axis=2)
        C[:, :, 1:] = np.cumsum(E, axis=2)[:, :, :-1]
    U = np.concatenate([X, S], axis=-1)
    GX = U @ p["Wx"] + p["bx"]

    Hs = np.zeros((B, T, H))
    Zg = np.zeros((B, T, H))
    Rg = np.zeros((B, T, H))
    Ng = np.zeros((B, T, H))
    GHn = np.zeros((B, T, H))
    Hprev = np.zeros((B, T, H))
    h = np.zeros((B, H))
    for t in range(T):
        gx = GX[:, t]
        gh = h @ p["Wh"] + p["bh"]
        z = _sigmoid(gx[:, :H] + gh[:, :H])
        r = _sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
        Hprev[:, t] = h
        h = (1.0 - z) * n + z * h
        Hs[:, t], Zg[:, t], Rg[:, t], Ng[:, t], GHn[:, t] = h, z, r, n, gh[:, 2 * H:]

    Q = np.tanh(Hs[:, :, None, :] + C @ p["Wc"] + p["P"])
    logits = Q @ p["Wo"] + p["bo"]
    if not np.isfinite(logits).all():
        raise NumericFaultError("non-finite logits in forward pass")
    LS = log_softmax(logits)
    logp = np.take_along_axis(LS, A[..., None], axis=-1)[..., 0] * M
    store = dict(X1=X1, X=X, C=C, U=U, Hs=Hs, Zg=Zg, Rg=Rg, Ng=Ng, GHn=GHn, Hprev=Hprev, Q=Q, LS=LS, p=p)
    return ForwardCache(mode, batch, logp, logits, store)


def backward(cache: ForwardCache, dlogp: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given ``dloss/dlogp`` for every recorded token."""
    st, batch = cache.store, cache.batch
    p = st["p"]
    A, M, O = batch.tokens, batch.mask, batch.obs
    B, T, _ = O.shape
    H = p["Wh"].shape[0]
    V = p["Wo"].shape[1]
    De = p["emb"].shape[1]
    E_w = p["W2"].shape[1]
    multi = cache.mode == "multi_turn"
    g = {k: np.zeros(v.shape) for k, v in p.items()}
    dlogp = np.asarray(dlogp, dtype=np.float64) * M

    probs = np.exp(st["LS"])
    dL = -probs * dlogp[..., None]
    np.put_along_axis(dL, A[..., None], np.take_along_axis(dL, A[..., None], axis=-1) + dlogp[..., None], axis=-1)
    Q = st["Q"]
    g["Wo"] = Q.reshape(-1, H).T @ dL.reshape(-1, V)
    g["bo"] = dL.sum(axis=(0, 1, 2))
    dZ = (dL @ p["Wo"].T) * (1.0 - Q * Q)
    g["P"] = dZ.sum(axis=(0, 1))
    dHs = dZ.sum(axis=2)
    dE = np.zeros((B, T, CHUNK, De))
    if multi:
        g["Wc"] = st["C"].reshape(-1, De).T @ dZ.reshape(-1, H)
        dC = dZ @ p["Wc"].T
        # C[:, :, i] = sum_{j<i} E[:, :, j]
        rev = np.cumsum(dC[:, :, ::-1], axis=2)[:, :, ::-1]
        dE[:, :, :-1] += rev[:, :, 1:]

    dGX = np.zeros((B, T, 3 * H))
    dh = np.zeros((B, H))
    Wh = p["Wh"]
    for t in range(T - 1, -1, -1):
        dh = dh + dHs[:, t]
        z, r, n, ghn, hp = st["Zg"][:, t], st["Rg"][:, t], st["Ng"][:, t], st["GHn"][:, t], st["Hprev"][:, t]
        dn = dh * (1.0 - z)
        dz = dh * (hp - n)
        dan = dn * (1.0 - n * n)
        dar = dan * ghn * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dgx = np.concatenate([daz, dar, dan], axis=1)
        dgh = np.concatenate([daz, dar, dan * r], axis=1)
        dGX[:, t] = dgx
        g["Wh"] += hp.T @ dgh
        g["bh"] += dgh.sum(axis=0)
        dh = dh * z + dgh @ Wh.T
    U = st["U"]
    g["Wx"] = U.reshape(-1, U.shape[-1]).T @ dGX.reshape(-1, 3 * H)
    g["bx"] = dGX.sum(axis=(0, 1))
    dU = dGX @ p["Wx"].T
    dX = dU[..., :E_w]
    if multi:
        dS = dU[..., E_w:]
        dE[:, :-1] += dS[:, 1:, None, :]
        np.add.at(g["emb"], A.reshape(-1), (dE * M[..., None]).reshape(-1, De))

    X, X1 = st["X"], st["X1"]
    dXa = dX * (1.0 - X * X)
    g["W2"] = X1.reshape(-1, X1.shape[-1]).T @ dXa.reshape(-1, E_w)
    g["b2"] = dXa.sum(axis=(0, 1))
    dX1a = (dXa @ p["W2"].T) * (1.0 - X1 * X1)
    g["W1"] = O.reshape(-1, O.shape[-1]).T @ dX1a.reshape(-1, dX1a.shape[-1])
    g["b1"] = dX1a.sum(axis=(0, 1))
    return g


@dataclass
class LogProbTrace:
    logp: np.ndarray
    logits: np.ndarray
    turn_index: np.ndarray
    tokens: np.ndarray

    def __len__(self) -> int:
        return len(self.logp)


def trace_from_cache(cache: ForwardCache, b: int = 0) -> LogProbTrace:
    m = cache.batch.mask[b] > 0
    turns = np.nonzero(m)[0]
    return LogProbTrace(cache.logp[b][m], cache.logits[b][m], turns, cache.batch.tokens[b][m])


def trace_from_entries(entries: Sequence[TraceEntry]) -> LogProbTrace:
    return LogProbTrace(
        np.array([e.logp for e in entries]),
        np.array([e.logits for e in entries]).reshape(len(entries), len(VOCAB)),
        np.array([e.turn for e in entries], dtype=np.int64),
        np.array([e.token for e in entries], dtype=np.int64),
    )


def log_prob(params, sequence: TurnSequence, mode: str) -> LogProbTrace:
    """Teacher-forced per-token log-probabilities of one recorded trajectory."""
    return trace_from_cache(forward(params, Batch.from_sequences([sequence]), mode))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] *= scale
    return norm


class AdamW:
    """Adam with decoupled weight decay; moments are kept in the parameter dtype."""

    def __init__(self, params: PolicyParams, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def step(self, params: PolicyParams, grads: dict[str, np.ndarray], lr: float | None = None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, w in params.tensors.items():
            gk = np.asarray(grads[k], dtype=np.float64)
            m = b1 * self.m[k].astype(np.float64) + (1.0 - b1) * gk
            v = b2 * self.v[k].astype(np.float64) + (1.0 - b2) * gk * gk
            self.m[k] = m.astype(w.dtype)
            self.v[k] = v.astype(w.dtype)
            w64 = w.astype(np.float64)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            params.tensors[k] = (w64 - lr * self.weight_decay * w64 - lr * update).astype(w.dtype)
        if not params.is_finite():
            raise NumericFaultError("non-finite parameters after optimizer step")


# -- checkpoints -----------------------------------------------------------------

MAGIC = b"DVLNCKPT"
FORMAT_VERSION = 1


def save_checkpoint(params: PolicyParams, optimizer: AdamW | None, path, meta: dict | None = None) -> Path:
    """Versioned binary: magic, version, JSON header (shape manifest, checksum), float32 LE blocks."""
    path = Path(path)
    names = list(PARAM_NAMES)
    blocks = [params.tensors[k] for k in names]
    if optimizer is not None:
        blocks += [optimizer.m[k] for k in names] + [optimizer.v[k] for k in names]
    payload = b"".join(np.ascontiguousarray(b, dtype="<f4").tobytes() for b in blocks)
    header = {
        "tensors": [[k, list(params.tensors[k].shape)] for k in names],
        "config": params.config.__dict__,
        "optimizer": None if optimizer is None else {
            "t": optimizer.t, "lr": optimizer.lr, "betas": list(optimizer.betas),
            "eps": optimizer.eps, "weight_decay": optimizer.weight_decay},
        "meta": meta or {},
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(hb)) + hb + payload)
    return path


def load_checkpoint(path, expected: PolicyConfig | None = None):
    """Returns ``(params, optimizer_or_None, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a policy checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16:16 + hlen])
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"{path}: corrupted header") from exc
    payload = raw[16 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    cfg = PolicyConfig(**header["config"])
    if expected is not None:
        want = expected.shapes()
        for name, shape in header["tensors"]:
            if tuple(shape) != want[name]:
                raise ShapeMismatchError(f"{path}: tensor {name} has shape {tuple(shape)}, "
                                         f"config expects {want[name]}")
    arrays = []
    off = 0
    n_blocks = 3 if header["optimizer"] is not None else 1
    for _ in range(n_blocks):
        group = {}
        for name, shape in header["tensors"]:
            n = int(np.prod(shape))
            group[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
            off += 4 * n
        arrays.append(group)
    params = PolicyParams(cfg, arrays[0])
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = AdamW(params, o["lr"], tuple(o["betas"]), o["eps"], o["weight_decay"])
        opt.t, opt.m, opt.v = o["t"], arrays[1], arrays[2]
    return params, opt, header["meta"]
