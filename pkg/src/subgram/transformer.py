"""Simplified disentangled two-layer attention-only transformer.

Layer 1 has ``m`` heads whose attention pattern is a learned ``T_max x T_max``
logit matrix independent of the input; each head's output block is
``softmax(A1[h]) @ r0 @ V1[h].T`` and the blocks are concatenated after the
skip block ``r0``. Layer 2 is a single head with query/key matrices ``Q2``,
``K2`` and a fixed value map reading the skip block, so the output is a
convex combination of the one-hot indicators of the context tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class LengthMismatch(ValueError):
    """Parameters built for a fixed sequence length were used on another length."""


@dataclass(frozen=True)
class ModelConfig:
    S: int
    m: int = 2
    T_max: int = 32
    d: Optional[int] = None
    embed_seed: int = 0

    def __post_init__(self):
        d = self.S if self.d is None else int(self.d)
        object.__setattr__(self, "d", d)
        if self.S < 2:
            raise ValueError("S must be >= 2")
        if d < self.S:
            raise ValueError(f"embedding dim d={d} must be >= S={self.S}")
        if self.m < 1:
            raise ValueError("need at least one first-layer head")
        if self.T_max < 2:
            raise ValueError("T_max must be >= 2")

    @property
    def D1(self) -> int:
        return (self.m + 1) * self.d

    def embedding(self) -> np.ndarray:
        """Orthonormal token embeddings as rows, shape ``(S, d)``."""
        if self.d == self.S:
            return np.eye(self.S)
        rng = np.random.default_rng(self.embed_seed)
        q, _ = np.linalg.qr(rng.standard_normal((self.d, self.S)))
        return q.T.copy()

    def to_dict(self) -> dict:
        return {"S": self.S, "m": self.m, "T_max": self.T_max, "d": self.d, "embed_seed": self.embed_seed}


@dataclass(eq=False)
class ModelParams:
    """Trainable matrices. ``A1`` is ``(m, T_max, T_max)``, ``V1`` is ``(m, d, d)``."""

    config: ModelConfig
    A1: np.ndarray
    V1: np.ndarray
    K2: np.ndarray
    Q2: np.ndarray
    fixed_length: Optional[int] = None

    GROUPS = ("A1", "V1", "K2", "Q2")

    def __post_init__(self):
        c = self.config
        shapes = {
            "A1": (c.m, c.T_max, c.T_max),
            "V1": (c.m, c.d, c.d),
            "K2": (c.D1, c.D1),
            "Q2": (c.D1, c.D1),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, arr)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        return cls(
            config,
            np.zeros((config.m, config.T_max, config.T_max)),
            np.zeros((config.m, config.d, config.d)),
            np.zeros((config.D1, config.D1)),
            np.zeros((config.D1, config.D1)),
        )

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.A1.copy(), self.V1.copy(), self.K2.copy(), self.Q2.copy(),
                           self.fixed_length)

    def groups(self) -> dict:
        return {g: getattr(self, g) for g in self.GROUPS}

    def with_groups(self, **arrays) -> "ModelParams":
        vals = self.groups()
        vals.update(arrays)
        return ModelParams(self.config, fixed_length=self.fixed_length, **vals)

    def norms(self) -> dict:
        return {g: float(np.linalg.norm(a)) for g, a in self.groups().items()}

    def to_json(self) -> dict:
        out = {"config": self.config.to_dict(), "fixed_length": self.fixed_length}
        for g, a in self.groups().items():
            out[g] = {"shape": list(a.shape), "data": a.reshape(-1).tolist()}
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ModelParams":
        config = ModelConfig(**obj["config"])
        arrays = {g: np.array(obj[g]["data"], dtype=np.float64).reshape(obj[g]["shape"]) for g in cls.GROUPS}
        return cls(config, fixed_length=obj.get("fixed_length"), **arrays)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass(eq=False)
class ForwardTrace:
    """Cached activations. Per-sequence arrays carry a leading batch axis.

    ``a2[b, q, i]`` is the second-layer attention of query ``queries[q]`` on
    key ``i``; ``p_out[b, q]`` the corresponding next-token distribution.
    """

    tokens: np.ndarray  # (B, T)
    r0: np.ndarray  # (B, T, d)
    a1: np.ndarray  # (m, T, T), input independent
    qbar0: np.ndarray  # (B, m, T, d): a1[h] @ r0
    r1: np.ndarray  # (B, T, D1)
    queries: np.ndarray  # (Q,)
    qv: np.ndarray  # (B, Q, D1): Q2 r1[query]
    kk: np.ndarray  # (B, T, D1): K2 r1[key]
    logits2: np.ndarray  # (B, Q, T), masked entries are -inf
    a2: np.ndarray  # (B, Q, T)
    p_out: np.ndarray  # (B, Q, S)
    r1_bar: np.ndarray = field(default=None)  # (B, Q, D1)
    e_bar: np.ndarray = field(default=None)  # alias of p_out

    def single(self, b: int = 0, q: int = -1) -> dict:
        """Convenience view of one sequence and one query."""
        return {
            "r0": self.r0[b],
            "a1": self.a1,
            "r1": self.r1[b],
            "a2": self.a2[b, q],
            "p_out": self.p_out[b, q],
        }


def embed(seq, config: ModelConfig) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.int64)
    if seq.size and (seq.min() < 0 or seq.max() >= config.S):
        raise ValueError("token out of range")
    return config.embedding()[seq]


def masked_softmax(logits: np.ndarray) -> np.ndarray:
    """Causal row softmax over the last two axes; zero above the diagonal."""
    logits = np.asarray(logits, dtype=np.float64)
    T = logits.shape[-1]
    mask = np.tril(np.ones((logits.shape[-2], T), dtype=bool))
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_last(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward_batch(params: ModelParams, seqs, queries: Optional[Sequence[int]] = None) -> ForwardTrace:
    """Forward pass for a ``B x T`` batch of equal-length sequences.

    ``queries`` lists the positions whose next-token prediction is wanted;
    the default is the last position only.
    """
    cfg = params.config
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    B, T = seqs.shape
    if T < 1:
        raise ValueError("empty sequence")
    if T > cfg.T_max:
        raise ValueError(f"sequence length {T} exceeds T_max={cfg.T_max}")
    if params.fixed_length is not None and T != params.fixed_length:
        raise LengthMismatch(f"parameters were built for length {params.fixed_length}, got {T}")
    if seqs.min() < 0 or seqs.max() >= cfg.S:
        raise ValueError("token out of range")
    queries = np.array([T - 1] if queries is None else list(queries), dtype=np.int64)

    E = cfg.embedding()
    r0 = E[seqs]  # (B, T, d)
    a1 = masked_softmax(params.A1[:, :T, :T])  # (m, T, T)
    qbar0 = np.matmul(a1[None], r0[:, None])  # (B, m, T, d)
    heads = np.matmul(qbar0, np.swapaxes(params.V1, 1, 2)[None])
    r1 = np.concatenate([r0[:, None], heads], axis=1)  # (B, m+1, T, d)
    r1 = np.transpose(r1, (0, 2, 1, 3)).reshape(B, T, cfg.D1)

    qv = r1[:, queries] @ params.Q2.T  # (B, Q, D1)
    kk = r1 @ params.K2.T  # (B, T, D1)
    logits2 = np.matmul(qv, np.swapaxes(kk, 1, 2))
    causal = np.arange(T)[None, :] <= queries[:, None]  # (Q, T)
    logits2 = np.where(causal[None], logits2, -np.inf)
    a2 = _softmax_last(logits2)

    onehot = np.eye(cfg.S)[seqs]  # (B, T, S)
    p_out = np.matmul(a2, onehot)
    r1_bar = np.matmul(a2, r1)
    return ForwardTrace(seqs, r0, a1, qbar0, r1, queries, qv, kk, logits2, a2, p_out, r1_bar, p_out)


def forward(params: ModelParams, seq) -> ForwardTrace:
    """Single-sequence forward; predicts the token after the last position."""
    return forward_batch(params, np.asarray(seq, dtype=np.int64)[None, :])


def predict(params: ModelParams, seq) -> np.ndarray:
    return forward(params, seq).p_out[0, -1]


def predict_batch(params: ModelParams, seqs, chunk: int = 8192) -> np.ndarray:
    """Final-position predictions for many sequences, in fixed-size chunks.

    Only the last query is needed, so ``K2^T Q2 r1[T-1]`` is folded into a
    per-token score table for the skip block and for each head, avoiding the
    ``T x D1`` key activations of the full forward pass.
    """
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    out = [_predict_last(params, seqs[i:i + chunk]) for i in range(0, seqs.shape[0], chunk)]
    return np.concatenate(out, axis=0)


def _predict_last(params: ModelParams, seqs: np.ndarray) -> np.ndarray:
    cfg = params.config
    B, T = seqs.shape
    if T > cfg.T_max:
        raise ValueError(f"sequence length {T} exceeds T_max={cfg.T_max}")
    if params.fixed_length is not None and T != params.fixed_length:
        raise LengthMismatch(f"parameters were built for length {params.fixed_length}, got {T}")
    if seqs.min() < 0 or seqs.max() >= cfg.S:
        raise ValueError("token out of range")
    E = cfg.embedding()
    d, m = cfg.d, cfg.m
    X = np.eye(cfg.S)[seqs]  # (B, T, S)
    a1 = masked_softmax(params.A1[:, :T, :T])
    blocks = [E[seqs[:, -1]]]
    for h in range(m):
        blocks.append((np.einsum("j,bjs->bs", a1[h, -1], X) @ E) @ params.V1[h].T)
    u = (np.concatenate(blocks, axis=1) @ params.Q2.T) @ params.K2  # (B, D1)
    logits = np.take_along_axis(u[:, :d] @ E.T, seqs, axis=1)
    for h in range(m):
        w = u[:, (h + 1) * d:(h + 2) * d] @ params.V1[h]
        g = np.take_along_axis(w @ E.T, seqs, axis=1)  # (B, T) score of each key's token
        logits += g @ a1[h].T
    a2 = _softmax_last(logits)
    return np.einsum("bi,bis->bs", a2, X)


def lag_mass(a1: np.ndarray, max_lag: Optional[int] = None) -> np.ndarray:
    """Mean attention each head puts on lag ``l`` (key ``i - l`` for query ``i``).

    Averages over the queries ``i >= l``; shape ``(m, max_lag + 1)``.
    """
    m, T, _ = a1.shape
    L = T - 1 if max_lag is None else min(max_lag, T - 1)
    out = np.zeros((m, L + 1))
    for lag in range(L + 1):
        out[:, lag] = np.diagonal(a1, offset=-lag, axis1=1, axis2=2).mean(axis=1)
    return out
