"""Explicit sub-n-gram parameter settings and checks of their behaviour.

Block ``h`` of the first-layer output ``r1`` (block 0 is the skip copy of
the embedding) is written ``s^h``. The k-gram construction makes head ``h``
copy the token ``h`` steps back and lets the second layer compare the
query's block ``h - 1`` against every key's block ``h``, so a key scores
``c`` per matching history token.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .estimators import match_positions
from .grad import GradientSet, loss_grad_batch
from .seqmodel import NGramSpec, conditional_batch, make_rng, sample_task_batch
from .transformer import ModelConfig, ModelParams, forward, forward_batch, predict_batch


@dataclass(frozen=True)
class ConstructionSpec:
    variant: str  # "kgram" | "multihead_bigram" | "subset"
    c: float
    config: ModelConfig
    k: Optional[int] = None
    lags: Optional[tuple] = None
    T_fixed: Optional[int] = None

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("scale c must be positive")
        if self.variant == "kgram":
            if self.k is None or not 1 <= self.k <= self.config.m + 1:
                raise ValueError(f"k must lie in [1, m+1={self.config.m + 1}]")
        elif self.variant == "subset":
            if not self.lags or self.T_fixed is None:
                raise ValueError("subset construction needs lags and a fixed length")
        elif self.variant != "multihead_bigram":
            raise ValueError(f"unknown construction {self.variant!r}")

    def build(self) -> ModelParams:
        if self.variant == "kgram":
            return build_kgram_params(self.config, self.k, self.c)
        if self.variant == "multihead_bigram":
            return build_multihead_bigram(self.config, self.c)
        return build_subset_params(self.config, self.lags, self.c, self.T_fixed)


def _projector(config: ModelConfig) -> np.ndarray:
    E = config.embedding()
    return E.T @ E  # identity on the span of the token embeddings


def _block(config: ModelConfig, M: np.ndarray, row: int, col: int) -> np.ndarray:
    d = config.d
    out = np.zeros((config.D1, config.D1))
    out[row * d:(row + 1) * d, col * d:(col + 1) * d] = M
    return out


def lag_logits(T_max: int, lag: int, c: float) -> np.ndarray:
    """Logit ``c`` on key ``i - lag`` for query ``i >= lag`` and on key 0 for earlier queries."""
    A = np.zeros((T_max, T_max))
    rows = np.arange(T_max)
    A[rows, np.maximum(rows - lag, 0)] = c
    return A


def build_kgram_params(config: ModelConfig, k: int, c: float) -> ModelParams:
    """Heads ``1..k-1`` copy the ``(-h)``-token; remaining heads are switched off (all zero)."""
    if not 1 <= k <= config.m + 1:
        raise ValueError(f"k={k} outside [1, m+1={config.m + 1}]")
    if not c > 0:
        raise ValueError("scale c must be positive")
    P = _projector(config)
    params = ModelParams.zeros(config)
    rc = np.sqrt(c)
    for h in range(1, k):
        params.A1[h - 1] = lag_logits(config.T_max, h, c)
        params.V1[h - 1] = P
        params.Q2 += rc * _block(config, P, h, h - 1)
        params.K2 += rc * _block(config, P, h, h)
    return params


def build_multihead_bigram(config: ModelConfig, c: float) -> ModelParams:
    """Every head copies the previous token; the query compares its own token to all of them.

    The key score of a match is ``m * c**1.5`` (one ``sqrt(c)`` from each value map).
    """
    if not c > 0:
        raise ValueError("scale c must be positive")
    P = _projector(config)
    params = ModelParams.zeros(config)
    rc = np.sqrt(c)
    for h in range(1, config.m + 1):
        params.A1[h - 1] = lag_logits(config.T_max, 1, c)
        params.V1[h - 1] = rc * P
        params.Q2 += rc * _block(config, P, h, 0)
        params.K2 += rc * _block(config, P, h, h)
    return params


def build_subset_params(config: ModelConfig, lags: Sequence[int], c: float, T: int) -> ModelParams:
    """Non-contiguous history ``N = lags`` for inputs of exactly length ``T``.

    Head ``j`` serves the ``j``-th smallest lag ``h``: it copies the ``(-h)``-token
    at every query but the last, where it copies the ``(-(h-1))``-token instead
    so the last position carries the history of the token to be predicted.
    The returned parameters refuse any other input length.
    """
    lags = sorted(int(h) for h in lags)
    if not lags or len(set(lags)) != len(lags) or lags[0] < 1:
        raise ValueError("lags must be distinct positive integers")
    if len(lags) > config.m:
        raise ValueError(f"{len(lags)} lags need that many heads, model has m={config.m}")
    if max(lags) >= T:
        raise ValueError(f"largest lag {max(lags)} must be < T={T}")
    if T > config.T_max:
        raise ValueError(f"T={T} exceeds T_max={config.T_max}")
    if not c > 0:
        raise ValueError("scale c must be positive")
    P = _projector(config)
    params = ModelParams.zeros(config)
    rc = np.sqrt(c)
    for j, h in enumerate(lags, start=1):
        A = lag_logits(config.T_max, h, c)
        A[T - 1] = 0.0
        A[T - 1, T - h] = c
        params.A1[j - 1] = A
        params.V1[j - 1] = rc * P
        params.Q2 += rc * _block(config, P, j, j)
        params.K2 += rc * _block(config, P, j, j)
    params.fixed_length = int(T)
    return params


def padded_match_positions(seq, k: int) -> np.ndarray:
    """Keys whose clamped history ``x[max(i-h, 0)]`` matches for ``h = 1..k-1``.

    This is the support the k-gram construction attends to in the hard
    limit: it extends the counting match set by the early keys ``i < k-1``
    whose missing history is read from position 0.
    """
    seq = np.asarray(seq, dtype=np.int64)
    T = seq.size
    keys = np.arange(T)
    ok = np.ones(T, dtype=bool)
    for h in range(1, k):
        ok &= seq[np.maximum(keys - h, 0)] == seq[T - h]
    return keys[ok]


@dataclass
class PatternReport:
    violations: list = field(default_factory=list)
    match_set: list = field(default_factory=list)
    n_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"ok": self.ok, "n_checked": self.n_checked, "match_set": self.match_set,
                "violations": self.violations}


def verify_attention_pattern(params: ModelParams, seq, k: int, c: float, K: float = 10.0,
                             K_prime: float = 10.0) -> PatternReport:
    """Check the exponential attention bounds of the k-gram construction on one sequence.

    First layer: head ``h < k`` puts at least ``1 - K*i*exp(-c)`` on key
    ``i - h`` (key 0 for ``i < h``). Second layer: keys in the counting match
    set ``M`` get ``1/|M|`` up to ``K'*T*exp(-c)/|M|^2``, others at most
    ``K'*exp(-c)/|M|``.
    """
    seq = np.asarray(seq, dtype=np.int64)
    T = seq.size
    tr = forward(params, seq)
    report = PatternReport()
    ec = np.exp(-c)
    for h in range(1, k):
        for i in range(T):
            j = max(i - h, 0)
            val = tr.a1[h - 1, i, j]
            report.n_checked += 1
            if val < 1 - K * i * ec:
                report.violations.append({"layer": 1, "head": h, "query": i, "key": j, "score": float(val),
                                          "bound": float(1 - K * i * ec)})
    M = match_positions(seq, k)
    report.match_set = [int(i) for i in M]
    a2 = tr.a2[0, -1]
    if M.size == 0:
        report.violations.append({"layer": 2, "reason": "empty match set"})
        return report
    inM = np.zeros(T, dtype=bool)
    inM[M] = True
    for i in range(T):
        report.n_checked += 1
        if inM[i]:
            bound = K_prime * T * ec / M.size ** 2
            if abs(a2[i] - 1.0 / M.size) > bound:
                report.violations.append({"layer": 2, "key": i, "score": float(a2[i]),
                                          "target": 1.0 / M.size, "bound": float(bound)})
        else:
            bound = K_prime * ec / M.size
            if a2[i] > bound:
                report.violations.append({"layer": 2, "key": i, "score": float(a2[i]), "target": 0.0,
                                          "bound": float(bound)})
    return report


# ---------------------------------------------------------------------------
# near-stationarity probe


@dataclass
class ProbeRow:
    k: int
    c: float
    T: int
    batch_size: int
    grad_norm_total: float
    grad_norm_per_group: dict
    mean_residual_tv: float
    mean_sq_residual: float
    loss: float


@dataclass
class StationarityReport:
    rows: list = field(default_factory=list)
    columns = ("k", "c", "T", "batch_size", "grad_norm_total", "grad_norm_A1", "grad_norm_V1",
               "grad_norm_K2", "grad_norm_Q2", "mean_residual_tv", "mean_sq_residual", "loss")

    def records(self) -> list:
        out = []
        for r in self.rows:
            out.append({
                "k": r.k, "c": r.c, "T": r.T, "batch_size": r.batch_size, "grad_norm_total": r.grad_norm_total,
                **{f"grad_norm_{g}": v for g, v in r.grad_norm_per_group.items()},
                "mean_residual_tv": r.mean_residual_tv, "mean_sq_residual": r.mean_sq_residual, "loss": r.loss,
            })
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(self.columns))
            w.writeheader()
            for rec in self.records():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})

    def norms_for(self, T: int) -> tuple:
        sel = sorted((r for r in self.rows if r.T == T), key=lambda r: r.c)
        return np.array([r.c for r in sel]), np.array([r.grad_norm_total for r in sel])


def _probe_cell(params: ModelParams, task, spec: NGramSpec, k: int) -> tuple:
    g = loss_grad_batch(params, task.sequences, task.truth)
    pred = predict_batch(params, task.sequences)
    l = max(0, min(k - 1, spec.n - 1))
    cond = conditional_batch(task.rows, task.pis, task.sequences, l, spec.S, spec.n)
    tv = 0.5 * np.abs(pred - cond).sum(axis=1)
    sq = np.sum((pred - cond) ** 2, axis=1)
    return g, float(np.mean(tv)), float(np.mean(sq))


def stationarity_probe(config: ModelConfig, k: int, c_values: Sequence[float], T_values: Sequence[int],
                       batch_size: int = 512, seed: int = 0, task: Optional[NGramSpec] = None,
                       builder=None) -> StationarityReport:
    """Monte Carlo estimate of the population gradient at the k-gram construction.

    For every ``T`` a single batch of ``batch_size`` fresh LMs and sequences
    is drawn (from a seed-derived stream that depends on ``T`` only), so all
    ``c`` values at that ``T`` see paired data. ``builder(config, c)`` may
    override the construction, e.g. for the multi-head bigram.
    """
    if not c_values or not T_values:
        raise ValueError("probe grid must be nonempty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    task = task or NGramSpec(config.S, 3, 0.5, seed)
    report = StationarityReport()
    for T in T_values:
        if T > config.T_max:
            raise ValueError(f"T={T} exceeds T_max={config.T_max}")
        data = sample_task_batch(task, int(T), int(batch_size), make_rng(seed, "probe", int(T)))
        for c in c_values:
            params = builder(config, c) if builder else build_kgram_params(config, k, c)
            g, tv, sq = _probe_cell(params, data, task, k)
            report.rows.append(ProbeRow(k, float(c), int(T), int(batch_size), g.total_norm(), g.norms(), tv, sq,
                                        g.loss))
    return report


def random_matched_params(params: ModelParams, rng: np.random.Generator) -> ModelParams:
    """Gaussian parameters whose per-group Frobenius norms equal those of ``params``."""
    out = {}
    for g, a in params.groups().items():
        z = rng.standard_normal(a.shape)
        if g == "A1":
            z = np.tril(z)
        norm = np.linalg.norm(a)
        out[g] = z * (norm / np.linalg.norm(z)) if norm > 0 else np.zeros_like(a)
    return params.with_groups(**out)


def gradient_at(params: ModelParams, task: NGramSpec, T: int, batch_size: int, seed: int) -> GradientSet:
    data = sample_task_batch(task, T, batch_size, make_rng(seed, "probe", int(T)))
    return loss_grad_batch(params, data.sequences, data.truth)


def kgram_output_batch(params: ModelParams, seqs) -> np.ndarray:
    """Final-position outputs for a batch of equal-length sequences."""
    return forward_batch(params, seqs).p_out[:, -1]
