"""In-context counting estimators: contiguous k-gram and subset-history MLE.

Positions in the docstrings below are 0-based. Predicting token ``T`` (the
one after the context) with the k-gram estimator uses every position
``i in [k-1, T-1]`` whose ``(k-1)``-history ``x[i-k+1:i]`` equals the last
``k-1`` context tokens, and averages the tokens found at those positions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .seqmodel import ce_loss_vs_truth


class EmptyMatchSet(ValueError):
    """No context position shares the history being matched."""


@dataclass(frozen=True)
class EstimatorKind:
    """Either ``kgram`` with ``k`` or ``subset`` with a set of positive ``lags``."""

    variant: str
    k: Optional[int] = None
    lags: Optional[tuple] = None
    backoff: bool = True

    def __post_init__(self):
        if self.variant == "kgram":
            if self.k is None or int(self.k) < 1:
                raise ValueError("kgram estimator needs k >= 1")
        elif self.variant == "subset":
            lags = tuple(sorted(int(h) for h in (self.lags or ())))
            if len(set(lags)) != len(lags) or any(h < 1 for h in lags):
                raise ValueError("subset lags must be distinct positive integers")
            object.__setattr__(self, "lags", lags)
        else:
            raise ValueError(f"unknown estimator variant {self.variant!r}")

    @classmethod
    def kgram(cls, k: int, backoff: bool = True) -> "EstimatorKind":
        return cls("kgram", k=int(k), backoff=backoff)

    @classmethod
    def subset(cls, lags, backoff: bool = True) -> "EstimatorKind":
        return cls("subset", lags=tuple(lags), backoff=backoff)

    @property
    def label(self) -> str:
        if self.variant == "kgram":
            return str(self.k)
        return "{" + ",".join(str(h) for h in self.lags) + "}"

    def predict(self, seq, S: int) -> np.ndarray:
        if self.variant == "kgram":
            return kgram_predict(seq, self.k, S, backoff=self.backoff)
        return subset_predict(seq, self.lags, S, backoff=self.backoff)


def _as_seq(seq) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.int64)
    if seq.ndim != 1 or seq.size < 1:
        raise ValueError("sequence must be a non-empty 1-d token array")
    return seq


def subset_match_positions(seq, lags: Sequence[int]) -> np.ndarray:
    """Positions ``i`` with ``x[i-h] == x[T-h]`` for every lag ``h``."""
    seq = _as_seq(seq)
    T = seq.size
    lags = tuple(lags)
    if not lags:
        return np.arange(T)
    hmax = max(lags)
    if hmax > T:
        return np.empty(0, dtype=np.int64)
    cand = np.arange(hmax, T)
    ok = np.ones(cand.size, dtype=bool)
    for h in lags:
        ok &= seq[cand - h] == seq[T - h]
    return cand[ok]


def match_positions(seq, k: int) -> np.ndarray:
    """The match set of the k-gram estimator (0-based positions)."""
    return subset_match_positions(seq, range(1, int(k)))


def _normalised_counts(tokens: np.ndarray, S: int) -> np.ndarray:
    counts = np.bincount(tokens, minlength=S)
    return counts / counts.sum()


def kgram_predict(seq, k: int, S: int, backoff: bool = False) -> np.ndarray:
    if int(k) < 1:
        raise ValueError("k must be >= 1")
    seq = _as_seq(seq)
    pos = match_positions(seq, k)
    if pos.size:
        return _normalised_counts(seq[pos], S)
    if not backoff:
        raise EmptyMatchSet(f"no position matches the last {k - 1} tokens")
    if k == 1:
        return np.full(S, 1.0 / S)
    return kgram_predict(seq, k - 1, S, backoff=True)


def subset_predict(seq, lags, S: int, backoff: bool = False) -> np.ndarray:
    seq = _as_seq(seq)
    lags = tuple(sorted(int(h) for h in lags))
    if lags and max(lags) >= seq.size:
        raise ValueError(f"largest lag {max(lags)} must be < T={seq.size}")
    pos = subset_match_positions(seq, lags)
    if pos.size:
        return _normalised_counts(seq[pos], S)
    if not backoff:
        raise EmptyMatchSet(f"no position matches the lag set {set(lags)}")
    if not lags:
        return np.full(S, 1.0 / S)
    return subset_predict(seq, lags[:-1], S, backoff=True)


def kgram_predict_batch(seqs, k: int, S: int, backoff: bool = True) -> np.ndarray:
    """Vectorised ``kgram_predict`` over the rows of a ``B x T`` array."""
    seqs = np.asarray(seqs, dtype=np.int64)
    B, T = seqs.shape
    out = np.empty((B, S))
    todo = np.arange(B)
    for kk in range(int(k), 0, -1):
        if todo.size == 0:
            break
        sub = seqs[todo]
        if kk - 1 > T:
            mask = np.zeros((todo.size, 0), dtype=bool)
            toks = sub[:, :0]
        else:
            mask = np.ones((todo.size, T - (kk - 1)), dtype=bool)
            for h in range(1, kk):
                mask &= sub[:, kk - 1 - h:T - h] == sub[:, [T - h]]
            toks = sub[:, kk - 1:]
        counts = np.zeros((todo.size, S))
        for s in range(S):
            counts[:, s] = np.sum(mask & (toks == s), axis=1)
        tot = counts.sum(axis=1)
        ok = tot > 0
        out[todo[ok]] = counts[ok] / tot[ok, None]
        if not backoff and not np.all(ok):
            raise EmptyMatchSet(f"{int((~ok).sum())} sequences have an empty {k}-gram match set")
        todo = todo[~ok]
    out[todo] = 1.0 / S
    return out


def estimator_ce(kind: EstimatorKind, seqs, truths, S: int) -> tuple:
    """Mean and standard error of the CE between final-position estimates and truths.

    ``truths[b]`` is the true next-token distribution for ``seqs[b]``.
    """
    seqs = np.asarray(seqs, dtype=np.int64)
    if seqs.shape[0] == 0:
        raise ValueError("empty batch")
    if kind.variant == "kgram":
        preds = kgram_predict_batch(seqs, kind.k, S, backoff=kind.backoff)
    else:
        preds = np.stack([kind.predict(s, S) for s in seqs])
    ces = np.array([ce_loss_vs_truth(p, q) for p, q in zip(preds, truths)])
    stderr = float(ces.std(ddof=1) / np.sqrt(ces.size)) if ces.size > 1 else 0.0
    return float(ces.mean()), stderr
