"""Ground-truth n-gram sources: Dirichlet priors, lifted chains, sampling.

Tokens are 0-based integers in ``[0, S)``. A history of the last ``n - 1``
tokens ``(x_{t-n+1}, ..., x_{t-1})`` is encoded as a base-``S`` integer whose
least-significant digit is the most recent token, so appending a token to a
history is ``(h % S**(n-2)) * S + x``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

PROB_FLOOR = 1e-12
ROW_SUM_TOL = 1e-12


class NonConvergence(RuntimeError):
    """Power iteration hit ``max_iters`` before reaching the tolerance."""

    def __init__(self, residual: float, iters: int):
        super().__init__(f"power iteration did not converge: residual={residual:.3e} after {iters} iters")
        self.residual = residual
        self.iters = iters


class DegenerateHistory(ValueError):
    """The conditioning history has (numerically) zero stationary mass."""


def make_rng(seed: int, tag: str = "", index: int = 0) -> np.random.Generator:
    """Deterministic sub-stream for ``(seed, tag, index)``.

    The tag is hashed with CRC32 so streams are stable across processes
    (unlike ``hash()``, which is salted per interpreter).
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(tag.encode("utf-8")), int(index)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


@dataclass(frozen=True)
class NGramSpec:
    S: int
    n: int
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if int(self.S) < 2:
            raise ValueError(f"alphabet size S must be >= 2, got {self.S}")
        if int(self.n) < 1:
            raise ValueError(f"order n must be >= 1, got {self.n}")
        if not (float(self.alpha) > 0 and np.isfinite(self.alpha)):
            raise ValueError(f"dirichlet alpha must be a positive real, got {self.alpha}")

    @property
    def n_histories(self) -> int:
        return self.S ** (self.n - 1)

    def to_dict(self) -> dict:
        return {"S": int(self.S), "n": int(self.n), "alpha": float(self.alpha), "seed": int(self.seed)}


@dataclass(frozen=True, eq=False)
class TransitionTensor:
    spec: NGramSpec
    rows: np.ndarray  # (S**(n-1), S)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        expected = (self.spec.n_histories, self.spec.S)
        if rows.shape != expected:
            raise ValueError(f"rows must have shape {expected}, got {rows.shape}")
        if np.any(rows < 0) or np.any(rows > 1):
            raise ValueError("transition probabilities must lie in [0, 1]")
        if np.max(np.abs(rows.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
            raise ValueError("every transition row must sum to 1")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    def row(self, history) -> np.ndarray:
        return self.rows[history_index(history, self.spec.S)]

    def to_json(self) -> dict:
        return {"spec": self.spec.to_dict(), "rows": self.rows.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "TransitionTensor":
        spec = NGramSpec(**obj["spec"])
        return cls(spec, np.array(obj["rows"], dtype=np.float64))


@dataclass(frozen=True, eq=False)
class LiftedChain:
    S: int
    n: int
    transition: sparse.csr_matrix  # (S**(n-1), S**(n-1))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    def state_tuple(self, index: int) -> tuple:
        return decode_history(index, self.S, self.n - 1)


@dataclass(frozen=True, eq=False)
class StationaryDistribution:
    pi: np.ndarray
    residual: float
    iters: int = 0


@dataclass(frozen=True, eq=False)
class SequenceBatch:
    """``B x T`` token array; ``lm_index[b]`` points into the tensors that produced row ``b``."""

    sequences: np.ndarray
    lm_index: np.ndarray = field(default=None)

    def __post_init__(self):
        seqs = np.asarray(self.sequences, dtype=np.int64)
        if seqs.ndim != 2:
            raise ValueError("sequences must be a 2-d array")
        object.__setattr__(self, "sequences", seqs)
        if self.lm_index is None:
            object.__setattr__(self, "lm_index", np.arange(seqs.shape[0]))

    def to_csv(self, path) -> None:
        np.savetxt(path, self.sequences, fmt="%d", delimiter=",")

    @classmethod
    def from_csv(cls, path) -> "SequenceBatch":
        return cls(np.atleast_2d(np.loadtxt(path, dtype=np.int64, delimiter=",")))


def history_index(history, S: int) -> int:
    idx = 0
    for tok in history:
        idx = idx * S + int(tok)
    return idx


def decode_history(index: int, S: int, length: int) -> tuple:
    out = []
    for _ in range(length):
        index, tok = divmod(index, S)
        out.append(tok)
    return tuple(reversed(out))


def sample_lm(spec: NGramSpec, rng: np.random.Generator) -> TransitionTensor:
    """Draw every history row independently from ``Dirichlet(alpha * 1_S)``."""
    rows = rng.dirichlet(np.full(spec.S, float(spec.alpha)), size=spec.n_histories)
    # renormalise to absorb the sampler's last-ulp rounding
    rows = rows / rows.sum(axis=1, keepdims=True)
    return TransitionTensor(spec, rows)


def lift(tensor: TransitionTensor) -> LiftedChain:
    S, n = tensor.spec.S, tensor.spec.n
    if n == 1:
        return LiftedChain(S, n, sparse.csr_matrix(np.ones((1, 1))))
    H = S ** (n - 1)
    src = np.repeat(np.arange(H), S)
    dst = ((src % (S ** (n - 2))) * S) + np.tile(np.arange(S), H)
    vals = tensor.rows.reshape(-1)
    # duplicates cannot occur: distinct appended tokens give distinct successors
    mat = sparse.csr_matrix((vals, (src, dst)), shape=(H, H))
    return LiftedChain(S, n, mat)


_RATE_SPAN = 20


def stationary(chain: LiftedChain, tol: float = 1e-12, max_iters: int = 1_000_000) -> StationaryDistribution:
    """Power iteration ``pi <- pi T`` from the uniform vector.

    Stops once the step residual is below ``tol`` and so is the remaining
    distance to the fixed point, estimated as ``r * rho / (1 - rho)`` from
    the contraction rate ``rho`` over the last ``_RATE_SPAN`` steps. A small
    residual alone is not enough when the spectral gap is small.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    H = chain.n_states
    pi = np.full(H, 1.0 / H)
    T_t = chain.transition.T.tocsr()
    residual = np.inf
    history = []
    for it in range(1, max_iters + 1):
        nxt = T_t @ pi
        nxt /= nxt.sum()
        residual = float(np.max(np.abs(nxt - pi)))
        pi = nxt
        history.append(residual)
        if residual <= tol:
            if residual > 0 and len(history) > _RATE_SPAN and history[-1 - _RATE_SPAN] > 0:
                rho = min((residual / history[-1 - _RATE_SPAN]) ** (1.0 / _RATE_SPAN), 1.0 - 1e-15)
                if residual * rho / (1.0 - rho) > tol:
                    continue
            res = float(np.max(np.abs(T_t @ pi - pi)))
            if res <= tol:
                return StationaryDistribution(pi, res, it)
        if len(history) > 4 * _RATE_SPAN:
            del history[:-_RATE_SPAN - 1]
    raise NonConvergence(residual, max_iters)


def stationary_dense_batch(rows: np.ndarray, S: int, n: int) -> np.ndarray:
    """Stationary distributions of many lifted chains via a dense linear solve.

    ``rows`` has shape ``(B, S**(n-1), S)``; returns ``(B, S**(n-1))``. Used for
    bulk data generation where per-chain power iteration would dominate runtime.
    """
    rows = np.asarray(rows, dtype=np.float64)
    B, H, _ = rows.shape
    if n == 1:
        return np.ones((B, 1))
    P = np.zeros((B, H, H))
    src = np.repeat(np.arange(H), S)
    dst = ((src % (S ** (n - 2))) * S) + np.tile(np.arange(S), H)
    P[:, src, dst] = rows.reshape(B, -1)
    # (P^T - I) pi = 0 with the last equation replaced by sum(pi) = 1
    A = np.transpose(P, (0, 2, 1)) - np.eye(H)
    A[:, -1, :] = 1.0
    b = np.zeros((B, H))
    b[:, -1] = 1.0
    pi = np.linalg.solve(A, b[..., None])[..., 0]
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum(axis=1, keepdims=True)


def sample_sequence(tensor: TransitionTensor, pi: StationaryDistribution, T: int,
                    rng: np.random.Generator) -> np.ndarray:
    S, n = tensor.spec.S, tensor.spec.n
    if T < n - 1:
        raise ValueError(f"T={T} is shorter than the history length {n - 1}")
    seq = np.empty(T, dtype=np.int64)
    if n > 1:
        state = int(rng.choice(len(pi.pi), p=pi.pi))
        seq[: n - 1] = decode_history(state, S, n - 1)
    else:
        state = 0
    mod = S ** (n - 2) if n >= 2 else 1
    for t in range(n - 1, T):
        tok = int(rng.choice(S, p=tensor.rows[state]))
        seq[t] = tok
        state = (state % mod) * S + tok if n >= 2 else 0
    return seq


def sample_sequences_batch(rows: np.ndarray, pis: np.ndarray, T: int, S: int, n: int,
                           rng: np.random.Generator) -> np.ndarray:
    """One sequence per chain; ``rows`` is ``(B, H, S)`` and ``pis`` is ``(B, H)``."""
    B = rows.shape[0]
    seqs = np.empty((B, T), dtype=np.int64)
    ar = np.arange(B)
    if n > 1:
        state = _inverse_cdf(np.cumsum(pis, axis=1), rng.random(B))
        hist = state.copy()
        for j in range(n - 2, -1, -1):
            hist, seqs[:, j] = np.divmod(hist, S)
    else:
        state = np.zeros(B, dtype=np.int64)
    mod = S ** (n - 2) if n >= 2 else 1
    cdf_all = np.cumsum(rows, axis=2)
    u = rng.random((B, max(T - (n - 1), 0)))
    for j, t in enumerate(range(n - 1, T)):
        tok = _inverse_cdf(cdf_all[ar, state], u[:, j])
        seqs[:, t] = tok
        state = (state % mod) * S + tok if n >= 2 else state
    return seqs


def _inverse_cdf(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    # count of cdf entries <= u, clipped for the last-ulp case cdf[-1] < 1
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1).astype(np.int64)


def conditional(tensor: TransitionTensor, pi: StationaryDistribution, history) -> np.ndarray:
    """Next-token distribution given only the last ``len(history)`` tokens.

    For a full ``(n-1)``-history this is the tensor row itself; shorter
    histories marginalise the stationary ``(n-1)``-window distribution.
    """
    S, n = tensor.spec.S, tensor.spec.n
    history = tuple(int(x) for x in history)
    l = len(history)
    if l > n - 1:
        raise ValueError(f"history length {l} exceeds n-1={n - 1}")
    if l == n - 1:
        return tensor.rows[history_index(history, S)]
    window = np.asarray(pi.pi).reshape((S,) * (n - 1))
    # marginal of the first l+1 tokens of a stationary window
    joint = window.sum(axis=tuple(range(l + 1, n - 1))) if l + 1 < n - 1 else window
    num = joint[history] if l else joint
    denom = float(num.sum())
    if denom < 1e-300:
        raise DegenerateHistory(f"history {history} has stationary mass {denom:.3e}")
    return num / denom


def conditional_table(tensor: TransitionTensor, pi: StationaryDistribution, l: int) -> np.ndarray:
    """All ``l``-history conditionals at once, shape ``(S**l, S)`` in base-S order."""
    S = tensor.spec.S
    return np.stack([conditional(tensor, pi, decode_history(h, S, l)) for h in range(S ** l)])


def ce_loss_vs_truth(predicted, truth) -> float:
    """Cross-entropy in nats, ``-sum truth * log(max(pred, 1e-12))``."""
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    return float(-np.sum(truth * np.log(np.maximum(predicted, PROB_FLOOR))))


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def sample_lm_rows(spec: NGramSpec, B: int, rng: np.random.Generator) -> np.ndarray:
    """``B`` independent transition tensors as a ``(B, S**(n-1), S)`` array."""
    rows = rng.dirichlet(np.full(spec.S, float(spec.alpha)), size=(B, spec.n_histories))
    return rows / rows.sum(axis=2, keepdims=True)


def history_indices(seqs: np.ndarray, S: int, length: int) -> np.ndarray:
    """Base-S index of the last ``length`` tokens of every row."""
    seqs = np.asarray(seqs, dtype=np.int64)
    idx = np.zeros(seqs.shape[0], dtype=np.int64)
    for j in range(seqs.shape[1] - length, seqs.shape[1]):
        idx = idx * S + seqs[:, j]
    return idx


def conditional_batch(rows: np.ndarray, pis: np.ndarray, seqs: np.ndarray, l: int, S: int, n: int) -> np.ndarray:
    """Vectorised ``conditional`` given the last ``l`` tokens of each sequence."""
    B = rows.shape[0]
    if l > n - 1:
        raise ValueError(f"history length {l} exceeds n-1={n - 1}")
    if l == n - 1:
        return rows[np.arange(B), history_indices(seqs, S, n - 1)]
    window = pis.reshape((B,) + (S,) * (n - 1))
    joint = window.sum(axis=tuple(range(l + 2, n))) if l + 1 < n - 1 else window
    joint = joint.reshape(B, S ** l, S)
    num = joint[np.arange(B), history_indices(seqs, S, l)]
    denom = num.sum(axis=1, keepdims=True)
    if np.any(denom < 1e-300):
        raise DegenerateHistory("a history has zero stationary mass")
    return num / denom


@dataclass(frozen=True, eq=False)
class TaskBatch:
    """Fresh (LM, sequence) pairs with the true next-token distribution of each."""

    sequences: np.ndarray  # (B, T)
    rows: np.ndarray  # (B, S**(n-1), S)
    pis: np.ndarray  # (B, S**(n-1))
    truth: np.ndarray  # (B, S): tensor row of the final (n-1)-history


def sample_task_batch(spec: NGramSpec, T: int, B: int, rng: np.random.Generator) -> TaskBatch:
    """One freshly drawn LM per sequence, stationary start, truth at the final position."""
    if T < spec.n - 1:
        raise ValueError(f"T={T} is shorter than the history length {spec.n - 1}")
    rows = sample_lm_rows(spec, B, rng)
    pis = stationary_dense_batch(rows, spec.S, spec.n)
    seqs = sample_sequences_batch(rows, pis, T, spec.S, spec.n, rng)
    truth = conditional_batch(rows, pis, seqs, spec.n - 1, spec.S, spec.n)
    return TaskBatch(seqs, rows, pis, truth)


def truth_at_positions(task: TaskBatch, spec: NGramSpec, queries) -> np.ndarray:
    """True next-token distributions after each query position, shape ``(B, Q, S)``."""
    S, n = spec.S, spec.n
    out = [conditional_batch(task.rows, task.pis, task.sequences[:, : q + 1], min(n - 1, q + 1), S, n)
           if q + 1 >= n - 1 else None for q in queries]
    if any(o is None for o in out):
        raise ValueError(f"query positions must be >= {n - 2}")
    return np.stack(out, axis=1)
