"""Closed-form gradients of the two-layer model and a finite-difference oracle.

The backward pass follows the structure of the model directly: the output is
linear in the second-layer attention ``a2``, the second-layer softmax has the
usual ``a * (g - <a, g>)`` backward, and each first-layer head is linear in
its value matrix and in its (input independent) attention matrix. All
batch/query reductions are done with ``einsum`` over explicit index sets so
no ``D1^2``-sized temporaries beyond the parameter shapes are formed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .seqmodel import PROB_FLOOR, ce_loss_vs_truth
from .transformer import ForwardTrace, ModelParams, forward_batch

GROUP_FIELDS = {"A1": "dA1", "V1": "dV1", "K2": "dK2", "Q2": "dQ2"}


@dataclass(eq=False)
class GradientSet:
    dA1: np.ndarray
    dV1: np.ndarray
    dK2: np.ndarray
    dQ2: np.ndarray
    loss: float = 0.0

    def groups(self) -> dict:
        return {g: getattr(self, f) for g, f in GROUP_FIELDS.items()}

    def norms(self) -> dict:
        return {g: float(np.linalg.norm(a)) for g, a in self.groups().items()}

    def total_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(a * a) for a in self.groups().values())))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.groups().values()])

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "GradientSet":
        return cls(*(np.zeros_like(a) for a in params.groups().values()))


def _mean_sets(sets) -> GradientSet:
    """Mean of GradientSets using numpy's pairwise summation over a stacked axis."""
    sets = list(sets)
    stack = {f: np.stack([getattr(s, f) for s in sets]) for f in GROUP_FIELDS.values()}
    out = {f: np.sum(a, axis=0) / len(sets) for f, a in stack.items()}
    loss = float(np.sum(np.array([s.loss for s in sets])) / len(sets))
    return GradientSet(loss=loss, **out)


# ---------------------------------------------------------------------------
# generic self-attention map


def self_attention_jacobians(q, Q, K, V, t: int) -> dict:
    """Jacobians of ``q_t^+ = sum_{i<=t} p_i V q_i`` with ``p = softmax_i(<K q_i, Q q_t>)``.

    ``q`` is ``T x d`` and ``t`` is a 0-based query position. Returns arrays
    indexed ``[out, row, col]`` for ``Q``, ``K``, ``V`` and ``[i, out, in]``
    for the inputs ``q_i``; rows of ``q`` after ``t`` get zero Jacobians.
    """
    q = np.asarray(q, dtype=np.float64)
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    T, d = q.shape
    if not 0 <= t < T:
        raise ValueError(f"query position {t} outside [0, {T})")
    qs = q[: t + 1]
    qt = q[t]
    logits = (qs @ K.T) @ (Q @ qt)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    qbar = p @ qs
    vq = qs @ V.T  # (t+1, dv)
    centred = qs - qbar
    dv = V.shape[0]

    jac_V = np.einsum("ab,c->abc", np.eye(dv), qbar)
    jac_K = np.einsum("i,ia,b,ic->abc", p, vq, Q @ qt, centred)
    jac_Q = np.einsum("i,ia,ib,c->abc", p, vq, centred @ K.T, qt)

    kqt = K.T @ (Q @ qt)
    jac_q = np.zeros((T, dv, d))
    for i in range(t + 1):
        jac_q[i] = p[i] * V + p[i] * np.outer(V @ centred[i], kqt)
    # the query also moves every logit through Q
    jac_q[t] += np.einsum("j,ja,jc->ac", p, vq, centred @ K.T @ Q)
    return {"Q": jac_Q, "K": jac_K, "V": jac_V, "q": jac_q, "p": p, "qbar": qbar}


# ---------------------------------------------------------------------------
# two-layer model


def _vjp(params: ModelParams, trace: ForwardTrace, w: np.ndarray) -> GradientSet:
    """Pull back ``sum_{b,q,s} w[b,q,s] * dp_out[b,q,s]`` to every parameter."""
    cfg = params.config
    B, T = trace.tokens.shape
    d, m = cfg.d, cfg.m
    # dL/da2[b,q,i] is the upstream weight of the token sitting at key i
    g = np.take_along_axis(w, np.broadcast_to(trace.tokens[:, None, :], trace.a2.shape), axis=2)
    delta = trace.a2 * (g - np.sum(trace.a2 * g, axis=2, keepdims=True))

    D1 = cfg.D1
    dqv = np.matmul(delta, trace.kk)  # (B, Q, D1)
    dkk = np.matmul(np.swapaxes(delta, 1, 2), trace.qv)  # (B, T, D1)
    r1q = trace.r1[:, trace.queries]
    dQ2 = dqv.reshape(-1, D1).T @ r1q.reshape(-1, D1)
    dK2 = dkk.reshape(-1, D1).T @ trace.r1.reshape(-1, D1)

    dr1 = dkk @ params.K2
    np.add.at(dr1, (slice(None), trace.queries), dqv @ params.Q2)
    # head blocks, laid out as (m, B*T, d)
    G = np.transpose(dr1.reshape(B, T, m + 1, d)[:, :, 1:], (2, 0, 1, 3)).reshape(m, B * T, d)
    qb = np.transpose(trace.qbar0, (1, 0, 2, 3)).reshape(m, B * T, d)
    dV1 = np.matmul(np.swapaxes(G, 1, 2), qb)
    dqbar = np.matmul(G, params.V1).reshape(m, B, T, d)
    dqbar = np.transpose(dqbar, (0, 2, 1, 3)).reshape(m, T, B * d)
    r0t = np.transpose(trace.r0, (0, 2, 1)).reshape(B * d, T)
    da1 = dqbar @ r0t  # (m, T, T)
    a1 = trace.a1
    dlog = a1 * (da1 - np.sum(a1 * da1, axis=2, keepdims=True))
    dA1 = np.zeros_like(params.A1)
    dA1[:, :T, :T] = np.tril(dlog)
    return GradientSet(dA1, dV1, dK2, dQ2)


def loss_weights(p: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-token weights ``1 - truth/p`` of the residual form of the CE gradient.

    Tokens whose prediction sits below the probability floor get weight 1:
    the floored loss is flat there, and the constant part integrates to zero
    against the simplex-preserving output derivative.
    """
    safe = np.maximum(p, PROB_FLOOR)
    w = 1.0 - truth / safe
    return np.where(p < PROB_FLOOR, 1.0, w)


def output_jacobians(params: ModelParams, trace: ForwardTrace) -> GradientSet:
    """Jacobians of ``p_out`` (final query of the first sequence) w.r.t. every parameter.

    Each field carries a leading axis of length ``S`` indexing the output token.
    """
    S = params.config.S
    sub = _single(trace)
    jac = [_vjp(params, sub, np.eye(S)[s][None, None, :]) for s in range(S)]
    return GradientSet(*(np.stack([getattr(j, f) for j in jac]) for f in GROUP_FIELDS.values()))


def _single(trace: ForwardTrace, b: int = 0) -> ForwardTrace:
    return ForwardTrace(
        trace.tokens[b:b + 1], trace.r0[b:b + 1], trace.a1, trace.qbar0[b:b + 1], trace.r1[b:b + 1],
        trace.queries[-1:], trace.qv[b:b + 1, -1:], trace.kk[b:b + 1],
        trace.logits2[b:b + 1, -1:], trace.a2[b:b + 1, -1:], trace.p_out[b:b + 1, -1:],
    )


def key_term_norms(params: ModelParams, trace: ForwardTrace, w: np.ndarray) -> tuple:
    """Norm of each key position's summand in ``dK2`` and each key's logit-gradient norm.

    Single sequence, final query. Returns ``(term_norms, logit_grad_norms)``,
    both of length ``T``; the logit ``<K2 r1_i, Q2 r1_t>`` has gradient
    ``qv ⊗ r1_i`` w.r.t. ``K2``.
    """
    sub = _single(trace)
    a2 = sub.a2[0, 0]
    g = np.asarray(w)[sub.tokens[0]]
    delta = a2 * (g - a2 @ g)
    qv = sub.qv[0, 0]
    r1n = np.linalg.norm(sub.r1[0], axis=1)
    lg = np.linalg.norm(qv) * r1n
    return np.abs(delta) * lg, lg


def loss_grad_batch(params: ModelParams, seqs, truths, queries=None) -> GradientSet:
    """Mean CE gradient over a batch (and over query positions if several are given).

    ``truths`` is ``(B, S)`` for a single query or ``(B, Q, S)`` for several.
    """
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    trace = forward_batch(params, seqs, queries)
    B, Qn = trace.a2.shape[:2]
    truths = np.asarray(truths, dtype=np.float64).reshape(B, Qn, params.config.S)
    p = trace.p_out
    ce = -np.sum(truths * np.log(np.maximum(p, PROB_FLOOR)), axis=2)
    w = loss_weights(p, truths) / (B * Qn)
    grads = _vjp(params, trace, w)
    grads.loss = float(np.sum(ce) / (B * Qn))
    return grads


def loss_grad(params: ModelParams, seq, truth) -> GradientSet:
    """CE gradient for one sequence at its final position."""
    seq = np.asarray(seq, dtype=np.int64)
    return loss_grad_batch(params, seq[None, :], np.asarray(truth, dtype=np.float64)[None, :])


def loss_grad_mean(params: ModelParams, seqs, truths) -> GradientSet:
    """Batch gradient assembled as the pairwise mean of per-sequence gradients."""
    return _mean_sets(loss_grad(params, s, t) for s, t in zip(seqs, truths))


def loss_value(params: ModelParams, seq, truth) -> float:
    trace = forward_batch(params, np.asarray(seq, dtype=np.int64)[None, :])
    return ce_loss_vs_truth(trace.p_out[0, -1], truth)


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class FDReport:
    max_rel_err: float
    worst_param_coordinate: Optional[tuple]
    n_coords: int
    step: float

    def to_json(self) -> str:
        return json.dumps({
            "max_rel_err": self.max_rel_err,
            "worst_param_coordinate": list(self.worst_param_coordinate) if self.worst_param_coordinate else None,
            "n_coords": self.n_coords,
            "step": self.step,
        })


def active_coordinates(params: ModelParams, T: int) -> list:
    """Every parameter coordinate that can affect a length-``T`` forward pass.

    For ``A1`` that is the causal lower triangle of the leading ``T x T`` block.
    """
    coords = []
    m = params.config.m
    rows, cols = np.tril_indices(T)
    for h in range(m):
        coords += [("A1", (h, int(i), int(j))) for i, j in zip(rows, cols)]
    for g in ("V1", "K2", "Q2"):
        coords += [(g, tuple(int(x) for x in idx)) for idx in np.ndindex(getattr(params, g).shape)]
    return coords


def _log_probs(params: ModelParams, seq, truth) -> np.ndarray:
    trace = forward_batch(params, seq[None, :])
    return np.log(np.maximum(trace.p_out[0, -1], PROB_FLOOR))


_STENCILS = {
    2: ((1, -1), (0.5, -0.5)),
    4: ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)),
}


def fd_check(params: ModelParams, seq, truth, step: float = 1e-4, max_coords: int = 4000,
             rng: Optional[np.random.Generator] = None, order: int = 2) -> FDReport:
    """Central differences of the CE loss against ``loss_grad``.

    Uses every active coordinate, or a random subset of ``max(500, max_coords)``
    of them when there are more. Relative error is
    ``|a - f| / max(|a|, |f|, 1e-8)``. ``order`` picks the 2- or 4-point
    central stencil. The loss difference is accumulated token by token so
    floored tokens (constant ``-log 1e-12`` terms) cancel exactly instead of
    inflating roundoff.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    if order not in _STENCILS:
        raise ValueError("order must be 2 or 4")
    offsets, weights = _STENCILS[order]
    seq = np.asarray(seq, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.float64)
    analytic = loss_grad(params, seq, truth).groups()
    coords = active_coordinates(params, seq.size)
    limit = max(500, int(max_coords))
    if len(coords) > limit:
        rng = rng or np.random.default_rng(0)
        coords = [coords[i] for i in sorted(rng.choice(len(coords), size=limit, replace=False))]
    base = _log_probs(params, seq, truth)
    work = params.copy()
    worst, worst_coord = 0.0, None
    for g, idx in coords:
        arr = getattr(work, g)
        orig = arr[idx]
        diff = np.zeros_like(base)
        for off, wt in zip(offsets, weights):
            arr[idx] = orig + off * step
            diff += wt * (_log_probs(work, seq, truth) - base)
        arr[idx] = orig
        fd = -float(np.dot(truth, diff)) / step
        a = analytic[g][idx]
        err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
        if err > worst or worst_coord is None:
            worst, worst_coord = err, (g,) + tuple(idx)
    return FDReport(float(worst), worst_coord, len(coords), float(step))
