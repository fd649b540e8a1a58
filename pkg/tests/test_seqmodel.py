import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subgram.seqmodel import (
    DegenerateHistory, NGramSpec, NonConvergence, SequenceBatch, TransitionTensor, ce_loss_vs_truth, conditional,
    conditional_batch, decode_history, history_index, lift, make_rng, sample_lm, sample_sequence,
    sample_sequences_batch, sample_task_batch, stationary, stationary_dense_batch,
)


def tensor(rows, S, n):
    return TransitionTensor(NGramSpec(S, n, 1.0), np.array(rows, dtype=float))


def dense_oracle(P):
    # null vector of (P^T - I) via SVD, independent of the library's solver
    _, _, vt = np.linalg.svd(P.T - np.eye(P.shape[0]))
    v = np.abs(vt[-1])
    return v / v.sum()


# ---- spec validation -------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(S=1, n=2), dict(S=3, n=0), dict(S=3, n=2, alpha=0.0), dict(S=3, n=2, alpha=-1)])
def test_spec_rejects_invalid(kw):
    with pytest.raises(ValueError):
        NGramSpec(**kw)


def test_tensor_rejects_bad_rows():
    with pytest.raises(ValueError):
        tensor([[0.5, 0.6], [0.5, 0.5]], 2, 2)
    with pytest.raises(ValueError):
        tensor([[1.0, 0.0]], 2, 2)


# ---- sample_lm ---------------------------------------------------------------

def test_sample_lm_shape_and_rows():
    t = sample_lm(NGramSpec(5, 3, 0.5), make_rng(0, "lm"))
    assert t.rows.shape == (25, 5)
    assert np.max(np.abs(t.rows.sum(axis=1) - 1)) <= 1e-12


def test_sample_lm_unigram_case():
    t = sample_lm(NGramSpec(2, 1, 1.0), make_rng(1, "lm"))
    assert t.rows.shape == (1, 2)
    assert np.all((t.rows > 0) & (t.rows < 1))
    assert abs(t.rows.sum() - 1) <= 1e-12


def test_sample_lm_concentrates_for_large_alpha():
    spec = NGramSpec(3, 2, 1e6)
    rng = make_rng(2, "lm")
    mean = np.mean([sample_lm(spec, rng).rows for _ in range(100)], axis=0)
    assert np.max(np.abs(mean - 1 / 3)) <= 0.01


def test_rows_are_read_only():
    t = sample_lm(NGramSpec(3, 2), make_rng(0))
    with pytest.raises(ValueError):
        t.rows[0, 0] = 1.0


def test_tensor_json_roundtrip():
    t = sample_lm(NGramSpec(3, 3, 0.5, 9), make_rng(9))
    back = TransitionTensor.from_json(t.to_json())
    assert back.spec == t.spec
    np.testing.assert_array_equal(back.rows, t.rows)


# ---- lift ------------------------------------------------------------------------

def test_lift_order_one_is_identity():
    rows = [[0.9, 0.1], [0.4, 0.6]]
    np.testing.assert_array_equal(lift(tensor(rows, 2, 2)).transition.toarray(), np.array(rows))


def test_lift_sparsity_pattern_order_two():
    t = sample_lm(NGramSpec(2, 3, 0.5), make_rng(3))
    P = lift(t).transition.toarray()
    assert P.shape == (4, 4)
    assert np.all((P > 0).sum(axis=1) == 2)
    for src, dst in itertools.product(range(4), range(4)):
        a, b = decode_history(src, 2, 2), decode_history(dst, 2, 2)
        if b[0] != a[1]:
            assert P[src, dst] == 0
        else:
            assert P[src, dst] == t.rows[src, b[1]]


@given(st.integers(2, 4), st.integers(1, 4), st.integers(0, 2 ** 31))
@settings(max_examples=25, deadline=None)
def test_lift_rows_sum_to_one(S, n, seed):
    t = sample_lm(NGramSpec(S, n, 0.7), make_rng(seed))
    P = lift(t).transition
    assert np.max(np.abs(np.asarray(P.sum(axis=1)).ravel() - 1)) <= 1e-12


def test_history_index_roundtrip():
    for idx in range(27):
        assert history_index(decode_history(idx, 3, 3), 3) == idx
    # most recent token is the least-significant digit
    assert history_index((1, 2), 3) == 5


# ---- stationary ------------------------------------------------------------------

def test_stationary_symmetric():
    pi = stationary(lift(tensor([[0.5, 0.5], [0.5, 0.5]], 2, 2)))
    np.testing.assert_allclose(pi.pi, [0.5, 0.5], atol=1e-12)


def test_stationary_hand_derived():
    # 0.1 * pi0 = 0.4 * pi1 with pi0 + pi1 = 1
    pi = stationary(lift(tensor([[0.9, 0.1], [0.4, 0.6]], 2, 2)))
    assert np.max(np.abs(pi.pi - [0.8, 0.2])) <= 1e-12
    assert pi.residual <= 1e-12


def test_stationary_small_gap_is_accurate():
    # second eigenvalue 1 - 3e-3; a 1e-12 step residual alone would leave ~3e-10 error
    a, b = 1e-3, 2e-3
    pi = stationary(lift(tensor([[1 - a, a], [b, 1 - b]], 2, 2)))
    assert np.max(np.abs(pi.pi - [b / (a + b), a / (a + b)])) <= 1e-11


@given(st.integers(0, 2 ** 31))
@settings(max_examples=20, deadline=None)
def test_stationary_matches_dense_oracle(seed):
    t = sample_lm(NGramSpec(3, 3, 0.5), make_rng(seed))
    chain = lift(t)
    pi = stationary(chain)
    assert np.max(np.abs(pi.pi - dense_oracle(chain.transition.toarray()))) <= 1e-10
    assert abs(pi.pi.sum() - 1) <= 1e-12 and np.all(pi.pi >= 0)


def test_dense_batch_agrees_with_power_iteration():
    spec = NGramSpec(4, 3, 0.5)
    rng = make_rng(5)
    tensors = [sample_lm(spec, rng) for _ in range(6)]
    batch = stationary_dense_batch(np.stack([t.rows for t in tensors]), 4, 3)
    for t, row in zip(tensors, batch):
        assert np.max(np.abs(stationary(lift(t)).pi - row)) <= 1e-10


def test_stationary_nonconvergence():
    # slowly mixing chain with a tiny iteration budget
    t = tensor([[0.999, 0.001], [0.0005, 0.9995]], 2, 2)
    with pytest.raises(NonConvergence) as e:
        stationary(lift(t), tol=1e-14, max_iters=5)
    assert e.value.residual > 1e-14


def test_stationary_rejects_bad_tol():
    with pytest.raises(ValueError):
        stationary(lift(tensor([[0.5, 0.5], [0.5, 0.5]], 2, 2)), tol=0)


# ---- sampling ------------------------------------------------------------------

def test_sample_sequence_absorbing():
    t = tensor([[1.0, 0.0], [0.0, 1.0]], 2, 2)
    pi = stationary(lift(t))
    seq = sample_sequence(t, pi, 20, make_rng(0))
    assert np.all(seq == seq[0])


def test_sample_sequence_range():
    spec = NGramSpec(5, 3, 0.5)
    t = sample_lm(spec, make_rng(1))
    seq = sample_sequence(t, stationary(lift(t)), 32, make_rng(2))
    assert seq.shape == (32,) and seq.min() >= 0 and seq.max() < 5


def test_sample_sequence_too_short():
    t = sample_lm(NGramSpec(3, 4), make_rng(0))
    with pytest.raises(ValueError):
        sample_sequence(t, stationary(lift(t)), 2, make_rng(0))


def test_window_marginal_matches_pi():
    rows = np.array([[0.9, 0.1], [0.4, 0.6]])
    B = 100_000
    seqs = sample_sequences_batch(np.broadcast_to(rows, (B, 2, 2)), np.broadcast_to([0.8, 0.2], (B, 2)), 6, 2, 2,
                                  make_rng(0, "marg"))
    for t in range(1, 6):
        assert abs(np.mean(seqs[:, t] == 0) - 0.8) <= 0.01


def test_shift_invariance_of_windows():
    spec = NGramSpec(2, 3, 0.5)
    t = sample_lm(spec, make_rng(11))
    pi = stationary_dense_batch(t.rows[None], 2, 3)[0]
    B = 20_000
    seqs = sample_sequences_batch(np.broadcast_to(t.rows, (B, 4, 2)), np.broadcast_to(pi, (B, 4)), 8, 2, 3,
                                  make_rng(12))
    for l in (1, 2):
        freqs = []
        for start in range(0, 8 - l + 1):
            idx = np.zeros(B, dtype=int)
            for j in range(l):
                idx = idx * 2 + seqs[:, start + j]
            freqs.append(np.bincount(idx, minlength=2 ** l) / B)
        freqs = np.array(freqs)
        se = np.sqrt(freqs.mean(0) * (1 - freqs.mean(0)) / B)
        assert np.all(np.abs(freqs - freqs.mean(0)) <= 3 * np.sqrt(2) * se + 1e-12)


def test_batch_sampling_is_deterministic():
    spec = NGramSpec(5, 3, 0.5)
    a = sample_task_batch(spec, 32, 64, make_rng(7, "x"))
    b = sample_task_batch(spec, 32, 64, make_rng(7, "x"))
    np.testing.assert_array_equal(a.sequences, b.sequences)
    np.testing.assert_array_equal(a.truth, b.truth)


def test_make_rng_streams_differ_by_tag_and_index():
    x = make_rng(1, "a", 0).random()
    assert x == make_rng(1, "a", 0).random()
    assert x != make_rng(1, "b", 0).random()
    assert x != make_rng(1, "a", 1).random()


def test_sequence_batch_csv_roundtrip(tmp_path):
    seqs = make_rng(0).integers(0, 5, (4, 7))
    SequenceBatch(seqs).to_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(SequenceBatch.from_csv(tmp_path / "s.csv").sequences, seqs)


# ---- conditional ---------------------------------------------------------------

def test_conditional_full_history_is_row():
    t = sample_lm(NGramSpec(3, 3, 0.5), make_rng(4))
    pi = stationary(lift(t))
    for h in itertools.product(range(3), repeat=2):
        row = conditional(t, pi, h)
        assert row is t.rows[history_index(h, 3)] or np.array_equal(row, t.rows[history_index(h, 3)])


def test_conditional_empty_history_is_pi():
    t = tensor([[0.9, 0.1], [0.4, 0.6]], 2, 2)
    np.testing.assert_allclose(conditional(t, stationary(lift(t)), []), [0.8, 0.2], atol=1e-12)


def test_conditional_matches_enumeration():
    t = sample_lm(NGramSpec(2, 3, 0.8), make_rng(6))
    pi = stationary(lift(t))
    # weight of every length-3 window (a, b, c) is pi(a, b) * P(c | a, b)
    joint = np.zeros((2, 2, 2))
    for a, b, c in itertools.product(range(2), repeat=3):
        joint[a, b, c] = pi.pi[history_index((a, b), 2)] * t.rows[history_index((a, b), 2), c]
    for b in range(2):
        want = joint[:, b, :].sum(axis=0)
        np.testing.assert_allclose(conditional(t, pi, [b]), want / want.sum(), atol=1e-12)


def test_conditional_batch_matches_scalar():
    spec = NGramSpec(3, 4, 0.5)
    data = sample_task_batch(spec, 12, 5, make_rng(8))
    for b in range(5):
        t = TransitionTensor(spec, data.rows[b])
        pi = stationary(lift(t))
        for l in range(4):
            hist = data.sequences[b, 12 - l:] if l else []
            got = conditional_batch(data.rows[b:b + 1], data.pis[b:b + 1], data.sequences[b:b + 1], l, 3, 4)[0]
            np.testing.assert_allclose(got, conditional(t, pi, hist), atol=1e-10)


def test_conditional_degenerate_history():
    # every row emits token 0, so token 2 never appears and has zero stationary mass
    t = TransitionTensor(NGramSpec(3, 3, 1.0), np.tile([1.0, 0.0, 0.0], (9, 1)))
    with pytest.raises(DegenerateHistory):
        conditional(t, stationary(lift(t)), [2])


def test_conditional_rejects_long_history():
    t = sample_lm(NGramSpec(3, 2), make_rng(0))
    with pytest.raises(ValueError):
        conditional(t, stationary(lift(t)), [0, 1])


# ---- ce_loss ----------------------------------------------------------------------

def test_ce_examples():
    assert ce_loss_vs_truth([0, 1, 0], [0, 1, 0]) == 0
    assert abs(ce_loss_vs_truth(np.full(5, 0.2), [0.1, 0.2, 0.3, 0.4, 0.0]) - np.log(5)) < 1e-12
    assert abs(ce_loss_vs_truth([0.5, 0.5], [1, 0]) - np.log(2)) < 1e-12


def test_ce_floor():
    assert abs(ce_loss_vs_truth([0.0, 1.0], [1.0, 0.0]) + np.log(1e-12)) < 1e-9


@given(st.lists(st.floats(0.01, 1), min_size=2, max_size=6), st.integers(0, 2 ** 31))
@settings(max_examples=50, deadline=None)
def test_ce_at_least_entropy(w, seed):
    truth = np.array(w) / np.sum(w)
    pred = make_rng(seed).dirichlet(np.ones(len(w)))
    assert ce_loss_vs_truth(pred, truth) >= ce_loss_vs_truth(truth, truth) - 1e-12
