import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subgram.estimators import (
    EmptyMatchSet, EstimatorKind, estimator_ce, kgram_predict, kgram_predict_batch, match_positions, subset_predict,
)
from subgram.seqmodel import (
    NGramSpec, TransitionTensor, conditional, entropy, lift, make_rng, sample_lm, sample_sequence,
    sample_task_batch, stationary,
)


def naive_kgram(seq, k, S):
    """Double loop over 1-based positions l in [k, T], comparing histories token by token."""
    T = len(seq)
    counts = [0] * S
    for l in range(k, T + 1):
        same = True
        for j in range(1, k):
            if seq[l - j - 1] != seq[T - j]:
                same = False
                break
        if same:
            counts[seq[l - 1]] += 1
    tot = sum(counts)
    return None if tot == 0 else np.array(counts) / tot


def naive_subset(seq, lags, S):
    T = len(seq)
    counts = [0] * S
    for i in range(T):
        if all(i - h >= 0 and seq[i - h] == seq[T - h] for h in lags):
            counts[seq[i]] += 1
    tot = sum(counts)
    return None if tot == 0 else np.array(counts) / tot


# ---- examples ----------------------------------------------------------------------

def test_kgram_examples():
    np.testing.assert_array_equal(kgram_predict([0, 0, 0, 0], 1, 3), [1, 0, 0])
    np.testing.assert_array_equal(kgram_predict([0, 1, 0, 1, 0], 2, 2), [0, 1])
    np.testing.assert_allclose(kgram_predict([0, 1, 1], 1, 2), [1 / 3, 2 / 3], atol=1e-15)
    np.testing.assert_array_equal(match_positions([0, 1, 0, 1, 0], 2), [1, 3])


def test_subset_example():
    np.testing.assert_array_equal(subset_predict([0, 1, 0, 0, 1, 0], [2], 2), [1, 0])


@given(st.lists(st.integers(0, 2), min_size=3, max_size=20))
@settings(max_examples=200, deadline=None)
def test_subset_contiguous_special_cases(seq):
    for lags, k in (([1], 2), ([1, 2], 3)):
        if len(seq) <= max(lags):
            continue
        try:
            want = kgram_predict(seq, k, 3)
        except EmptyMatchSet:
            with pytest.raises(EmptyMatchSet):
                subset_predict(seq, lags, 3)
            continue
        np.testing.assert_array_equal(subset_predict(seq, lags, 3), want)


def test_empty_match_set_and_backoff():
    seq = [0, 1, 2]
    with pytest.raises(EmptyMatchSet):
        kgram_predict(seq, 2, 3)
    np.testing.assert_allclose(kgram_predict(seq, 2, 3, backoff=True), [1 / 3] * 3)
    with pytest.raises(EmptyMatchSet):
        subset_predict(seq, [1], 3)
    np.testing.assert_allclose(subset_predict(seq, [1], 3, backoff=True), [1 / 3] * 3)


def test_backoff_bottoms_out_at_uniform():
    # k-1 > T leaves every order empty except the unigram, which always matches
    np.testing.assert_array_equal(kgram_predict([1], 4, 2, backoff=True), [0, 1])


def test_subset_rejects_long_lag():
    with pytest.raises(ValueError):
        subset_predict([0, 1, 0], [3], 2)


@pytest.mark.parametrize("kw", [dict(variant="kgram", k=0), dict(variant="subset", lags=(1, 1)),
                                dict(variant="subset", lags=(0,)), dict(variant="other")])
def test_kind_validation(kw):
    with pytest.raises(ValueError):
        EstimatorKind(**kw)


def test_kind_label_and_sorting():
    assert EstimatorKind.subset([3, 1]).lags == (1, 3)
    assert EstimatorKind.subset([3, 1]).label == "{1,3}"
    assert EstimatorKind.kgram(2).label == "2"


# ---- oracle properties -------------------------------------------------------------

def test_kgram_matches_naive_oracle_10k():
    rng = make_rng(0, "naive")
    for _ in range(10_000):
        S = int(rng.integers(2, 4))
        T = int(rng.integers(1, 12))
        k = int(rng.integers(1, 5))
        seq = rng.integers(0, S, T)
        want = naive_kgram(list(seq), k, S)
        if want is None:
            with pytest.raises(EmptyMatchSet):
                kgram_predict(seq, k, S)
        else:
            np.testing.assert_array_equal(kgram_predict(seq, k, S), want)


@given(st.lists(st.integers(0, 2), min_size=2, max_size=15), st.sets(st.integers(1, 4), min_size=1, max_size=3))
@settings(max_examples=300, deadline=None)
def test_subset_matches_naive_oracle(seq, lags):
    if max(lags) >= len(seq):
        return
    want = naive_subset(seq, lags, 3)
    if want is None:
        with pytest.raises(EmptyMatchSet):
            subset_predict(seq, lags, 3)
    else:
        np.testing.assert_array_equal(subset_predict(seq, lags, 3), want)


@given(st.lists(st.integers(0, 3), min_size=1, max_size=20), st.integers(1, 5))
@settings(max_examples=300, deadline=None)
def test_output_on_simplex_and_batch_agrees(seq, k):
    p = kgram_predict(seq, k, 4, backoff=True)
    assert abs(p.sum() - 1) <= 1e-12 and np.all(p >= 0)
    np.testing.assert_array_equal(kgram_predict_batch(np.array([seq]), k, 4)[0], p)


@given(st.lists(st.integers(0, 2), min_size=1, max_size=20), st.integers(2, 5))
@settings(max_examples=300, deadline=None)
def test_match_sets_are_nested(seq, k):
    assert set(match_positions(seq, k)) <= set(match_positions(seq, k - 1))


def test_batch_without_backoff_raises():
    with pytest.raises(EmptyMatchSet):
        kgram_predict_batch(np.array([[0, 1, 2]]), 2, 3, backoff=False)


def test_consistency_tv_decreases_with_T():
    spec = NGramSpec(3, 2, 1.0)
    rng = make_rng(1, "consistency")
    medians = []
    for T in (64, 256, 1024):
        tv = []
        for _ in range(200):
            t = sample_lm(spec, rng)
            pi = stationary(lift(t))
            seq = sample_sequence(t, pi, T, rng)
            p = kgram_predict(seq, 2, 3, backoff=True)
            tv.append(0.5 * np.abs(p - conditional(t, pi, seq[-1:])).sum())
        medians.append(np.median(tv))
    assert medians[0] > medians[1] > medians[2]


# ---- estimator_ce ------------------------------------------------------------------

def test_estimator_ce_consistency_long_sequences():
    spec = NGramSpec(2, 2, 1.0)
    data = sample_task_batch(spec, 4096, 200, make_rng(2, "ce"))
    ce, _ = estimator_ce(EstimatorKind.kgram(2), data.sequences, data.truth, 2)
    h = np.mean([entropy(q) for q in data.truth])
    assert abs(ce - h) <= 0.01


def test_estimator_ce_uniform_source():
    S, T, B = 4, 256, 200
    rows = np.full((S, S), 1.0 / S)
    t = TransitionTensor(NGramSpec(S, 2, 1.0), rows)
    pi = stationary(lift(t))
    rng = make_rng(3)
    seqs = np.stack([sample_sequence(t, pi, T, rng) for _ in range(B)])
    ce, se = estimator_ce(EstimatorKind.kgram(1), seqs, np.full((B, S), 1.0 / S), S)
    assert abs(ce - np.log(S)) <= 0.01 and se > 0


def test_estimator_ce_deterministic_source():
    # cyclic permutation source: the bigram estimator is exact once every history has been seen
    S = 3
    rows = np.roll(np.eye(S), 1, axis=1)
    t = TransitionTensor(NGramSpec(S, 2, 1.0), rows)
    pi = stationary(lift(t))
    rng = make_rng(4)
    seqs = np.stack([sample_sequence(t, pi, 64, rng) for _ in range(20)])
    truths = rows[seqs[:, -1]]
    ce, _ = estimator_ce(EstimatorKind.kgram(2), seqs, truths, S)
    assert ce <= 1e-12


def test_estimator_ce_subset_kind_and_empty_batch():
    data = sample_task_batch(NGramSpec(3, 3, 0.5), 16, 30, make_rng(5))
    a, _ = estimator_ce(EstimatorKind.subset([1, 2]), data.sequences, data.truth, 3)
    b, _ = estimator_ce(EstimatorKind.kgram(3), data.sequences, data.truth, 3)
    assert abs(a - b) <= 1e-12
    with pytest.raises(ValueError):
        estimator_ce(EstimatorKind.kgram(1), np.zeros((0, 4), dtype=int), np.zeros((0, 3)), 3)
    with pytest.raises(EmptyMatchSet):
        estimator_ce(EstimatorKind.kgram(3, backoff=False), np.array([[0, 1, 2]]), np.full((1, 3), 1 / 3), 3)
