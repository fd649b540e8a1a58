import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subgram.estimators import kgram_predict
from subgram.transformer import (
    LengthMismatch, ModelConfig, ModelParams, embed, forward, forward_batch, lag_mass, masked_softmax, predict,
    predict_batch,
)


def random_params(cfg, rng, scale=1.0):
    D = cfg.D1
    return ModelParams(cfg, rng.normal(0, scale, (cfg.m, cfg.T_max, cfg.T_max)),
                       rng.normal(0, scale, (cfg.m, cfg.d, cfg.d)), rng.normal(0, scale, (D, D)),
                       rng.normal(0, scale, (D, D)))


# ---- config and params ---------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(S=1), dict(S=3, d=2), dict(S=3, m=0), dict(S=3, T_max=1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_params_shape_validation():
    cfg = ModelConfig(S=3, m=2, T_max=4)
    p = ModelParams.zeros(cfg)
    with pytest.raises(ValueError):
        ModelParams(cfg, p.A1[:1], p.V1, p.K2, p.Q2)
    with pytest.raises(ValueError):
        ModelParams(cfg, p.A1, p.V1, p.K2 * np.nan, p.Q2)


def test_params_json_roundtrip(tmp_path):
    cfg = ModelConfig(S=3, m=2, T_max=5, d=4, embed_seed=3)
    p = random_params(cfg, np.random.default_rng(0))
    p.save(tmp_path / "p.json")
    q = ModelParams.load(tmp_path / "p.json")
    assert q.config == cfg
    for name in ModelParams.GROUPS:
        np.testing.assert_array_equal(getattr(p, name), getattr(q, name))


# ---- embed ---------------------------------------------------------------------

def test_embed_one_hot_example():
    np.testing.assert_array_equal(embed([0, 2], ModelConfig(S=3)), [[1, 0, 0], [0, 0, 1]])


def test_embed_orthonormal_when_wider():
    cfg = ModelConfig(S=4, d=7, embed_seed=5)
    E = embed(np.arange(4), cfg)
    assert E.shape == (4, 7)
    assert np.max(np.abs(E @ E.T - np.eye(4))) <= 1e-12


def test_embed_rejects_bad_token():
    with pytest.raises(ValueError):
        embed([3], ModelConfig(S=3))


# ---- masked_softmax ------------------------------------------------------------

def test_masked_softmax_zero_logits():
    a = masked_softmax(np.zeros((5, 5)))
    for i in range(5):
        np.testing.assert_allclose(a[i, :i + 1], 1 / (i + 1), atol=1e-15)
        assert np.all(a[i, i + 1:] == 0)


def test_masked_softmax_examples():
    np.testing.assert_allclose(masked_softmax(np.zeros((2, 2)))[1], [0.5, 0.5])
    x = np.zeros((6, 6))
    np.fill_diagonal(x, 100.0)
    a = masked_softmax(x)
    for i in range(6):
        assert a[i, i] >= 1 - i * np.exp(-100)


def test_masked_softmax_stable_for_large_logits():
    a = masked_softmax(np.full((3, 3), 1e4))
    assert np.all(np.isfinite(a))
    np.testing.assert_allclose(a.sum(axis=1), 1)


# ---- forward -------------------------------------------------------------------

@given(st.lists(st.integers(0, 3), min_size=1, max_size=8))
@settings(max_examples=100, deadline=None)
def test_zero_params_is_unigram(seq):
    p = ModelParams.zeros(ModelConfig(S=4, m=2, T_max=8))
    assert np.max(np.abs(predict(p, seq) - kgram_predict(seq, 1, 4))) <= 1e-12


def test_zero_params_attention_uniform():
    tr = forward(ModelParams.zeros(ModelConfig(S=3, m=2, T_max=6)), [0, 1, 2, 0, 1])
    np.testing.assert_allclose(tr.a2[0, 0], 0.2)
    np.testing.assert_allclose(tr.a1[1, 3, :4], 0.25)


def test_single_token_sequence():
    rng = np.random.default_rng(1)
    p = random_params(ModelConfig(S=3, m=2, T_max=4), rng)
    np.testing.assert_array_equal(predict(p, [2]), [0, 0, 1])


@given(st.integers(0, 2 ** 31), st.integers(1, 8))
@settings(max_examples=50, deadline=None)
def test_trace_invariants(seed, T):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(S=3, m=2, T_max=8)
    p = random_params(cfg, rng)
    seq = rng.integers(0, 3, T)
    tr = forward(p, seq)
    np.testing.assert_allclose(tr.a1.sum(axis=2), 1, atol=1e-12)
    assert np.all(np.triu(tr.a1, 1) == 0)
    assert abs(tr.a2.sum() - 1) <= 1e-12
    assert abs(tr.p_out.sum() - 1) <= 1e-12 and np.all(tr.p_out >= 0)
    np.testing.assert_array_equal(tr.r1[0, :, :3], tr.r0[0])
    # p_out is the a2-weighted mix of the token indicators
    np.testing.assert_allclose(tr.p_out[0, 0], tr.a2[0, 0] @ np.eye(3)[seq], atol=1e-15)


@given(st.integers(0, 2 ** 31))
@settings(max_examples=30, deadline=None)
def test_causality(seed):
    """Changing a later token never changes the predictions at earlier queries."""
    rng = np.random.default_rng(seed)
    p = random_params(ModelConfig(S=3, m=2, T_max=7), rng)
    seq = rng.integers(0, 3, 7)
    alt = seq.copy()
    alt[5] = (alt[5] + 1) % 3
    q = list(range(5))
    a = forward_batch(p, seq[None], q)
    b = forward_batch(p, alt[None], q)
    np.testing.assert_array_equal(a.p_out, b.p_out)
    for qi, t in enumerate(q):
        assert np.all(a.a2[0, qi, t + 1:] == 0)


@given(st.integers(0, 2 ** 31), st.permutations(range(3)))
@settings(max_examples=30, deadline=None)
def test_alphabet_equivariance(seed, perm):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(S=3, m=2, T_max=6)
    p = random_params(cfg, rng)
    seq = rng.integers(0, 3, 6)
    perm = np.array(perm)
    P = np.eye(3)[perm].T  # P e_s = e_{perm[s]}
    Pb = np.kron(np.eye(cfg.m + 1), P)
    q = ModelParams(cfg, p.A1, np.stack([P @ v @ P.T for v in p.V1]), Pb @ p.K2 @ Pb.T, Pb @ p.Q2 @ Pb.T)
    np.testing.assert_allclose(predict(q, perm[seq]), P @ predict(p, seq), atol=1e-12)


def test_predict_batch_matches_forward():
    rng = np.random.default_rng(4)
    cfg = ModelConfig(S=4, m=3, T_max=10, d=6)
    p = random_params(cfg, rng, 0.7)
    seqs = rng.integers(0, 4, (50, 10))
    full = forward_batch(p, seqs).p_out[:, -1]
    np.testing.assert_allclose(predict_batch(p, seqs, chunk=7), full, atol=1e-12)


def test_multiple_queries_match_prefix_forwards():
    rng = np.random.default_rng(5)
    p = random_params(ModelConfig(S=3, m=2, T_max=6), rng)
    seq = rng.integers(0, 3, 6)
    tr = forward_batch(p, seq[None], [2, 4, 5])
    for qi, t in enumerate([2, 4, 5]):
        np.testing.assert_allclose(tr.p_out[0, qi], predict(p, seq[:t + 1]), atol=1e-12)


def test_forward_input_errors():
    cfg = ModelConfig(S=3, m=1, T_max=4)
    p = ModelParams.zeros(cfg)
    with pytest.raises(ValueError):
        forward(p, [0] * 5)
    with pytest.raises(ValueError):
        forward(p, [0, 3])
    q = p.copy()
    q.fixed_length = 3
    with pytest.raises(LengthMismatch):
        forward(q, [0, 1])
    with pytest.raises(LengthMismatch):
        predict_batch(q, [[0, 1]])


def test_unused_a1_entries_are_ignored():
    rng = np.random.default_rng(6)
    p = random_params(ModelConfig(S=3, m=2, T_max=8), rng)
    q = p.copy()
    q.A1[:, 5:, :] += 50.0
    q.A1[:, :, 5:] -= 50.0
    seq = rng.integers(0, 3, 5)
    np.testing.assert_array_equal(predict(p, seq), predict(q, seq))


def test_lag_mass():
    a = masked_softmax(np.zeros((1, 4, 4)))
    lm = lag_mass(a, 2)
    np.testing.assert_allclose(lm[0, 0], np.mean([1, 1 / 2, 1 / 3, 1 / 4]))
    np.testing.assert_allclose(lm[0, 2], np.mean([1 / 3, 1 / 4]))
