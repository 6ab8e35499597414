import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from spot.errors import EmptyRunListError, InvalidInputError, ShapeMismatchError, ZeroNormError
from spot.prompt import (
    Prompt,
    SimilarityMetric,
    TaskEmbedding,
    cosine,
    cross_run_similarity,
    mean_pool,
    sim_avg_tokens,
    sim_per_token,
    similarity,
)


def emb(tokens, **kw):
    return TaskEmbedding(np.asarray(tokens, dtype=float), **kw)


# --- mean_pool ---------------------------------------------------------------


def test_mean_pool_small():
    assert mean_pool(Prompt([[1, 0], [3, 2]])).tolist() == [2.0, 1.0]


def test_mean_pool_single_row_is_identity():
    row = [0.25, -1.5, 3.0]
    assert mean_pool(Prompt([row])).tolist() == row


def test_mean_pool_matches_loop_oracle(rng):
    m = rng.normal(size=(4, 3))
    np.testing.assert_allclose(mean_pool(Prompt(m)), oracles.column_means(m.tolist()), atol=1e-12, rtol=0)


# --- cosine ------------------------------------------------------------------


def test_cosine_basic_cases():
    assert cosine([1, 2], [1, 2]) == pytest.approx(1.0, abs=1e-15)
    assert cosine([1, 0], [0, 1]) == 0.0
    assert cosine([1, 2, 3], [4, 5, 6]) == pytest.approx(oracles.cosine([1, 2, 3], [4, 5, 6]), abs=1e-12)


def test_cosine_zero_vector():
    with pytest.raises(ZeroNormError):
        cosine([0, 0], [1, 2])


def test_cosine_is_clamped():
    v = [1e-3, 1e-3, 1e-3]
    assert -1.0 <= cosine(v, v) <= 1.0
    assert cosine([1.0, 0.0], [-1.0, 0.0]) == -1.0


# --- avg tokens --------------------------------------------------------------


def test_avg_tokens_identical_and_scaled(rng):
    e = emb(rng.normal(size=(3, 4)))
    assert sim_avg_tokens(e, e) == pytest.approx(1.0, abs=1e-12)
    assert sim_avg_tokens(e, emb(2.5 * e.tokens)) == pytest.approx(1.0, abs=1e-12)


def test_avg_tokens_matches_oracle(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert sim_avg_tokens(emb(a), emb(b)) == pytest.approx(oracles.sim_avg_tokens(a.tolist(), b.tolist()), abs=1e-12)


def test_avg_tokens_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        sim_avg_tokens(emb(np.ones((2, 3))), emb(np.ones((3, 3))))


def test_avg_tokens_zero_pool():
    with pytest.raises(ZeroNormError):
        sim_avg_tokens(emb([[1, 1], [-1, -1]]), emb([[1, 0], [0, 1]]))


# --- per token ---------------------------------------------------------------


def test_per_token_single_row_is_cosine():
    a, b = [[1.0, 2.0, -1.0]], [[0.5, -2.0, 4.0]]
    assert sim_per_token(emb(a), emb(b)) == pytest.approx(cosine(a[0], b[0]), abs=1e-15)


def test_per_token_orthonormal_self():
    e = emb([[1, 0], [0, 1]])
    assert sim_per_token(e, e) == pytest.approx(0.5, abs=1e-15)


def test_per_token_matches_double_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert sim_per_token(emb(a), emb(b)) == pytest.approx(oracles.sim_per_token(a.tolist(), b.tolist()), abs=1e-12)


def test_per_token_zero_row_names_index():
    a = np.ones((3, 2))
    a[1] = 0
    with pytest.raises(ZeroNormError) as info:
        sim_per_token(emb(np.ones((3, 2))), emb(a))
    assert info.value.row == 1
    assert "row 1" in str(info.value)


# --- cross run ---------------------------------------------------------------


def test_cross_run_single_pair_equals_metric(rng):
    a, b = emb(rng.normal(size=(2, 3))), emb(rng.normal(size=(2, 3)))
    for metric in SimilarityMetric:
        assert cross_run_similarity([a], [b], metric) == similarity(a, b, metric)


def test_cross_run_identical_runs():
    e = emb([[1.0, 2.0], [3.0, -1.0]])
    assert cross_run_similarity([e] * 3, [e] * 3, SimilarityMetric.AVG_TOKENS) == pytest.approx(1.0, abs=1e-12)


def test_cross_run_nine_combinations(rng):
    r1 = [rng.normal(size=(3, 4)) for _ in range(3)]
    r2 = [rng.normal(size=(3, 4)) for _ in range(3)]
    expected = sum(oracles.sim_per_token(a.tolist(), b.tolist()) for a in r1 for b in r2) / 9
    got = cross_run_similarity([emb(a) for a in r1], [emb(b) for b in r2], "per-token")
    assert got == pytest.approx(expected, abs=1e-12)


def test_cross_run_empty():
    with pytest.raises(EmptyRunListError):
        cross_run_similarity([], [emb([[1.0]])], "avg")


def test_cross_run_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        cross_run_similarity([emb(np.ones((2, 2)))], [emb(np.ones((3, 2)))], "avg")


# --- types -------------------------------------------------------------------


@pytest.mark.parametrize("bad", [np.zeros((0, 3)), np.zeros((2, 0)), np.zeros(3), [[1.0, np.nan]], [[np.inf]]])
def test_prompt_rejects_invalid(bad):
    with pytest.raises(InvalidInputError):
        Prompt(bad)


def test_prompt_is_immutable():
    p = Prompt([[1.0, 2.0]])
    with pytest.raises(ValueError):
        p.tokens[0, 0] = 5.0
    src = np.array([[1.0, 2.0]])
    q = Prompt(src)
    src[0, 0] = 9.0
    assert q.tokens[0, 0] == 1.0


def test_metric_parse():
    assert SimilarityMetric.parse("avg") is SimilarityMetric.AVG_TOKENS
    assert SimilarityMetric.parse("per_token") is SimilarityMetric.PER_TOKEN
    with pytest.raises(InvalidInputError):
        SimilarityMetric.parse("euclid")


# --- properties --------------------------------------------------------------

dims = st.tuples(st.integers(1, 8), st.integers(1, 8))
finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False).filter(lambda x: abs(x) > 1e-3)


@st.composite
def embedding_pairs(draw):
    L, E = draw(dims)
    a = draw(arrays(np.float64, (L, E), elements=finite))
    b = draw(arrays(np.float64, (L, E), elements=finite))
    return a, b


def _pooled_ok(m):
    return np.linalg.norm(m.mean(axis=0)) > 1e-6


@settings(max_examples=60, deadline=None)
@given(embedding_pairs())
def test_symmetry_and_range(pair):
    a, b = pair
    ea, eb = emb(a), emb(b)
    s1, s2 = sim_per_token(ea, eb), sim_per_token(eb, ea)
    assert s1 == s2
    assert -1.0 <= s1 <= 1.0
    if _pooled_ok(a) and _pooled_ok(b):
        t1, t2 = sim_avg_tokens(ea, eb), sim_avg_tokens(eb, ea)
        assert t1 == t2
        assert -1.0 <= t1 <= 1.0


@settings(max_examples=60, deadline=None)
@given(embedding_pairs(), st.floats(0.01, 100), st.data())
def test_scale_invariance(pair, c, data):
    a, b = pair
    if _pooled_ok(a) and _pooled_ok(b):
        assert abs(sim_avg_tokens(emb(c * a), emb(b)) - sim_avg_tokens(emb(a), emb(b))) < 1e-9
    row = data.draw(st.integers(0, a.shape[0] - 1))
    scaled = a.copy()
    scaled[row] *= c
    assert abs(sim_per_token(emb(scaled), emb(b)) - sim_per_token(emb(a), emb(b))) < 1e-9


@settings(max_examples=60, deadline=None)
@given(embedding_pairs(), st.randoms(use_true_random=False))
def test_row_permutation_invariance(pair, rnd):
    a, b = pair
    perm = list(range(a.shape[0]))
    rnd.shuffle(perm)
    assert abs(sim_per_token(emb(a[perm]), emb(b)) - sim_per_token(emb(a), emb(b))) < 1e-12
    if _pooled_ok(a) and _pooled_ok(b):
        assert abs(sim_avg_tokens(emb(a[perm]), emb(b)) - sim_avg_tokens(emb(a), emb(b))) < 1e-12
