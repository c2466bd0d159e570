import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maskdiff.analysis import (
    count_dependencies,
    count_separators,
    dependencies_batch,
    estimate_distinct_reveal_prob,
    estimate_expected_dep,
    estimate_multi_reveal_prob,
    generative_perplexity,
    kl_factorized_check,
    lemma_c8_bound,
    lemma_d1_bound,
    log2_perplexity,
    sequence_error_rate,
    trajectory_dependencies,
)
from maskdiff.diffusion import (
    TrajectoryRecord,
    ar_sample_batch,
    custom_schedule,
    draw_reveal_steps,
    l2r_mdm_sample,
    linear_schedule,
    mdm_sample_batch,
)
from maskdiff.errors import InfiniteDivergenceError, InputError, UndefinedPerplexityError
from maskdiff.formal_lang import MASK, NGramModel, exact_entropy_ngram, gen_hmm, gen_ngram, sample_batch
from maskdiff.rng import make_rng
from maskdiff.stats import within_sigma
from oracles import dependencies_by_definition, kl_enumerated, prob_all_distinct, separators_by_definition

# ------------------------------------------------------------------ metrics


def test_perplexity_of_uniform_model(rng):
    m = NGramModel(2, 8, np.full((8, 8), 1 / 8), np.full(8, 1 / 8))
    est = generative_perplexity(m, sample_batch(m, 20, 50, rng))
    assert est.value == pytest.approx(8.0) and est.ci_half_width == pytest.approx(0.0, abs=1e-12)


def test_ar_perplexity_matches_exact_entropy(rng):
    m = gen_ngram(2, 8, 2.0, 0.0, 3)
    L = 128
    x = ar_sample_batch(m, L, 2000, rng).tokens
    est = generative_perplexity(m, x)
    assert abs(est.value - 2 ** exact_entropy_ngram(m, L)) <= est.ci_half_width
    bits = log2_perplexity(m, x)
    assert math.log2(est.value) == pytest.approx(bits.value)


def test_perplexity_undefined_off_support():
    m = gen_ngram(2, 8, 2.0, 0.008, 0)
    a, b = map(int, np.argwhere(m.transitions == 0)[0])
    with pytest.raises(UndefinedPerplexityError, match="sequence 1"):
        generative_perplexity(m, [[0, 0], [a, b]])


def test_ser_exact_fraction(rng):
    m = gen_ngram(2, 8, 2.0, 0.008, 0)
    a, b = map(int, np.argwhere(m.transitions == 0)[0])
    x = ar_sample_batch(m, 12, 10, rng).tokens
    x[:3, 5], x[:3, 6] = a, b
    assert sequence_error_rate(m, x).value == 0.3


@pytest.mark.parametrize("model", [gen_ngram(2, 8, 2.0, 0.008, 0), gen_ngram(3, 8, 2.0, 0.008, 0),
                                   gen_hmm(32, 8, 3.2, 0.003, 0)], ids=["2gram", "3gram", "hmm"])
def test_ar_has_zero_ser(model, rng):
    x = ar_sample_batch(model, 32, 10_000, rng).tokens
    assert sequence_error_rate(model, x).value == 0.0


def test_ser_input_checks():
    m = gen_ngram(2, 4, 1.0, 0.0, 0)
    with pytest.raises(InputError):
        sequence_error_rate(m, [[0, MASK, 1]])
    with pytest.raises(InputError):
        sequence_error_rate(m, np.zeros((0, 3), dtype=int))


# ------------------------------------------------------------ combinatorics


def test_separator_examples():
    assert count_separators({2, 3, 4, 6, 7}, 4, 10) == 1
    assert count_separators(set(), 3, 10) == 0
    assert count_separators(range(6), 4, 10) == 2


def test_figure_example():
    assert count_dependencies({1, 5, 9}, {2, 3, 4, 6, 7}, 4, 10) == 1
    # same configuration with positions shifted to start at 0
    assert count_dependencies({0, 4, 8}, {1, 2, 3, 5, 6}, 4, 10) == 1
    assert count_dependencies({7}, {1, 2}, 2, 10) == 0


def test_overlap_rejected():
    with pytest.raises(InputError):
        count_dependencies({1, 2}, {2}, 2, 5)


def random_split(rng, L):
    lab = rng.integers(0, 3, L)
    return np.flatnonzero(lab == 0), np.flatnonzero(lab == 1)


def test_dependencies_match_definition_200_cases():
    rng = make_rng(7)
    for _ in range(200):
        L = int(rng.integers(1, 25))
        n = int(rng.integers(2, 6))
        new, prev = random_split(rng, L)
        assert count_dependencies(new, prev, n, L) == dependencies_by_definition(new, prev, n, L)
        assert count_separators(prev, n, L) == len(separators_by_definition(prev, n, L))


@given(st.lists(st.integers(0, 2), min_size=1, max_size=40), st.integers(2, 5))
def test_dependencies_pure_and_in_range(labels, n):
    lab = np.array(labels)
    new, prev = np.flatnonzero(lab == 0), np.flatnonzero(lab == 1)
    L = lab.size
    d = count_dependencies(new, prev, n, L)
    assert d == count_dependencies(list(new), list(prev), n, L)
    assert 0 <= d <= max(new.size - 1, 0)
    assert d == dependencies_by_definition(new, prev, n, L)


@given(st.integers(1, 6), st.integers(2, 4), st.integers(1, 30), st.integers(0, 2**31))
def test_vectorized_dependencies(N, n, L, seed):
    R = draw_reveal_steps(linear_schedule(N), (20, L), make_rng(seed))
    for k in range(1, N + 1):
        ref = [count_dependencies(np.flatnonzero(r == k), np.flatnonzero(r < k), n, L) for r in R]
        assert np.array_equal(dependencies_batch(R, k, n), ref)


def test_trajectory_dependencies(rng):
    assert trajectory_dependencies([range(12)], 3, 12) == 11
    _, rec = l2r_mdm_sample(gen_ngram(2, 3, 1.0, 0.0, 0), 9, rng)
    assert trajectory_dependencies(rec, 2, 9) == 0
    res = mdm_sample_batch(gen_ngram(2, 3, 1.0, 0.0, 0), 20, linear_schedule(4), 5, rng)
    for b in range(5):
        rec = res.trajectory(b)
        prev, total = [], 0
        for s in rec.reveal_sets:
            total += count_dependencies(s, prev, 3, 20)
            prev += s.tolist()
        assert trajectory_dependencies(rec, 3, 20) == total
    with pytest.raises(InputError):
        trajectory_dependencies(TrajectoryRecord([np.array([0, 1]), np.array([1])], 2), 2, 3)


# ------------------------------------------------------------ factorization


def test_kl_product_is_zero(rng):
    p = rng.dirichlet(np.ones(3), size=2)
    r = kl_factorized_check(np.outer(p[0], p[1]), p)
    assert r.kl == pytest.approx(0.0, abs=1e-12) and r.holds


def test_kl_single_factor(rng):
    q, p = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
    r = kl_factorized_check(q, [p])
    assert r.kl == pytest.approx(r.bound) and r.holds


def test_kl_random_pairs():
    rng = make_rng(11)
    for _ in range(1000):
        q = rng.dirichlet(np.full(9, 0.3)).reshape(3, 3)
        p = rng.dirichlet(np.ones(3), size=2)
        r = kl_factorized_check(q, p)
        assert r.holds
        assert r.kl == pytest.approx(kl_enumerated(q, p), rel=1e-9, abs=1e-12)


def test_kl_infinite():
    with pytest.raises(InfiniteDivergenceError):
        kl_factorized_check(np.full((2, 2), 0.25), [[1.0, 0.0], [0.5, 0.5]])


# ---------------------------------------------------------- bounds and MC


def test_expected_dep_under_bound(rng):
    e = estimate_expected_dep(linear_schedule(32), 512, 2, 10_000, rng)
    assert e.violations().size == 0
    assert np.isfinite(e.bound).sum() == 31  # step 1 has nothing before it


def test_expected_dep_first_step(rng):
    L, s = 64, custom_schedule([0.05, 0.0, 0.95])
    e = estimate_expected_dep(s, L, 2, 20_000, rng)
    d = 0.05
    exact = L * d - 1 + (1 - d) ** L  # E[max(X - 1, 0)] for X ~ Bin(L, d)
    assert abs(e.mean[0] - exact) <= 3 * e.estimates[0].sigma
    assert e.mean[1] == 0.0


def test_lemma_c8_bound_values():
    b = lemma_c8_bound(linear_schedule(4), 8, 2)
    assert np.isinf(b[0])
    assert b[1] == pytest.approx(9 / 5 + 24 * 8 / 16 / 0.25)
    assert np.isnan(lemma_c8_bound(linear_schedule(100), 8, 2)).all()


def test_multi_reveal(rng):
    assert estimate_multi_reveal_prob(linear_schedule(5), 1, 100, rng).estimate.value == 0.0
    assert estimate_multi_reveal_prob(linear_schedule(1), 4, 100, rng).estimate.value == 1.0
    s = linear_schedule(1000)
    est, bound = estimate_multi_reveal_prob(s, 10, 50_000, rng)
    assert bound == pytest.approx(0.045)
    assert est.value <= bound + 3 * est.sigma
    exact = 1 - math.prod(1 - j / 1000 for j in range(10))
    assert within_sigma(est.value, exact, 50_000)
    assert lemma_d1_bound(s, 10) == bound


@pytest.mark.parametrize("N,l", [(4, 2), (6, 3), (10, 5)])
def test_distinct_reveal(N, l, rng):
    s = linear_schedule(N)
    est, bound = estimate_distinct_reveal_prob(s, l, 40_000, rng)
    assert within_sigma(est.value, prob_all_distinct(s.deltas, l), 40_000)
    assert bound == 1 - 1 / N
