import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maskdiff.diffusion import draw_reveal_steps, linear_schedule
from maskdiff.errors import CapacityError, InputError
from maskdiff.formal_lang import MASK, NGramModel, ar_conditional, gen_hmm, gen_ngram, log_prob2_batch, sample_sequence
from maskdiff.oracle import (
    ChainOracle,
    HmmOracle,
    MaskedSequence,
    embed_ngram_as_hmm,
    make_oracle,
    nearest_left,
    nearest_right,
    posterior_marginals,
    posterior_marginals_brute,
)
from maskdiff.rng import make_rng
from oracles import brute_marginals, hmm_seq_prob, ngram_seq_prob


def random_mask(x, rng, p=0.5):
    s = np.array(x)
    s[rng.random(s.size) < p] = MASK
    return s


def test_embedding_shapes():
    m2 = gen_ngram(2, 5, 1.0, 0.0, 0)
    h2 = embed_ngram_as_hmm(m2)
    assert h2.num_states == 5 and np.array_equal(h2.trans, m2.transitions)
    assert embed_ngram_as_hmm(gen_ngram(4, 8, 1.0, 0.0, 0)).num_states == 512
    with pytest.raises(CapacityError):
        embed_ngram_as_hmm(gen_ngram(4, 8, 1.0, 0.0, 0), state_cap=100)


def test_embedding_preserves_law(rng):
    m = gen_ngram(3, 4, 2.0, 0.05, 1)
    h = embed_ngram_as_hmm(m)
    assert h.num_states == 16
    x = rng.integers(0, 4, (100, 7))
    a, b = log_prob2_batch(m, x), log_prob2_batch(h, x)
    assert np.array_equal(np.isinf(a), np.isinf(b))
    fin = np.isfinite(a)
    assert np.allclose(a[fin], b[fin], atol=1e-10)


def test_fully_observed_and_fully_masked():
    m = NGramModel(2, 4, np.full((4, 4), 0.25), np.full(4, 0.25))
    assert posterior_marginals(m, [1, 2, 3]).entries == {}
    pm = posterior_marginals(m, MaskedSequence.all_masked(5))
    assert np.allclose(pm.as_array(), 0.25)


def test_length_and_vocab_checks():
    h = gen_hmm(2, 3, 1.0, 0.0, 0)
    with pytest.raises(InputError):
        posterior_marginals(h, [0, 5, MASK])
    with pytest.raises(InputError):
        MaskedSequence([0, -2])


def _check_against_enumeration(model, prob, V, trials, rng, max_len=7):
    worst = 0.0
    for _ in range(trials):
        L = int(rng.integers(1, max_len + 1))
        s = random_mask(rng.integers(0, V, L), rng, 0.6)
        if not (s == MASK).any():
            continue
        ref = brute_marginals(prob, list(s), V)
        pm = posterior_marginals(model, s)
        if ref is None:
            assert pm.degenerate
            assert np.allclose(pm.as_array(), 1.0 / V)
            continue
        assert not pm.degenerate
        for p, vec in ref.items():
            worst = max(worst, float(np.abs(pm.entries[p] - vec).max()))
    return worst


@pytest.mark.parametrize("seed", range(3))
def test_hmm_marginals_match_path_enumeration(seed):
    rng = make_rng(seed)
    h = gen_hmm(3, 3, 1.5, 0.1, seed)
    assert _check_against_enumeration(h, lambda x: hmm_seq_prob(h, x), 3, 40, rng, max_len=5) <= 1e-9


@pytest.mark.parametrize("n", [2, 3])
def test_ngram_marginals_match_enumeration(n):
    rng = make_rng(n)
    m = gen_ngram(n, 3, 2.0, 0.1, n)
    assert _check_against_enumeration(m, lambda x: ngram_seq_prob(m, x), 3, 60, rng) <= 1e-9


def test_brute_matches_engine_on_larger_cases(rng):
    for _ in range(40):
        h = gen_hmm(int(rng.integers(1, 6)), int(rng.integers(2, 5)), 1.0, 0.0, int(rng.integers(1 << 30)))
        x = sample_sequence(h, int(rng.integers(1, 9)), rng)
        s = random_mask(x, rng)
        a, b = posterior_marginals(h, s), posterior_marginals_brute(h, s)
        if a.entries:
            assert np.abs(a.as_array() - b.as_array()).max() <= 1e-9


def test_brute_single_slot_is_joint_slice():
    m = gen_ngram(2, 3, 2.0, 0.0, 7)
    pm = posterior_marginals_brute(m, [0, MASK, 2])
    col = m.transitions[0, :] * m.transitions[:, 2]
    assert np.allclose(pm.entries[1], col / col.sum(), atol=1e-15)
    assert abs(pm.entries[1].sum() - 1.0) < 1e-12


def test_brute_budget():
    with pytest.raises(CapacityError):
        posterior_marginals_brute(gen_ngram(2, 8, 1.0, 0.0, 0), [MASK] * 8, budget=1000)


def test_zero_evidence_is_flagged():
    m = gen_ngram(2, 8, 2.0, 0.008, 0)
    a, b = map(int, np.argwhere(m.transitions == 0)[0])
    s = [a, b, MASK, MASK]
    for pm in (posterior_marginals(m, s), posterior_marginals_brute(m, s),
               posterior_marginals(m, s, HmmOracle(m))):
        assert pm.degenerate
        assert np.allclose(pm.as_array(), 1.0 / 8)


@pytest.mark.parametrize("model", [gen_hmm(4, 3, 1.5, 0.0, 3), gen_ngram(3, 3, 1.5, 0.0, 3), gen_ngram(2, 4, 2.0, 0.0, 3)],
                         ids=["hmm", "3gram", "2gram"])
def test_prefix_marginal_is_ar_conditional(model, rng):
    L = 7
    for k in range(L):
        x = sample_sequence(model, L, rng)
        s = x.copy()
        s[k:] = MASK
        pm = posterior_marginals(model, s)
        assert np.allclose(pm.entries[k], ar_conditional(model, x[:k]), atol=1e-10)


def test_evidence_equals_completion_mass(rng):
    h = gen_hmm(3, 3, 1.5, 0.0, 5)
    for _ in range(20):
        s = random_mask(sample_sequence(h, 5, rng), rng)
        pos = np.flatnonzero(s == MASK)
        total = 0.0
        for fill in np.ndindex(*([3] * pos.size)):
            x = s.copy()
            x[pos] = fill
            total += hmm_seq_prob(h, x)
        assert HmmOracle(h).log2_evidence(s) == pytest.approx(np.log2(total), abs=1e-9)


@pytest.mark.parametrize("thres", [0.0, 0.1])
def test_chain_oracle_matches_forward_backward(thres, rng):
    m = gen_ngram(2, 4, 2.0, thres, 3)
    fast, ref = ChainOracle(m), HmmOracle(m)
    state = rng.integers(0, 4, (30, 12))
    state[rng.random(state.shape) < 0.6] = MASK
    rows, pos = np.nonzero(state == MASK)
    p1, d1 = fast.query(state, rows, pos)
    p2, d2 = ref.query(state, rows, pos)
    assert np.array_equal(d1, d2)
    assert np.abs(p1 - p2).max() < 1e-12


@pytest.mark.parametrize("thres", [0.0, 0.1])
def test_chain_plan_matches_chain_oracle(thres, rng):
    m = gen_ngram(2, 4, 2.0, thres, 5)
    oracle = ChainOracle(m)
    sch = linear_schedule(4)
    R = draw_reveal_steps(sch, (40, 10), rng)
    plan = oracle.plan(R)
    x = np.full(R.shape, MASK)
    for k in range(1, sch.num_steps + 1):
        b, i = np.nonzero(R == k)
        p1, d1 = plan.query(x, b, i)
        p2, d2 = oracle.query(x, b, i)
        assert np.array_equal(d1, d2)
        assert np.abs(p1 - p2).max() < 1e-12
        x[b, i] = rng.integers(0, 4, b.size)  # arbitrary tokens exercise the degenerate path
        plan.commit(x, b, i)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=30), st.integers(0, 6))
def test_nearest_left_right(vals, t):
    R = np.array([vals])
    thr = np.full_like(R, t)
    left, right = nearest_left(R, thr)[0], nearest_right(R, thr)[0]
    for i in range(len(vals)):
        lc = [j for j in range(i) if vals[j] < t]
        rc = [j for j in range(i + 1, len(vals)) if vals[j] < t]
        assert left[i] == (lc[-1] if lc else -1)
        assert right[i] == (rc[0] if rc else len(vals))


@given(st.integers(1, 5), st.integers(2, 4), st.integers(1, 8), st.integers(0, 2**31))
def test_marginals_are_distributions(S, V, L, seed):
    rng = make_rng(seed)
    h = gen_hmm(S, V, 2.0, 0.0, seed)
    s = random_mask(rng.integers(0, V, L), rng, 0.7)
    pm = posterior_marginals(h, s)
    assert set(pm.entries) == set(np.flatnonzero(s == MASK).tolist())
    for v in pm.entries.values():
        assert np.all(v >= 0) and abs(v.sum() - 1.0) < 1e-10


def test_make_oracle_dispatch():
    assert isinstance(make_oracle(gen_ngram(2, 3, 1.0, 0.0, 0)), ChainOracle)
    assert isinstance(make_oracle(gen_ngram(3, 3, 1.0, 0.0, 0)), HmmOracle)
