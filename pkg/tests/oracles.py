"""Slow reference implementations used only by the tests.

Each one follows a definition literally (full enumeration, explicit loops)
and shares no code with the package beyond reading model tables.
"""

import itertools
import math
from fractions import Fraction

import numpy as np


def ngram_seq_prob(model, x):
    n, V = model.order, model.vocab_size
    x = [int(t) for t in x]
    head = x[: n - 1]
    init = model.init_context_dist.reshape((V,) * (n - 1))
    if len(x) < n - 1:
        return float(init[tuple(head)].sum())
    p = float(init[tuple(head)])
    for i in range(n - 1, len(x)):
        ctx = 0
        for t in x[i - n + 1 : i]:
            ctx = ctx * V + t
        p *= float(model.transitions[ctx, x[i]])
    return p


def hmm_seq_prob(hmm, x):
    """Sum over every hidden path."""
    S = hmm.num_states
    total = 0.0
    for path in itertools.product(range(S), repeat=len(x)):
        p = hmm.init[path[0]] * hmm.emit[path[0], x[0]]
        for i in range(1, len(x)):
            p *= hmm.trans[path[i - 1], path[i]] * hmm.emit[path[i], x[i]]
        total += p
    return total


def brute_marginals(prob, slots, V):
    """Posterior of each masked slot (-1) by enumerating completions; None if evidence has mass 0."""
    pos = [i for i, s in enumerate(slots) if s < 0]
    acc = {p: [0.0] * V for p in pos}
    Z = 0.0
    for fill in itertools.product(range(V), repeat=len(pos)):
        x = list(slots)
        for p, v in zip(pos, fill):
            x[p] = v
        w = prob(x)
        Z += w
        for p, v in zip(pos, fill):
            acc[p][v] += w
    if Z == 0:
        return None
    return {p: [a / Z for a in acc[p]] for p in pos}


def interval_token(l, bits_of_pair, i):
    """Token id of 1-based position i from a dict {(a, b): bit} over pairs a < b; bit 1 is the MSB."""
    tok = 0
    for b in range(1, l):
        # bit b of token i is shared with position b+1 when b >= i, else with position b
        other = b + 1 if b >= i else b
        tok = tok * 2 + bits_of_pair[(min(i, other), max(i, other))]
    return tok


def interval_support(l, M):
    """Every sequence of M intervals, each generated from an explicit pair-bit assignment."""
    pairs = [(a, b) for a in range(1, l + 1) for b in range(a + 1, l + 1)]
    one = set()
    for bits in itertools.product((0, 1), repeat=len(pairs)):
        d = dict(zip(pairs, bits))
        one.add(tuple(interval_token(l, d, i) for i in range(1, l + 1)))
    return {sum(c, ()) for c in itertools.product(sorted(one), repeat=M)}


def interval_ser_enumerated(l, deltas, M):
    """Exact SER by summing over every assignment of the l positions to reveal steps."""
    deltas = [Fraction(d).limit_denominator(10**12) if not isinstance(d, Fraction) else d for d in deltas]
    success = Fraction(0)
    for steps in itertools.product(range(len(deltas)), repeat=l):
        w = Fraction(1)
        for s in steps:
            w *= deltas[s]
        if w == 0:
            continue
        same = sum(1 for a in range(l) for b in range(a + 1, l) if steps[a] == steps[b])
        success += w / 2**same
    return 1 - float(success) ** M


def separators_by_definition(prev, n, L):
    """Explicit separator blocks: maximal runs of prev split left to right into blocks of n-1."""
    prev = set(prev)
    blocks = []
    j = 0
    while j < L:
        if j in prev:
            run = []
            while j < L and j in prev:
                run.append(j)
                j += 1
            for s in range(0, len(run) - (n - 2), n - 1):
                if len(run[s : s + n - 1]) == n - 1:
                    blocks.append(run[s : s + n - 1])
        else:
            j += 1
    return blocks


def dependencies_by_definition(new, prev, n, L):
    sep = {p for b in separators_by_definition(prev, n, L) for p in b}
    intervals, cur = [], []
    for j in range(L):
        if j in sep:
            if cur:
                intervals.append(cur)
            cur = []
        else:
            cur.append(j)
    if cur:
        intervals.append(cur)
    new = set(new)
    hit = sum(1 for iv in intervals if new & set(iv))
    return len(new) - hit


def prob_all_distinct(deltas, m):
    """P(m independent draws from deltas are pairwise different), by enumerating ordered tuples."""
    d = list(deltas)
    return sum(math.prod(d[s] for s in t) for t in itertools.permutations(range(len(d)), m))


def kl_enumerated(q, p_list):
    """KL(q || prod p_i) in nats by looping over every cell."""
    k = q.ndim
    total = 0.0
    for idx in itertools.product(range(q.shape[0]), repeat=k):
        if q[idx] > 0:
            total += q[idx] * math.log(q[idx] / math.prod(p_list[i][idx[i]] for i in range(k)))
    return total


def remdm_last_reveal_dp(alphas, sigmas):
    """Law of the last reveal step of one slot, by propagating (masked, revealed) occupation."""
    N = len(sigmas)
    out = []
    for k in range(1, N + 1):
        m = 1.0  # P(masked) before step 1
        for j in range(1, k):
            r = (alphas[j] - (1 - sigmas[j - 1]) * alphas[j - 1]) / (1 - alphas[j - 1]) if alphas[j - 1] < 1 else 1.0
            m = m * (1 - r) + (1 - m) * sigmas[j - 1]
        r = (alphas[k] - (1 - sigmas[k - 1]) * alphas[k - 1]) / (1 - alphas[k - 1]) if alphas[k - 1] < 1 else 1.0
        keep = math.prod(1 - sigmas[j - 1] for j in range(k + 1, N + 1))
        out.append(m * r * keep)
    return np.array(out)


def mdm_exact_law(prob, V, L, deltas):
    """Exact output law of the factorized MDM sampler, by enumerating reveal-step assignments.

    Returns a vector indexed by sum_i x_i V**i.
    """
    law = np.zeros(V**L)

    def recurse(state, step, weight, steps):
        if step == len(deltas):
            law[sum(v * V**i for i, v in enumerate(state))] += weight
            return
        group = [i for i in range(L) if steps[i] == step]
        if not group:
            recurse(state, step + 1, weight, steps)
            return
        marg = brute_marginals(prob, state, V)
        if marg is None:
            marg = {i: [1.0 / V] * V for i in range(L) if state[i] < 0}
        for vals in itertools.product(range(V), repeat=len(group)):
            w = weight
            for i, v in zip(group, vals):
                w *= marg[i][v]
            if w == 0:
                continue
            nxt = list(state)
            for i, v in zip(group, vals):
                nxt[i] = v
            recurse(nxt, step + 1, w, steps)

    for steps in itertools.product(range(len(deltas)), repeat=L):
        w = math.prod(deltas[s] for s in steps)
        if w > 0:
            recurse([-1] * L, 0, w, steps)
    return law
