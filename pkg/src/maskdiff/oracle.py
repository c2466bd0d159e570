"""Exact posterior marginals q(x_0^i | x_t) for partially masked sequences.

Three engines share one batched query interface::

    probs, degenerate = oracle.query(state, rows, positions)

``state`` is a (B, L) int array holding ``MASK`` (-1) at masked slots;
``rows``/``positions`` list the (row, slot) pairs whose marginal is wanted.
The result is a (Q, V) array of probability vectors and a (Q,) flag marking
queries whose row has zero-probability evidence (those get uniform vectors).

* ``HmmOracle``: constrained forward-backward with per-position scaling,
  O(L * S^2) per row.  Serves HMMs and n-gram models through
  ``embed_ngram_as_hmm``.
* ``ChainOracle``: first-order observed Markov chains (bigram models).  The
  posterior of a masked slot only depends on the nearest observed token on
  each side, so it is a product of two rows of cached matrix powers.
* the interval-language oracle in ``maskdiff.adversarial``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, InputError
from .formal_lang import MASK, HmmModel, NGramModel

DEFAULT_STATE_CAP = 10**6
BRUTE_BUDGET = 10**6


@dataclass(frozen=True, eq=False)
class MaskedSequence:
    slots: np.ndarray

    def __post_init__(self):
        s = np.array(self.slots, dtype=np.int64)
        if s.ndim != 1 or np.any(s < MASK):
            raise InputError("slots must be a 1-D array of token ids or MASK")
        s.flags.writeable = False
        object.__setattr__(self, "slots", s)

    @classmethod
    def from_tokens(cls, tokens, masked_positions=()) -> "MaskedSequence":
        s = np.array(tokens, dtype=np.int64)
        s[list(masked_positions)] = MASK
        return cls(s)

    @classmethod
    def all_masked(cls, L: int) -> "MaskedSequence":
        return cls(np.full(L, MASK, dtype=np.int64))

    def __len__(self):
        return self.slots.size

    @property
    def mask_count(self) -> int:
        return int((self.slots == MASK).sum())

    @property
    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(self.slots == MASK)


@dataclass
class PosteriorMarginals:
    entries: dict[int, np.ndarray] = field(default_factory=dict)
    degenerate: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([self.entries[k] for k in sorted(self.entries)])


# ------------------------------------------------------------- n-gram -> HMM


def embed_ngram_as_hmm(ngram: NGramModel, state_cap: int = DEFAULT_STATE_CAP) -> HmmModel:
    """Exact HMM form of an n-gram model.

    The hidden state at position i is the window (x_i, ..., x_{i+n-2}); it
    emits its oldest token deterministically.  The first state is drawn from
    the initial context law, so the first n-1 tokens keep their joint law.
    """
    V, S = ngram.vocab_size, ngram.num_contexts
    if S > state_cap:
        raise CapacityError(f"{S} context states exceed the cap of {state_cap}")
    ctx = np.arange(S)
    trans = np.zeros((S, S))
    for v in range(V):
        trans[ctx, (ctx * V) % S + v] += ngram.transitions[:, v]
    emit = np.zeros((S, V + 1))
    emit[ctx, ctx // (S // V)] = 1.0
    emit[:, V] = 1.0 / S
    return HmmModel(S, V, trans, emit, ngram.init_context_dist, ngram.threshold, ngram.temperature, ngram.seed)


# ---------------------------------------------------------- forward-backward


def forward_backward(hmm: HmmModel, x: np.ndarray):
    """Scaled constrained forward-backward over a (R, L) batch with MASK slots.

    Returns ``(gamma, log2_evidence, degenerate)``: posterior state marginals
    of shape (R, L, S), the base-2 log probability of the observed slots, and
    a per-row flag for zero-probability evidence.
    """
    R, L = x.shape
    S = hmm.num_states
    A = hmm.trans
    E = hmm.emit_tokens.T[np.maximum(x, 0)]  # (R, L, S)
    E[x == MASK] = 1.0
    uniform = np.full(S, 1.0 / S)
    alpha = np.empty((R, L, S))
    logz = np.zeros(R)
    deg = np.zeros(R, dtype=bool)
    a = hmm.init[None, :] * E[:, 0]
    for i in range(L):
        if i:
            a = (alpha[:, i - 1] @ A) * E[:, i]
        c = a.sum(axis=1)
        bad = c <= 0
        deg |= bad
        with np.errstate(divide="ignore"):
            logz += np.log2(c)
        alpha[:, i] = np.where(bad[:, None], uniform, a / np.where(bad, 1.0, c)[:, None])
    gamma = alpha
    b = np.ones((R, S))
    for i in range(L - 1, -1, -1):
        if i < L - 1:
            b = (E[:, i + 1] * b) @ A.T
            s = b.sum(axis=1)
            bad = s <= 0
            deg |= bad
            b = np.where(bad[:, None], 1.0, b / np.where(bad, 1.0, s)[:, None])
        g = gamma[:, i] * b
        s = g.sum(axis=1)
        gamma[:, i] = np.where((s > 0)[:, None], g / np.where(s > 0, s, 1.0)[:, None], uniform)
    logz[deg] = -np.inf
    return gamma, logz, deg


class HmmOracle:
    def __init__(self, model, state_cap: int = DEFAULT_STATE_CAP, max_cells: int = 4_000_000):
        self.model = model
        self.hmm = embed_ngram_as_hmm(model, state_cap) if isinstance(model, NGramModel) else model
        self.vocab_size = self.hmm.vocab_size
        self.max_cells = max_cells

    def query(self, state: np.ndarray, rows: np.ndarray, positions: np.ndarray):
        V = self.vocab_size
        rows = np.asarray(rows, dtype=np.int64)
        positions = np.asarray(positions, dtype=np.int64)
        probs = np.empty((rows.size, V))
        deg_out = np.zeros(rows.size, dtype=bool)
        if rows.size == 0:
            return probs, deg_out
        uniq, inv = np.unique(rows, return_inverse=True)
        L = state.shape[1]
        chunk = max(1, self.max_cells // max(1, L * self.hmm.num_states))
        emitV = self.hmm.emit_tokens
        for start in range(0, uniq.size, chunk):
            sel = np.flatnonzero((inv >= start) & (inv < start + chunk))
            gamma, _, deg = forward_backward(self.hmm, state[uniq[start : start + chunk]])
            r = inv[sel] - start
            p = gamma[r, positions[sel]] @ emitV
            p /= p.sum(axis=1, keepdims=True)
            p[deg[r]] = 1.0 / V
            probs[sel] = p
            deg_out[sel] = deg[r]
        return probs, deg_out

    def log2_evidence(self, slots) -> float:
        _, logz, _ = forward_backward(self.hmm, np.asarray(slots, dtype=np.int64)[None, :])
        return float(logz[0])


# ------------------------------------------------------------- bigram chains


class ChainOracle:
    """Closed-form posteriors for a bigram model (observed first-order chain)."""

    def __init__(self, model: NGramModel):
        if not isinstance(model, NGramModel) or model.order != 2:
            raise InputError("ChainOracle needs a bigram model")
        self.model = model
        self.vocab_size = model.vocab_size
        self.check_support = not model.has_full_support
        self._pow = np.eye(model.vocab_size)[None]
        self._marg = model.init_context_dist[None].copy()

    def _ensure(self, L: int):
        have = self._pow.shape[0]
        if have > L:
            return
        T = self.model.transitions
        pows = [self._pow]
        last = self._pow[-1]
        extra = []
        for _ in range(have, L + 1):
            last = last @ T
            extra.append(last)
        self._pow = np.concatenate(pows + [np.array(extra)])
        self._marg = self.model.init_context_dist @ self._pow  # (L+1, V)

    def query(self, state: np.ndarray, rows: np.ndarray, positions: np.ndarray):
        V = self.vocab_size
        rows = np.asarray(rows, dtype=np.int64)
        i = np.asarray(positions, dtype=np.int64)
        if rows.size == 0:
            return np.empty((0, V)), np.zeros(0, dtype=bool)
        L = state.shape[1]
        self._ensure(L)
        uniq, r = np.unique(rows, return_inverse=True)
        sub = state[uniq]
        obs = sub != MASK
        idx = np.arange(L)
        left = np.maximum.accumulate(np.where(obs, idx, -1), axis=1)
        right = np.minimum.accumulate(np.where(obs, idx, L)[:, ::-1], axis=1)[:, ::-1]
        p, s = self.posterior(i, left[r, i], sub[r, np.maximum(left[r, i], 0)],
                              right[r, i], sub[r, np.minimum(right[r, i], L - 1)], L)
        deg = s <= 0
        if self.check_support:
            deg |= self._row_degenerate(sub, left)[r]
        p = np.where(deg[:, None], 1.0 / V, p / np.where(deg, 1.0, s)[:, None])
        return p, deg

    def posterior(self, i, a, xa, b, xb, L):
        """Unnormalized law of slot ``i`` between observed slots ``a < i < b`` (-1 / L if absent)."""
        self._ensure(L)
        P, M = self._pow, self._marg
        has_a, has_b = a >= 0, b < L
        lv = np.where(has_a[:, None], P[np.where(has_a, i - a, 0), xa], M[i])
        rv = np.where(has_b[:, None], P[np.where(has_b, b - i, 0), :, xb], 1.0)
        p = lv * rv
        return p, p.sum(axis=1)

    def compatible(self, a, xa, i, xi) -> np.ndarray:
        """Can observed token ``xi`` at ``i`` follow ``xa`` at ``a`` (or start the chain if a < 0)?"""
        has_a = a >= 0
        w = np.where(has_a, self._pow[np.where(has_a, i - a, 0), np.maximum(xa, 0), xi], self._marg[i, xi])
        return w > 0

    def plan(self, reveal_step: np.ndarray) -> "ChainPlan":
        return ChainPlan(self, reveal_step)

    def _row_degenerate(self, sub: np.ndarray, left: np.ndarray) -> np.ndarray:
        R, L = sub.shape
        obs = sub != MASK
        prev = np.concatenate([np.full((R, 1), -1), left[:, :-1]], axis=1)
        rr, jj = np.nonzero(obs)
        pj = prev[rr, jj]
        xj = sub[rr, jj]
        w = np.where(pj >= 0, self._pow[np.where(pj >= 0, jj - pj, 0), sub[rr, np.maximum(pj, 0)], xj],
                     self._marg[jj, xj])
        deg = np.zeros(R, dtype=bool)
        deg[rr[w <= 0]] = True
        return deg


def nearest_left(R: np.ndarray, thr: np.ndarray) -> np.ndarray:
    """Largest ``j < i`` with ``R[:, j] < thr[:, i]`` for every slot, or -1; binary lifting over block minima."""
    B, L = R.shape
    big = np.iinfo(np.int64).max
    mins = [R.astype(np.int64)]
    while (1 << len(mins)) <= L:
        h = 1 << (len(mins) - 1)
        prev = mins[-1]
        shifted = np.concatenate([np.full((B, h), big), prev[:, :-h]], axis=1)
        mins.append(np.minimum(prev, shifted))
    rows = np.arange(B)[:, None]
    cur = np.broadcast_to(np.arange(L) - 1, (B, L)).copy()
    for p in range(len(mins) - 1, -1, -1):
        ok = cur >= 0
        m = mins[p][rows, np.maximum(cur, 0)]
        cur = np.where(ok & (m >= thr), cur - (1 << p), cur)
    return np.maximum(cur, -1)


def nearest_right(R: np.ndarray, thr: np.ndarray) -> np.ndarray:
    L = R.shape[1]
    j = nearest_left(R[:, ::-1], thr[:, ::-1])[:, ::-1]
    return np.where(j >= 0, L - 1 - j, L)


class ChainPlan:
    """Bigram posteriors for a batch whose reveal steps are known in advance.

    Slot ``i`` revealed at step ``R_i`` is conditioned on its nearest slots
    revealed strictly earlier, so neighbours are found once for the whole
    run.  A row becomes degenerate once two adjacent observed tokens are
    incompatible; that is checked as tokens are committed, against the
    nearest slots revealed no later than the new one.
    """

    def __init__(self, oracle: ChainOracle, reveal_step: np.ndarray):
        R = np.asarray(reveal_step, dtype=np.int64)
        self.oracle = oracle
        self.L = R.shape[1]
        oracle._ensure(self.L)
        self.left = nearest_left(R, R)
        self.right = nearest_right(R, R)
        if oracle.check_support:
            self.left_eq = nearest_left(R, R + 1)
            self.right_eq = nearest_right(R, R + 1)
        self.tainted = np.zeros(R.shape[0], dtype=bool)

    def query(self, x: np.ndarray, rows: np.ndarray, positions: np.ndarray):
        L, V = self.L, self.oracle.vocab_size
        a, b = self.left[rows, positions], self.right[rows, positions]
        p, s = self.oracle.posterior(positions, a, x[rows, np.maximum(a, 0)], b, x[rows, np.minimum(b, L - 1)], L)
        deg = (s <= 0) | self.tainted[rows]
        p = np.where(deg[:, None], 1.0 / V, p / np.where(deg, 1.0, s)[:, None])
        return p, deg

    def commit(self, x: np.ndarray, rows: np.ndarray, positions: np.ndarray):
        if not self.oracle.check_support:
            return
        i, xi = positions, x[rows, positions]
        a = self.left_eq[rows, i]
        ok = self.oracle.compatible(a, x[rows, np.maximum(a, 0)], i, xi)
        b = self.right_eq[rows, i]
        has_b = b < self.L
        bb = np.minimum(b, self.L - 1)
        ok &= ~has_b | self.oracle.compatible(i, xi, bb, np.maximum(x[rows, bb], 0))
        self.tainted[rows[~ok]] = True


def exact_oracle(model):
    """The reference engine for ``model`` (forward-backward unless the model brings its own)."""
    if hasattr(model, "make_oracle"):
        return model.make_oracle()
    return HmmOracle(model)


def make_oracle(model):
    """The fastest exact engine for ``model``."""
    if isinstance(model, NGramModel) and model.order == 2:
        return ChainOracle(model)
    return exact_oracle(model)


# ---------------------------------------------------------------- public API


def _to_slots(masked_seq) -> np.ndarray:
    if isinstance(masked_seq, MaskedSequence):
        return masked_seq.slots
    return MaskedSequence(masked_seq).slots


def _check_length(model, slots):
    L = getattr(model, "seq_len", None)
    if L is not None and slots.size != L:
        raise InputError(f"masked sequence has length {slots.size}, language expects {L}")
    if slots.size and slots.max() >= model.vocab_size:
        raise InputError("token id outside the vocabulary")


def posterior_marginals(model, masked_seq, oracle=None) -> PosteriorMarginals:
    """Exact per-slot posteriors of every masked slot given the observed ones."""
    slots = _to_slots(masked_seq)
    _check_length(model, slots)
    pos = np.flatnonzero(slots == MASK)
    if pos.size == 0:
        return PosteriorMarginals()
    oracle = oracle or exact_oracle(model)
    probs, deg = oracle.query(slots[None, :], np.zeros(pos.size, dtype=np.int64), pos)
    return PosteriorMarginals({int(p): probs[k] for k, p in enumerate(pos)}, bool(deg.any()))


def joint_prob_plain(model, X: np.ndarray) -> np.ndarray:
    """Unscaled probability q(x) of each full row of X, by the textbook recursions."""
    X = np.asarray(X, dtype=np.int64)
    if hasattr(model, "in_support"):
        return model.in_support(X) * model.sequence_prob
    if isinstance(model, NGramModel):
        n, V, S = model.order, model.vocab_size, model.num_contexts
        k = min(X.shape[1], n - 1)
        p = model.init_tensor()[tuple(X[:, j] for j in range(k))]
        if k < n - 1:
            p = p.reshape(X.shape[0], -1).sum(axis=1)
        ctx = np.zeros(X.shape[0], dtype=np.int64)
        for j in range(k):
            ctx = ctx * V + X[:, j]
        for i in range(n - 1, X.shape[1]):
            p = p * model.transitions[ctx, X[:, i]]
            ctx = (ctx * V) % S + X[:, i]
        return p
    E = model.emit_tokens
    a = model.init[None, :] * E[:, X[:, 0]].T
    for i in range(1, X.shape[1]):
        a = (a @ model.trans) * E[:, X[:, i]].T
    return a.sum(axis=1)


def posterior_marginals_brute(model, masked_seq, budget: int = BRUTE_BUDGET) -> PosteriorMarginals:
    """Marginals by weighting every completion of the masked slots by q."""
    slots = _to_slots(masked_seq)
    _check_length(model, slots)
    V = model.vocab_size
    pos = np.flatnonzero(slots == MASK)
    if pos.size == 0:
        return PosteriorMarginals()
    if V ** pos.size > budget:
        raise CapacityError(f"{V}^{pos.size} completions exceed the budget of {budget}")
    fill = np.array(list(itertools.product(range(V), repeat=pos.size)), dtype=np.int64)
    X = np.broadcast_to(slots, (fill.shape[0], slots.size)).copy()
    X[:, pos] = fill
    w = joint_prob_plain(model, X)
    total = w.sum()
    if total <= 0:
        return PosteriorMarginals({int(p): np.full(V, 1.0 / V) for p in pos}, True)
    return PosteriorMarginals(
        {int(p): np.bincount(fill[:, k], weights=w, minlength=V) / total for k, p in enumerate(pos)}
    )
