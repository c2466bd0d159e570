"""The adversarial interval language and its exact sequence error rate.

A sequence of length ``L`` is cut into ``L / l`` intervals of ``l`` tokens.
Every unordered pair of positions inside an interval shares one fair bit,
so each token carries ``l - 1`` bits and the vocabulary has ``2**(l-1)``
symbols.  Positions are 1-based inside an interval; for a pair ``i < j`` the
shared bit is bit ``j - 1`` of token ``i`` and bit ``i`` of token ``j``.
Bit 1 is the most significant bit of the token id.

Drawing two unpinned partners in the same reverse step leaves their shared
bit to two independent coin flips, which disagree half the time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, InputError
from .formal_lang import MASK, HmmModel
from .oracle import MaskedSequence, PosteriorMarginals

HMM_MAX_L = 5
SER_MAX_L = 6


def _partner_tables(l: int):
    """For local position p (0-based) and bit b (1-based) the partner and its bit index."""
    partner = np.zeros((l, l - 1), dtype=np.int64)
    pbit = np.zeros((l, l - 1), dtype=np.int64)
    pair = np.zeros((l, l - 1), dtype=np.int64)
    pair_id = {}
    for i in range(l):
        p = i + 1
        for b in range(1, l):
            q, qb = (b + 1, p) if b >= p else (b, p - 1)
            partner[i, b - 1] = q - 1
            pbit[i, b - 1] = qb
            pair[i, b - 1] = pair_id.setdefault((min(p, q), max(p, q)), len(pair_id))
    return partner, pbit, pair


@dataclass(frozen=True, eq=False)
class IntervalLanguage:
    seq_len: int
    interval_len: int
    _tables: tuple = field(init=False, repr=False)

    def __post_init__(self):
        L, l = self.seq_len, self.interval_len
        if l < 2 or L < 1 or L % l:
            raise InputError(f"need l >= 2 dividing L, got L={L}, l={l}")
        object.__setattr__(self, "_tables", _partner_tables(l))

    @property
    def l(self) -> int:
        return self.interval_len

    @property
    def vocab_size(self) -> int:
        return 2 ** (self.l - 1)

    @property
    def num_intervals(self) -> int:
        return self.seq_len // self.l

    @property
    def bits_per_interval(self) -> int:
        return self.l * (self.l - 1) // 2

    @property
    def kind(self) -> str:
        return "interval"

    @property
    def sequence_prob(self) -> float:
        return 2.0 ** (-self.num_intervals * self.bits_per_interval)

    def token_bit(self, tokens, b):
        """Bit ``b`` (1-based, MSB first) of token ids."""
        return (np.asarray(tokens) >> (self.l - 1 - np.asarray(b))) & 1

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.int64))
        if x.shape[1] != self.seq_len:
            raise InputError(f"sequences must have length {self.seq_len}")
        if x.size and (x.min() < 0 or x.max() >= self.vocab_size):
            raise InputError(f"tokens must lie in [0, {self.vocab_size})")
        return x

    def sample_batch(self, L: int, size: int, rng: np.random.Generator) -> np.ndarray:
        if L != self.seq_len:
            raise InputError(f"this language generates length {self.seq_len} only")
        l, M = self.l, self.num_intervals
        _, _, pair = self._tables
        bits = rng.integers(0, 2, size=(size, M, self.bits_per_interval))
        weights = 1 << (l - 1 - np.arange(1, l))
        tok = (bits[:, :, pair] * weights).sum(axis=-1)  # (size, M, l)
        return tok.reshape(size, L).astype(np.int64)

    def in_support(self, seqs) -> np.ndarray:
        x = self._check(seqs).reshape(-1, self.num_intervals, self.l)
        ok = np.ones(x.shape[0], dtype=bool)
        for i in range(1, self.l + 1):
            for j in range(i + 1, self.l + 1):
                a = self.token_bit(x[:, :, i - 1], j - 1)
                b = self.token_bit(x[:, :, j - 1], i)
                ok &= np.all(a == b, axis=1)
        return ok

    def log_prob2_batch(self, seqs) -> np.ndarray:
        ok = self.in_support(seqs)
        return np.where(ok, -float(self.num_intervals * self.bits_per_interval), -np.inf)

    def make_oracle(self) -> "IntervalOracle":
        return IntervalOracle(self)

    def to_dict(self) -> dict:
        return {"kind": "interval", "L": self.seq_len, "l": self.l}


class IntervalOracle:
    """Exact marginals: each bit is pinned by a revealed partner or is a fair coin."""

    def __init__(self, lang: IntervalLanguage):
        self.lang = lang
        self.vocab_size = lang.vocab_size
        l = lang.l
        # (V, l-1) bit table of every token
        self._bits = lang.token_bit(np.arange(lang.vocab_size)[:, None], np.arange(1, l)[None, :])

    def query(self, state: np.ndarray, rows: np.ndarray, positions: np.ndarray):
        lang = self.lang
        l, V = lang.l, lang.vocab_size
        rows = np.asarray(rows, dtype=np.int64)
        pos = np.asarray(positions, dtype=np.int64)
        partner, pbit, _ = lang._tables
        start = pos - pos % l
        loc = pos % l
        ptok = state[rows[:, None], start[:, None] + partner[loc]]  # (Q, l-1)
        pinned = ptok != MASK
        pin = lang.token_bit(np.maximum(ptok, 0), pbit[loc])
        ok = ~pinned[:, None, :] | (self._bits[None, :, :] == pin[:, None, :])  # (Q, V, l-1)
        w = ok.all(axis=2).astype(float)
        return w / w.sum(axis=1, keepdims=True), np.zeros(rows.size, dtype=bool)


def build_interval_language(L: int, l: int) -> IntervalLanguage:
    return IntervalLanguage(int(L), int(l))


def interval_in_support(lang: IntervalLanguage, sequence) -> bool:
    return bool(lang.in_support(np.asarray(sequence, dtype=np.int64)[None, :])[0])


def interval_oracle_marginals(lang: IntervalLanguage, masked_seq) -> PosteriorMarginals:
    slots = masked_seq.slots if isinstance(masked_seq, MaskedSequence) else MaskedSequence(masked_seq).slots
    if slots.size != lang.seq_len:
        raise InputError(f"masked sequence must have length {lang.seq_len}")
    if slots.size and slots.max() >= lang.vocab_size:
        raise InputError("token id outside the vocabulary")
    pos = np.flatnonzero(slots == MASK)
    probs, _ = IntervalOracle(lang).query(slots[None, :], np.zeros(pos.size, dtype=np.int64), pos)
    return PosteriorMarginals({int(p): probs[k] for k, p in enumerate(pos)})


def interval_hmm_state_count(l: int) -> int:
    return sum(2 ** ((2 * l - i - 1) * i // 2) for i in range(1, l + 1))


def interval_to_hmm(lang: IntervalLanguage) -> HmmModel:
    """Hidden Markov form: state (i, rows 1..i of the pair-bit matrix), deterministic emission.

    Row ``r`` of the strictly upper-triangular matrix holds the bits shared
    with positions ``r+1..l``.  Entering position ``i`` draws row ``i`` fresh;
    after position ``l`` the chain restarts at position 1.
    """
    l = lang.l
    if l > HMM_MAX_L:
        raise CapacityError(f"interval_to_hmm is capped at l <= {HMM_MAX_L}, got {l}")
    V = lang.vocab_size
    row_off = [0]
    for r in range(1, l + 1):
        row_off.append(row_off[-1] + (l - r))  # row_off[r-1] = first bit of row r
    nbits = [row_off[i] for i in range(1, l + 1)]  # bits stored in block i
    block_start = np.concatenate([[0], np.cumsum([2**m for m in nbits])])
    S = int(block_start[-1])

    emit_tok = np.zeros(S, dtype=np.int64)
    for i in range(1, l + 1):
        codes = np.arange(2 ** nbits[i - 1])
        tok = np.zeros(codes.size, dtype=np.int64)
        for b in range(1, l):
            r, c = (b, i) if b < i else (i, b + 1)
            bit = (codes >> (row_off[r - 1] + c - r - 1)) & 1
            tok |= bit << (l - 1 - b)
        emit_tok[block_start[i - 1] : block_start[i]] = tok

    trans = np.zeros((S, S))
    for i in range(1, l):
        codes = np.arange(2 ** nbits[i - 1])
        fresh = 2 ** (nbits[i] - nbits[i - 1])
        src = block_start[i - 1] + codes
        for f in range(fresh):
            trans[src, block_start[i] + codes + (f << nbits[i - 1])] = 1.0 / fresh
    first = 2 ** nbits[0]
    trans[block_start[l - 1] : block_start[l], block_start[0] : block_start[1]] = 1.0 / first
    init = np.zeros(S)
    init[: block_start[1]] = 1.0 / first

    emit = np.zeros((S, V + 1))
    emit[np.arange(S), emit_tok] = 1.0
    emit[:, V] = 1.0 / S
    return HmmModel(S, V, trans, emit, init)


def interval_success_prob(l: int, deltas) -> float:
    """Probability that one interval is generated consistently by the factorized sampler.

    Sums over ordered set partitions of the ``l`` positions into reveal
    steps: a block of ``j`` positions revealed at step ``k`` has weight
    ``delta_k**j`` and contributes ``C(j, 2)`` fair coin agreements.  The
    sum is the coefficient of ``x**l / l!`` in the product over steps of
    ``sum_j (delta_k x)**j 2**(-C(j,2)) / j!``, accumulated step by step.
    """
    coef = np.array([2.0 ** (-(j * (j - 1) // 2)) / math.factorial(j) for j in range(l + 1)])
    poly = np.zeros(l + 1)
    poly[0] = 1.0
    for d in np.asarray(deltas, dtype=float):
        if d == 0.0:
            continue
        step = coef * d ** np.arange(l + 1)
        poly = np.convolve(poly, step)[: l + 1]
    return float(poly[l] * math.factorial(l))


def exact_interval_ser(lang: IntervalLanguage, schedule) -> float:
    if lang.l > SER_MAX_L:
        raise CapacityError(f"exact SER is capped at l <= {SER_MAX_L}; use Monte Carlo")
    success = interval_success_prob(lang.l, schedule.deltas)
    return float(-math.expm1(lang.num_intervals * math.log(success)))
