"""Ground-truth formal languages: random n-gram models and HMMs.

Both model classes are immutable after construction.  Context index
convention for an order-``n`` model over ``V`` tokens: the context
``(c_0, ..., c_{n-2})`` (oldest token first) maps to
``sum(c_j * V**(n-2-j))``, so the most recent token is the least significant
digit and the successor context of ``ctx`` after emitting ``v`` is
``(ctx * V) % V**(n-1) + v``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np

from .errors import ConstructionError, EvidenceError, InputError, UnsupportedOperationError
from .rng import RNG_ALGORITHM, make_rng
from .stats import MetricEstimate, mean_estimate

MASK = -1
SCHEMA_ID = "maskdiff.language/v1"


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class NGramModel:
    order: int
    vocab_size: int
    transitions: np.ndarray
    init_context_dist: np.ndarray
    threshold: float = 0.0
    temperature: float | None = None
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "transitions", _frozen(self.transitions))
        object.__setattr__(self, "init_context_dist", _frozen(self.init_context_dist))
        S, V = self.num_contexts, self.vocab_size
        if self.order < 2 or V < 2:
            raise InputError("n-gram needs order >= 2 and vocab_size >= 2")
        if self.transitions.shape != (S, V) or self.init_context_dist.shape != (S,):
            raise InputError(f"table shapes do not match order={self.order}, V={V}")

    @property
    def num_contexts(self) -> int:
        return self.vocab_size ** (self.order - 1)

    @property
    def kind(self) -> str:
        return "ngram"

    @property
    def has_full_support(self) -> bool:
        return bool(np.all(self.transitions > 0) and np.all(self.init_context_dist > 0))

    def init_tensor(self) -> np.ndarray:
        """Initial context law as an ``(V,)*(n-1)`` array indexed oldest-first."""
        return self.init_context_dist.reshape((self.vocab_size,) * (self.order - 1))


@dataclass(frozen=True, eq=False)
class HmmModel:
    """HMM with an extra emission column (index ``vocab_size``) for the mask token."""

    num_states: int
    vocab_size: int
    trans: np.ndarray
    emit: np.ndarray
    init: np.ndarray
    threshold: float = 0.0
    temperature: float | None = None
    seed: int | None = None

    def __post_init__(self):
        for name in ("trans", "emit", "init"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        S, V = self.num_states, self.vocab_size
        if self.trans.shape != (S, S) or self.emit.shape != (S, V + 1) or self.init.shape != (S,):
            raise InputError(f"table shapes do not match num_states={S}, V={V}")

    @property
    def kind(self) -> str:
        return "hmm"

    @property
    def emit_tokens(self) -> np.ndarray:
        return self.emit[:, : self.vocab_size]


Model = Union[NGramModel, HmmModel]


# ---------------------------------------------------------------- construction


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _prune(table: np.ndarray, thres: float, name: str) -> np.ndarray:
    table = table.copy()
    table[table < thres] = 0.0
    sums = table.sum(axis=1, keepdims=True)
    dead = np.flatnonzero(sums[:, 0] == 0)
    if dead.size:
        raise ConstructionError(f"row {int(dead[0])} of {name} is all-zero after pruning at {thres}")
    return table / sums


def _check_threshold(threshold: float):
    if not 0.0 <= threshold < 1.0:
        raise InputError(f"threshold must lie in [0, 1), got {threshold}")


def gen_ngram(order: int, vocab_size: int, temperature: float, threshold: float, seed: int) -> NGramModel:
    """Random n-gram language: softmax of scaled Gaussian logits, pruned once."""
    if order < 2 or vocab_size < 2:
        raise InputError("order >= 2 and vocab_size >= 2 required")
    if temperature < 0:
        raise InputError("temperature must be non-negative")
    _check_threshold(threshold)
    rng = make_rng(seed)
    S = vocab_size ** (order - 1)
    init = rng.random(S)
    init = init / init.sum()
    T = _softmax_rows(rng.standard_normal((S, vocab_size)) * temperature)
    if threshold > 0:
        T = _prune(T, threshold, "transitions")
    return NGramModel(order, vocab_size, T, init, threshold, temperature, seed)


EMISSION_PRUNE = 0.05
EMISSION_SHARPNESS = 2.5


def gen_hmm(num_states: int, vocab_size: int, temperature: float, threshold: float, seed: int) -> HmmModel:
    """Random HMM; emissions are sharpened by 2.5x and always pruned at 0.05."""
    if num_states < 1 or vocab_size < 2:
        raise InputError("num_states >= 1 and vocab_size >= 2 required")
    _check_threshold(threshold)
    rng = make_rng(seed)
    init = rng.random(num_states)
    init = init / init.sum()
    A = _softmax_rows(rng.standard_normal((num_states, num_states)) * temperature)
    if threshold > 0:
        A = _prune(A, threshold, "trans")
    B = _softmax_rows(rng.standard_normal((num_states, vocab_size)) * temperature * EMISSION_SHARPNESS)
    B = _prune(B, EMISSION_PRUNE, "emit")
    B = np.concatenate([B, np.full((num_states, 1), 1.0 / num_states)], axis=1)
    return HmmModel(num_states, vocab_size, A, B, init, threshold, temperature, seed)


# ------------------------------------------------------------------- sampling


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of ``probs`` (rows need not be normalized).

    Zero-probability categories are never returned, even when the cumulative
    sum falls short of 1 by rounding.
    """
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    return (u[:, None] >= cdf).sum(axis=1)


def _decode_context(ctx: np.ndarray, order: int, V: int) -> np.ndarray:
    """Context indices -> (B, n-1) token arrays, oldest token first."""
    out = np.empty((ctx.shape[0], order - 1), dtype=np.int64)
    c = ctx.copy()
    for j in range(order - 2, -1, -1):
        out[:, j] = c % V
        c //= V
    return out


def sample_batch(model, L: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` exact ancestral samples of length ``L`` as a (size, L) int array."""
    if L < 0:
        raise InputError("L must be non-negative")
    if hasattr(model, "sample_batch"):
        return model.sample_batch(L, size, rng)
    out = np.empty((size, L), dtype=np.int64)
    if L == 0:
        return out
    if isinstance(model, NGramModel):
        n, V, S = model.order, model.vocab_size, model.num_contexts
        ctx = sample_categorical(np.broadcast_to(model.init_context_dist, (size, S)), rng)
        head = _decode_context(ctx, n, V)
        k = min(L, n - 1)
        out[:, :k] = head[:, :k]
        for i in range(n - 1, L):
            v = sample_categorical(model.transitions[ctx], rng)
            out[:, i] = v
            ctx = (ctx * V) % S + v
        return out
    s = sample_categorical(np.broadcast_to(model.init, (size, model.num_states)), rng)
    E = model.emit_tokens
    for i in range(L):
        out[:, i] = sample_categorical(E[s], rng)
        if i + 1 < L:
            s = sample_categorical(model.trans[s], rng)
    return out


def sample_sequence(model, L: int, rng: np.random.Generator) -> np.ndarray:
    return sample_batch(model, L, 1, rng)[0]


# -------------------------------------------------------------------- scoring


def _check_tokens(model, x: np.ndarray):
    if x.size and (x.min() < 0 or x.max() >= model.vocab_size):
        raise InputError(f"tokens must lie in [0, {model.vocab_size})")


def log_prob2_batch(model, seqs) -> np.ndarray:
    """Exact base-2 log probability of each row of ``seqs``; ``-inf`` outside the support."""
    x = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    _check_tokens(model, x)
    if hasattr(model, "log_prob2_batch"):
        return model.log_prob2_batch(x)
    B, L = x.shape
    if L == 0:
        return np.zeros(B)
    with np.errstate(divide="ignore"):
        if isinstance(model, NGramModel):
            n, V, S = model.order, model.vocab_size, model.num_contexts
            k = min(L, n - 1)
            head = model.init_tensor()[tuple(x[:, j] for j in range(k))]
            if k < n - 1:
                head = head.reshape(B, -1).sum(axis=1)
            total = np.log2(head)
            ctx = np.zeros(B, dtype=np.int64)
            for j in range(k):
                ctx = ctx * V + x[:, j]
            for i in range(n - 1, L):
                total = total + np.log2(model.transitions[ctx, x[:, i]])
                ctx = (ctx * V) % S + x[:, i]
            return total
        # scaled forward pass over hidden states
        E = model.emit_tokens
        a = model.init[None, :] * E[:, x[:, 0]].T
        total = np.zeros(B)
        for i in range(L):
            if i:
                a = (a @ model.trans) * E[:, x[:, i]].T
            c = a.sum(axis=1)
            total += np.log2(c)
            a = a / np.where(c > 0, c, 1.0)[:, None]
        return total


def log_prob2(model, sequence) -> float:
    return float(log_prob2_batch(model, np.asarray(sequence, dtype=np.int64)[None, :])[0])


def in_support(model, seqs) -> np.ndarray:
    return np.isfinite(log_prob2_batch(model, seqs))


# ------------------------------------------------------- exact AR conditionals


class ArPredictor:
    """Batched exact next-token conditionals q(x_i | x_<i).

    ``probs()`` gives the conditional for the next position of every row;
    ``push(tokens)`` appends one observed token per row.
    """

    def __init__(self, model, size: int):
        self.model = model
        self.size = size
        self.pos = 0
        if isinstance(model, NGramModel):
            self.ctx = np.zeros(size, dtype=np.int64)
            self.head = np.empty((size, 0), dtype=np.int64)
        elif isinstance(model, HmmModel):
            self.pred = np.broadcast_to(model.init, (size, model.num_states)).copy()
        else:
            raise UnsupportedOperationError(f"no AR conditionals for {type(model).__name__}")

    def probs(self) -> np.ndarray:
        m = self.model
        if isinstance(m, HmmModel):
            p = self.pred @ m.emit_tokens
        elif self.pos >= m.order - 1:
            p = m.transitions[self.ctx]
        else:
            t = m.init_tensor()
            if self.pos:
                t = t[tuple(self.head[:, j] for j in range(self.pos))]
            else:
                t = np.broadcast_to(t, (self.size,) + t.shape)
            p = t.reshape(self.size, m.vocab_size, -1).sum(axis=2)
        tot = p.sum(axis=1, keepdims=True)
        if np.any(tot <= 0):
            raise EvidenceError("prefix lies outside the support of the language")
        return p / tot

    def push(self, tokens: np.ndarray):
        m = self.model
        tokens = np.asarray(tokens, dtype=np.int64)
        if isinstance(m, HmmModel):
            b = self.pred * m.emit_tokens[:, tokens].T
            tot = b.sum(axis=1, keepdims=True)
            self.pred = (b / np.where(tot > 0, tot, 1.0)) @ m.trans
        else:
            if self.pos < m.order - 1:
                self.head = np.concatenate([self.head, tokens[:, None]], axis=1)
                self.ctx = self.ctx * m.vocab_size + tokens
            else:
                self.ctx = (self.ctx * m.vocab_size) % m.num_contexts + tokens
        self.pos += 1


def ar_conditional(model, prefix) -> np.ndarray:
    """Exact q(x_i = . | x_<i = prefix) for an in-support prefix."""
    prefix = np.asarray(prefix, dtype=np.int64)
    if not np.isfinite(log_prob2(model, prefix)):
        raise EvidenceError("prefix lies outside the support of the language")
    pred = ArPredictor(model, 1)
    for tok in prefix:
        pred.push(np.array([tok]))
    return pred.probs()[0]


# -------------------------------------------------------------------- entropy


def _entropy_bits(p: np.ndarray, axis=-1) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return t.sum(axis=axis)


def advance_context_dist(model: NGramModel, p: np.ndarray) -> np.ndarray:
    """Law of the next context given the law ``p`` of the current one."""
    V = model.vocab_size
    P = p.reshape(V, -1)
    T = model.transitions.reshape(V, -1, V)
    return np.einsum("ab,abv->bv", P, T).reshape(-1)


def stationary_context_dist(model: NGramModel, iters: int = 100_000, tol: float = 1e-15) -> np.ndarray:
    p = np.full(model.num_contexts, 1.0 / model.num_contexts)
    for _ in range(iters):
        q = advance_context_dist(model, p)
        if np.abs(q - p).max() < tol:
            return q / q.sum()
        p = q
    return p / p.sum()


def exact_entropy_ngram(model, L: int) -> float:
    """Exact per-token entropy E[-log2 q(x)] / L of an n-gram language."""
    if not isinstance(model, NGramModel):
        raise UnsupportedOperationError(
            "exact entropy is only available for n-gram models; use estimate_entropy for HMMs"
        )
    if L < 1:
        raise InputError("L must be >= 1")
    n, V = model.order, model.vocab_size
    if L < n - 1:
        head = model.init_tensor().reshape(V**L, -1).sum(axis=1)
        return float(_entropy_bits(head)) / L
    total = float(_entropy_bits(model.init_context_dist))
    row_h = _entropy_bits(model.transitions)
    p = model.init_context_dist
    for _ in range(n - 1, L):
        total += float(p @ row_h)
        p = advance_context_dist(model, p)
    return total / L


def estimate_entropy(model, L: int, num_samples: int, rng: np.random.Generator) -> MetricEstimate:
    """Monte Carlo per-token entropy in bits, with a 99% CI."""
    x = sample_batch(model, L, num_samples, rng)
    return mean_estimate(-log_prob2_batch(model, x) / L)


# -------------------------------------------------------------- serialization


def _provenance(model) -> dict[str, Any]:
    return {"seed": model.seed, "temperature": model.temperature, "threshold": model.threshold,
            "rng": RNG_ALGORITHM}


def model_to_dict(model) -> dict[str, Any]:
    if isinstance(model, NGramModel):
        return {
            "schema": SCHEMA_ID, "kind": "ngram", "order": model.order, "vocab_size": model.vocab_size,
            "transitions": model.transitions.ravel().tolist(),
            "init_context_dist": model.init_context_dist.tolist(),
            "generation": _provenance(model),
        }
    if isinstance(model, HmmModel):
        return {
            "schema": SCHEMA_ID, "kind": "hmm", "num_states": model.num_states,
            "vocab_size": model.vocab_size,
            "trans": model.trans.ravel().tolist(), "emit": model.emit.ravel().tolist(),
            "init": model.init.tolist(), "generation": _provenance(model),
        }
    if hasattr(model, "to_dict"):
        d = model.to_dict()
        d["schema"] = SCHEMA_ID
        return d
    raise InputError(f"cannot serialize {type(model).__name__}")


def model_from_dict(d: dict[str, Any]):
    if d.get("schema") != SCHEMA_ID:
        raise InputError(f"unknown language schema {d.get('schema')!r}")
    kind = d["kind"]
    gen = d.get("generation", {})
    prov = dict(threshold=gen.get("threshold", 0.0), temperature=gen.get("temperature"), seed=gen.get("seed"))
    if kind == "ngram":
        n, V = d["order"], d["vocab_size"]
        T = np.array(d["transitions"], dtype=float).reshape(V ** (n - 1), V)
        return NGramModel(n, V, T, d["init_context_dist"], **prov)
    if kind == "hmm":
        S, V = d["num_states"], d["vocab_size"]
        return HmmModel(S, V, np.array(d["trans"]).reshape(S, S), np.array(d["emit"]).reshape(S, V + 1),
                        d["init"], **prov)
    if kind == "interval":
        from .adversarial import build_interval_language

        return build_interval_language(d["L"], d["l"])
    raise InputError(f"unknown language kind {kind!r}")


def dumps(model) -> str:
    # repr-based float output is the shortest string that round-trips bit-exactly (<= 17 digits)
    return json.dumps(model_to_dict(model), indent=1)


def loads(text: str):
    return model_from_dict(json.loads(text))
