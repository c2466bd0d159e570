"""Sample quality metrics, reveal-set combinatorics and Monte Carlo bound checks.

Positions are 0-based throughout.  A *separator* for an n-gram model is a
block of ``n - 1`` consecutive previously revealed positions: conditioned on
it, the two sides are independent.  Long runs split greedily from the left,
so a run of length ``d (n - 1)`` holds ``d`` separators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .diffusion import MaskingSchedule, TrajectoryRecord, draw_reveal_steps
from .errors import InfiniteDivergenceError, InputError, UndefinedPerplexityError
from .formal_lang import log_prob2_batch
from .stats import Z99, MetricEstimate, binomial_estimate, mean_estimate

LEMMA_C8_CONSTANT = 24.0


# -------------------------------------------------------------------- metrics


def _as_sequences(sequences) -> np.ndarray:
    x = np.atleast_2d(np.asarray(sequences, dtype=np.int64))
    if x.shape[0] == 0 or x.size == 0:
        raise InputError("no sequences given")
    if x.min() < 0:
        raise InputError("sequences must not contain mask tokens")
    return x


def bits_per_token(model_q, sequences) -> np.ndarray:
    """Per-sequence ``-log2 q(x) / L``; raises if any sequence is outside the support."""
    x = _as_sequences(sequences)
    bits = -log_prob2_batch(model_q, x) / x.shape[1]
    bad = np.flatnonzero(~np.isfinite(bits))
    if bad.size:
        raise UndefinedPerplexityError(
            f"sequence {int(bad[0])} has probability 0 under the reference model "
            f"({bad.size} such sequences); generative perplexity needs a threshold-0 language"
        )
    return bits


def generative_perplexity(model_q, sequences) -> MetricEstimate:
    """``2 ** mean(bits/token)``; the CI is carried through the exponential by the delta method."""
    b = mean_estimate(bits_per_token(model_q, sequences))
    value = 2.0**b.value
    return MetricEstimate(value, value * math.log(2) * b.ci_half_width, b.num_samples)


def log2_perplexity(model_q, sequences) -> MetricEstimate:
    return mean_estimate(bits_per_token(model_q, sequences))


def sequence_error_rate(model_q, sequences) -> MetricEstimate:
    x = _as_sequences(sequences)
    bad = int((~np.isfinite(log_prob2_batch(model_q, x))).sum())
    return binomial_estimate(bad, x.shape[0])


# ------------------------------------------------------------- combinatorics


def _position_set(positions, L: int) -> np.ndarray:
    p = np.unique(np.asarray(list(positions), dtype=np.int64))
    if p.size and (p[0] < 0 or p[-1] >= L):
        raise InputError(f"positions must lie in [0, {L})")
    return p


def count_separators(prev_positions, n: int, L: int) -> int:
    if n < 2:
        raise InputError("n must be >= 2")
    prev = np.zeros(L, dtype=bool)
    prev[_position_set(prev_positions, L)] = True
    total = run = 0
    for j in range(L):
        run = run + 1 if prev[j] else 0
        if run == n - 1:
            total += 1
            run = 0
    return total


def count_dependencies(new_positions, prev_positions, n: int, L: int) -> int:
    """``|new|`` minus the number of separator-delimited intervals that contain a new position."""
    if n < 2:
        raise InputError("n must be >= 2")
    new = _position_set(new_positions, L)
    prev_idx = _position_set(prev_positions, L)
    if np.intersect1d(new, prev_idx).size:
        raise InputError("new and previously revealed positions overlap")
    prev = np.zeros(L, dtype=bool)
    prev[prev_idx] = True
    is_new = np.zeros(L, dtype=bool)
    is_new[new] = True
    groups = 0
    segment_hit = False
    run = 0
    for j in range(L):
        if prev[j]:
            run += 1
            if run == n - 1:
                run = 0
                segment_hit = False
            continue
        run = 0
        if is_new[j] and not segment_hit:
            groups += 1
            segment_hit = True
    return int(new.size - groups)


def _reveal_sets(trajectory) -> list[np.ndarray]:
    if isinstance(trajectory, TrajectoryRecord):
        return [np.asarray(s, dtype=np.int64) for s in trajectory.reveal_sets]
    return [np.asarray(list(s), dtype=np.int64) for s in trajectory]


def trajectory_dependencies(trajectory, n: int, L: int) -> int:
    sets = _reveal_sets(trajectory)
    flat = np.concatenate(sets) if sets else np.empty(0, np.int64)
    if flat.size != L or not np.array_equal(np.sort(flat), np.arange(L)):
        raise InputError("reveal sets do not partition the positions")
    total = 0
    prev: list[int] = []
    for s in sets:
        if s.size:
            total += count_dependencies(s, prev, n, L)
            prev.extend(s.tolist())
    return total


def dependencies_batch(reveal_step: np.ndarray, k: int, n: int) -> np.ndarray:
    """Vectorized ``DEP_n(M_k, M_<k)`` for each row of a (trials, L) reveal-step matrix."""
    R = np.asarray(reveal_step)
    T, L = R.shape
    prev = R < k
    new = R == k
    idx = np.arange(L)
    last_gap = np.maximum.accumulate(np.where(prev, -1, idx), axis=1)
    run = np.where(prev, idx - last_gap, 0)
    sep = prev & (run % (n - 1) == 0)
    seg = np.cumsum(sep, axis=1)
    key = np.where(new, seg, -1)
    before = np.concatenate([np.full((T, 1), -1), np.maximum.accumulate(key, axis=1)[:, :-1]], axis=1)
    first_in_seg = new & (before < seg)
    return new.sum(axis=1) - first_in_seg.sum(axis=1)


# -------------------------------------------------------------- factorization


class KlCheck(NamedTuple):
    kl: float
    bound: float
    holds: bool


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    s = p > 0
    if np.any(q[s] <= 0):
        raise InfiniteDivergenceError("reference is zero where the target has mass")
    return float(np.sum(p[s] * np.log(p[s] / q[s])))


def kl_factorized_check(joint_q, marginals_p, budget: int = 10**6) -> KlCheck:
    """Exact ``KL(q || prod p_i)`` against ``(k-1) log V + k max_i KL(q_i || p_i)`` in nats."""
    q = np.asarray(joint_q, dtype=float)
    k, V = q.ndim, q.shape[0]
    if q.size > budget:
        raise InputError(f"V^k = {q.size} exceeds the enumeration budget")
    p = np.asarray(marginals_p, dtype=float)
    if p.shape != (k, V) or any(s != V for s in q.shape):
        raise InputError("marginals must have shape (k, V) matching the joint")
    axes = range(k)
    qi = [q.sum(axis=tuple(a for a in axes if a != i)) for i in axes]
    delta = max(_kl(qi[i], p[i]) for i in axes)
    prod = p[0]
    for i in range(1, k):
        prod = np.multiply.outer(prod, p[i])
    kl = _kl(q.ravel(), prod.ravel())
    bound = (k - 1) * math.log(V) + k * delta
    return KlCheck(kl, bound, kl <= bound + 1e-9)


# ------------------------------------------------------------ bounds and MC


def lemma_c8_bound(schedule: MaskingSchedule, L: int, n: int, C: float = LEMMA_C8_CONSTANT) -> np.ndarray:
    """Per-step bound on E[DEP]; NaN where L delta_k < 1, inf where nothing is revealed yet."""
    d = schedule.deltas
    p = schedule.alphas[:-1]
    Ld = L * d
    with np.errstate(divide="ignore", invalid="ignore"):
        tail = np.where(p > 0, C * (n - 1) * L * d**2 / np.where(p > 0, p, 1.0) ** (n - 1), np.inf)
    b = 9.0 / (3.0 + Ld) + tail
    return np.where(Ld >= 1, b, np.nan)


def lemma_d1_bound(schedule: MaskingSchedule, L: int) -> float:
    return L * (L - 1) / 2 * float(np.sum(schedule.deltas**2))


def lemma_e3_lower_bound(L: int, l: int, N: int, p_e: float = 0.5) -> float:
    return 1.0 - (1.0 - p_e / N) ** (L // l)


@dataclass
class StepwiseEstimate:
    mean: np.ndarray
    ci_half_width: np.ndarray
    num_samples: int
    bound: np.ndarray

    @property
    def estimates(self) -> list[MetricEstimate]:
        return [MetricEstimate(float(m), float(h), self.num_samples) for m, h in zip(self.mean, self.ci_half_width)]

    def violations(self, k_sigma: float = 3.0) -> np.ndarray:
        """Steps whose estimate exceeds the bound by more than ``k_sigma`` standard errors."""
        sigma = self.ci_half_width / Z99
        with np.errstate(invalid="ignore"):
            bad = self.mean > self.bound + k_sigma * sigma + 1e-12
        return np.flatnonzero(bad & np.isfinite(self.bound))


def estimate_expected_dep(schedule: MaskingSchedule, L: int, n: int, trials: int, rng: np.random.Generator,
                          chunk: int = 2000) -> StepwiseEstimate:
    """Monte Carlo mean of DEP_n per reverse step, from simulated reveal sets only."""
    if trials < 1:
        raise InputError("trials must be >= 1")
    N = schedule.num_steps
    s1 = np.zeros(N)
    s2 = np.zeros(N)
    for start in range(0, trials, chunk):
        R = draw_reveal_steps(schedule, (min(chunk, trials - start), L), rng)
        present = np.unique(R)
        for k in present:
            d = dependencies_batch(R, int(k), n).astype(float)
            s1[k - 1] += d.sum()
            s2[k - 1] += (d * d).sum()
    mean = s1 / trials
    var = np.maximum(s2 / trials - mean**2, 0.0) * trials / max(trials - 1, 1)
    return StepwiseEstimate(mean, Z99 * np.sqrt(var / trials), trials, lemma_c8_bound(schedule, L, n))


class BoundEstimate(NamedTuple):
    estimate: MetricEstimate
    bound: float


def estimate_multi_reveal_prob(schedule: MaskingSchedule, L: int, trials: int,
                               rng: np.random.Generator, chunk: int = 2000) -> BoundEstimate:
    """Probability that some step reveals two or more positions, next to the union bound."""
    if trials < 1:
        raise InputError("trials must be >= 1")
    hits = 0
    for start in range(0, trials, chunk):
        m = min(chunk, trials - start)
        counts = rng.multinomial(L, schedule.deltas, size=m) if L else np.zeros((m, 1))
        hits += int((counts >= 2).any(axis=1).sum())
    return BoundEstimate(binomial_estimate(hits, trials), lemma_d1_bound(schedule, L))


def estimate_distinct_reveal_prob(schedule: MaskingSchedule, l: int, trials: int,
                                  rng: np.random.Generator) -> BoundEstimate:
    """Probability that ``l`` positions all reveal at different steps, next to ``1 - 1/N``."""
    R = np.sort(draw_reveal_steps(schedule, (trials, l), rng), axis=1)
    distinct = int(np.all(np.diff(R, axis=1) > 0, axis=1).sum())
    return BoundEstimate(binomial_estimate(distinct, trials), 1.0 - 1.0 / schedule.num_steps)
