"""Masking schedules, forward corruption and the reverse-process samplers.

Step convention: reverse step ``k = 1..N`` moves schedule time from
``u_{k-1} = 1 - (k-1)/N`` to ``u_k = 1 - k/N``.  ``alphas[k]`` is the
unmasked probability after step ``k`` (``alphas[0] = 0``, ``alphas[N] = 1``)
and ``deltas[k-1] = alphas[k] - alphas[k-1]`` is the probability that a given
position is revealed at step ``k``.

Every sampler comes in a single-trajectory form returning
``(tokens, TrajectoryRecord)`` and a batched ``*_batch`` form returning a
``BatchResult``; the harness uses the batched forms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InputError, ScheduleError
from .formal_lang import MASK, ArPredictor, HmmModel, NGramModel, sample_categorical
from .oracle import MaskedSequence, make_oracle


# ------------------------------------------------------------------ schedules


@dataclass(frozen=True, eq=False)
class MaskingSchedule:
    alphas: np.ndarray
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.array(self.alphas, dtype=float)
        if a.ndim != 1 or a.size < 2:
            raise ScheduleError("a schedule needs at least one step")
        if a[0] != 0.0 or a[-1] != 1.0:
            raise ScheduleError("alpha must be 0 at t=1 and 1 at t=0")
        if np.any(np.diff(a) < 0):
            raise ScheduleError("alpha must be monotone")
        a.flags.writeable = False
        object.__setattr__(self, "alphas", a)
        d = np.diff(a)
        d.flags.writeable = False
        object.__setattr__(self, "deltas", d)

    @property
    def num_steps(self) -> int:
        return self.deltas.size

    def reveal_prob(self, k: int) -> float:
        """Probability that a position still masked before step k is revealed at step k."""
        rem = 1.0 - self.alphas[k - 1]
        return float(self.deltas[k - 1] / rem) if rem > 0 else 0.0

    def alpha_at(self, t_index: int) -> float:
        """alpha at schedule time ``t_index / N`` (0 is clean, N is fully masked)."""
        return float(self.alphas[self.num_steps - t_index])

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}


def linear_schedule(num_steps: int) -> MaskingSchedule:
    if num_steps < 1:
        raise ScheduleError("num_steps must be >= 1")
    a = np.arange(num_steps + 1) / num_steps
    return MaskingSchedule(a, "linear", {"N": num_steps})


def theoretical_schedule(n: int, epsilon: float, C: float = 24.0) -> MaskingSchedule:
    """Reveal ``epsilon`` of the mass in step 1, then ``epsilon**n / (C (n-1))`` per step."""
    if not 0 < epsilon < 1 or n < 2:
        raise ScheduleError("theoretical schedule needs 0 < epsilon < 1 and n >= 2")
    delta = epsilon**n / (C * (n - 1))
    tail = (1.0 - epsilon) / delta
    m = math.ceil(tail - 1e-9 * max(1.0, tail))
    deltas = np.concatenate([[epsilon], np.full(m, delta)])
    deltas[-1] = 1.0 - epsilon - (m - 1) * delta
    a = np.concatenate([[0.0], np.cumsum(deltas)])
    a[-1] = 1.0
    return MaskingSchedule(np.minimum(a, 1.0), "theoretical", {"n": n, "epsilon": epsilon, "C": C})


def custom_schedule(deltas) -> MaskingSchedule:
    d = np.asarray(deltas, dtype=float)
    if d.ndim != 1 or d.size < 1:
        raise ScheduleError("deltas must be a non-empty list")
    if np.any(d < 0):
        raise ScheduleError("deltas must be non-negative")
    if abs(d.sum() - 1.0) > 1e-9:
        raise ScheduleError(f"deltas sum to {d.sum()!r}, not 1")
    a = np.minimum(np.concatenate([[0.0], np.cumsum(d)]), 1.0)
    a[-1] = 1.0
    return MaskingSchedule(a, "custom", {"deltas": d.tolist()})


def build_schedule(kind: str, **params) -> MaskingSchedule:
    if kind == "linear":
        return linear_schedule(int(params["N"]))
    if kind == "theoretical":
        return theoretical_schedule(int(params["n"]), float(params["epsilon"]), float(params.get("C", 24.0)))
    if kind == "custom":
        return custom_schedule(params["deltas"])
    raise ScheduleError(f"unknown schedule kind {kind!r}")


def remask_cap(schedule: MaskingSchedule) -> np.ndarray:
    """Largest admissible remask probability per step: min(1, (1 - alpha_after) / alpha_before)."""
    before, after = schedule.alphas[:-1], schedule.alphas[1:]
    with np.errstate(divide="ignore"):
        cap = np.where(before > 0, (1.0 - after) / np.where(before > 0, before, 1.0), 1.0)
    return np.minimum(cap, 1.0)


@dataclass(frozen=True, eq=False)
class RemaskSchedule:
    sigmas: np.ndarray

    def __post_init__(self):
        s = np.array(self.sigmas, dtype=float)
        s.flags.writeable = False
        object.__setattr__(self, "sigmas", s)

    def validate(self, schedule: MaskingSchedule):
        if self.sigmas.shape != (schedule.num_steps,):
            raise ScheduleError("one remask probability per step is required")
        cap = remask_cap(schedule)
        bad = np.flatnonzero((self.sigmas < 0) | (self.sigmas > cap + 1e-12))
        if bad.size:
            k = int(bad[0])
            raise ScheduleError(f"sigma={self.sigmas[k]} at step {k + 1} is outside [0, {cap[k]}]")


def constant_remask(schedule: MaskingSchedule, sigma: float) -> RemaskSchedule:
    """Constant remask probability, clipped to the admissible cap at every step."""
    return RemaskSchedule(np.minimum(sigma, remask_cap(schedule)))


def last_reveal_probs(schedule: MaskingSchedule, remask: RemaskSchedule) -> np.ndarray:
    """Probability that a position is revealed for the last time at each step."""
    remask.validate(schedule)
    a, s = schedule.alphas, remask.sigmas
    keep_after = np.concatenate([np.cumprod((1.0 - s)[::-1])[::-1][1:], [1.0]])
    return (a[1:] - (1.0 - s) * a[:-1]) * keep_after


# ----------------------------------------------------------------- records


@dataclass
class TrajectoryRecord:
    reveal_sets: list[np.ndarray]
    oracle_calls: int
    remask_events: list[tuple[int, int]] | None = None
    tainted: bool = False

    def check_partition(self, L: int) -> bool:
        """Are the reveal sets pairwise disjoint with union [L]?"""
        allpos = np.concatenate([np.asarray(s, dtype=np.int64) for s in self.reveal_sets] or [np.empty(0, np.int64)])
        return allpos.size == L and np.array_equal(np.sort(allpos), np.arange(L))

    @property
    def steps_with_reveals(self) -> int:
        return sum(1 for s in self.reveal_sets if len(s))


def trajectory_jsonl(record: TrajectoryRecord, tokens) -> str:
    """One JSON object per step: step, revealed positions, their final tokens, oracle use."""
    tokens = np.asarray(tokens)
    lines = []
    for k, pos in enumerate(record.reveal_sets, start=1):
        pos = np.asarray(pos, dtype=np.int64)
        lines.append(json.dumps({"step": k, "revealed_positions": pos.tolist(),
                                 "tokens": tokens[pos].tolist(), "oracle_called": bool(pos.size)}))
    return "\n".join(lines) + ("\n" if lines else "")


@dataclass
class BatchResult:
    tokens: np.ndarray
    reveal_step: np.ndarray  # (B, L): step at which each slot took its final token
    oracle_calls: np.ndarray
    tainted: np.ndarray
    num_steps: int
    remask_count: np.ndarray | None = None
    masked_after: np.ndarray | None = None  # (N,) masked slots over the whole batch after each step
    events: list | None = None  # (step, kind, rows, positions) when recording

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def steps_with_reveals(self) -> np.ndarray:
        s = np.sort(self.reveal_step, axis=1)
        return 1 + (np.diff(s, axis=1) != 0).sum(axis=1) if s.shape[1] else np.zeros(s.shape[0], int)

    def trajectory(self, b: int) -> TrajectoryRecord:
        r = self.reveal_step[b]
        sets = [np.flatnonzero(r == k) for k in range(1, self.num_steps + 1)]
        return TrajectoryRecord(sets, int(self.oracle_calls[b]), None, bool(self.tainted[b]))


# ------------------------------------------------------------ forward process


def forward_mask(sequence, t_index: int, schedule: MaskingSchedule, rng: np.random.Generator) -> MaskedSequence:
    """Mask each token independently with probability 1 - alpha(t_index / N)."""
    if not 0 <= t_index <= schedule.num_steps:
        raise InputError(f"t_index must lie in [0, {schedule.num_steps}]")
    x = np.array(sequence, dtype=np.int64)
    keep = rng.random(x.size) < schedule.alpha_at(t_index)
    x[~keep] = MASK
    return MaskedSequence(x)


# ------------------------------------------------------------ reverse process


class StepResult(NamedTuple):
    masked_seq: MaskedSequence
    reveal_set: np.ndarray
    oracle_called: bool
    degenerate: bool = False


def reverse_step(model, masked_seq, step_k: int, schedule: MaskingSchedule,
                 rng: np.random.Generator, oracle=None) -> StepResult:
    """One step of the factorized reverse process on a single sequence."""
    if not 1 <= step_k <= schedule.num_steps:
        raise InputError(f"step_k must lie in [1, {schedule.num_steps}]")
    ms = masked_seq if isinstance(masked_seq, MaskedSequence) else MaskedSequence(masked_seq)
    masked = ms.masked_positions
    reveal = masked[rng.random(masked.size) < schedule.reveal_prob(step_k)]
    if reveal.size == 0:
        return StepResult(ms, reveal, False)
    oracle = oracle or make_oracle(model)
    probs, deg = oracle.query(ms.slots[None, :], np.zeros(reveal.size, dtype=np.int64), reveal)
    x = ms.slots.copy()
    x[reveal] = sample_categorical(probs, rng)
    return StepResult(MaskedSequence(x), reveal, True, bool(deg.any()))


def _finish_sweep(model, x: np.ndarray, rng, oracle) -> np.ndarray:
    """Defensive: reveal anything still masked after the last step."""
    left = np.flatnonzero(x == MASK)
    if left.size:
        probs, _ = oracle.query(x[None, :], np.zeros(left.size, dtype=np.int64), left)
        x = x.copy()
        x[left] = sample_categorical(probs, rng)
    return x


def mdm_sample(model, L: int, schedule: MaskingSchedule, rng: np.random.Generator, oracle=None):
    """Generate one sequence with the MDM sampler; returns (tokens, TrajectoryRecord)."""
    oracle = oracle or make_oracle(model)
    ms = MaskedSequence.all_masked(L)
    sets, calls, tainted = [], 0, False
    for k in range(1, schedule.num_steps + 1):
        ms, rev, called, deg = reverse_step(model, ms, k, schedule, rng, oracle)
        sets.append(rev)
        calls += called
        tainted |= deg
    x = _finish_sweep(model, ms.slots, rng, oracle)
    return x, TrajectoryRecord(sets, calls, None, tainted)


def draw_reveal_steps(schedule: MaskingSchedule, shape, rng: np.random.Generator) -> np.ndarray:
    """Reveal step of every slot, drawn directly from the law (delta_1, ..., delta_N)."""
    u = rng.random(shape)
    return np.searchsorted(schedule.alphas[1:], u, side="right") + 1


def mdm_sample_batch(model, L: int, schedule: MaskingSchedule, size: int, rng: np.random.Generator,
                     oracle=None, cache: bool = True) -> BatchResult:
    """Batched MDM sampler.

    With ``cache=True`` each slot's reveal step is drawn up front (its law is
    exactly delta) and the oracle runs only on steps that reveal something.
    With ``cache=False`` the sampler follows the textbook loop: every step
    draws candidate tokens for all masked slots from the oracle, then keeps
    each with the step's reveal probability.
    """
    oracle = oracle or make_oracle(model)
    if not cache:
        return _mdm_uncached(model, L, schedule, size, rng, oracle)
    x = np.full((size, L), MASK, dtype=np.int64)
    R = draw_reveal_steps(schedule, (size, L), rng)
    tainted = np.zeros(size, dtype=bool)
    flat = R.ravel()
    order = np.argsort(flat, kind="stable")
    steps, starts = np.unique(flat[order], return_index=True)
    bounds = np.append(starts, flat.size)
    engine = oracle.plan(R) if hasattr(oracle, "plan") else oracle
    for j in range(steps.size):
        sel = order[bounds[j] : bounds[j + 1]]
        b, i = np.divmod(sel, L)
        probs, deg = engine.query(x, b, i)
        tainted[b[deg]] = True
        x[b, i] = sample_categorical(probs, rng)
        if engine is not oracle:
            engine.commit(x, b, i)
    res = BatchResult(x, R, np.zeros(size, dtype=np.int64), tainted, schedule.num_steps)
    res.oracle_calls = res.steps_with_reveals.astype(np.int64)
    return res


def _mdm_uncached(model, L, schedule, size, rng, oracle) -> BatchResult:
    x = np.full((size, L), MASK, dtype=np.int64)
    R = np.zeros((size, L), dtype=np.int64)
    calls = np.zeros(size, dtype=np.int64)
    tainted = np.zeros(size, dtype=bool)
    for k in range(1, schedule.num_steps + 1):
        b, i = np.nonzero(x == MASK)
        if b.size == 0:
            break
        calls[np.unique(b)] += 1
        probs, deg = oracle.query(x, b, i)
        cand = sample_categorical(probs, rng)
        keep = rng.random(b.size) < schedule.reveal_prob(k)
        tainted[b[keep & deg]] = True
        x[b[keep], i[keep]] = cand[keep]
        R[b[keep], i[keep]] = k
    return BatchResult(x, R, calls, tainted, schedule.num_steps)


def remdm_sample_batch(model, L: int, schedule: MaskingSchedule, remask: RemaskSchedule, size: int,
                       rng: np.random.Generator, oracle=None, record: bool = False) -> BatchResult:
    """Batched ReMDM sampler (revealed tokens may return to the mask state).

    ``reveal_step`` holds the step of each slot's last reveal.  With
    ``record=True`` every reveal and remask event is kept in ``events``.
    """
    remask.validate(schedule)
    if remask.sigmas[-1] != 0:
        raise ScheduleError("the last remask probability must be 0")
    oracle = oracle or make_oracle(model)
    a, N = schedule.alphas, schedule.num_steps
    x = np.full((size, L), MASK, dtype=np.int64)
    last = np.zeros((size, L), dtype=np.int64)
    calls = np.zeros(size, dtype=np.int64)
    remasks = np.zeros(size, dtype=np.int64)
    tainted = np.zeros(size, dtype=bool)
    masked_after = np.zeros(N, dtype=np.int64)
    events = [] if record else None
    for k in range(1, N + 1):
        sig = remask.sigmas[k - 1]
        masked = x == MASK
        denom = 1.0 - a[k - 1]
        p_reveal = (a[k] - (1.0 - sig) * a[k - 1]) / denom if denom > 0 else 1.0
        u = rng.random((size, L))
        reveal = masked & (u < p_reveal)
        drop = ~masked & (u < sig)
        b, i = np.nonzero(reveal)
        if b.size:
            calls[np.unique(b)] += 1
            probs, deg = oracle.query(x, b, i)
            tainted[b[deg]] = True
            new = sample_categorical(probs, rng)
        remasks += drop.sum(axis=1)
        x[drop] = MASK
        if b.size:
            x[b, i] = new
            last[b, i] = k
        masked_after[k - 1] = int((x == MASK).sum())
        if record:
            events.append((k, "reveal", b, i))
            events.append((k, "remask", *np.nonzero(drop)))
    left_b, left_i = np.nonzero(x == MASK)
    if left_b.size:
        probs, _ = oracle.query(x, left_b, left_i)
        x[left_b, left_i] = sample_categorical(probs, rng)
        last[left_b, left_i] = N
    return BatchResult(x, last, calls, tainted, N, remasks, masked_after, events)


def ar_sample_batch(model, L: int, size: int, rng: np.random.Generator, oracle=None) -> BatchResult:
    """Left-to-right sampling from exact next-token conditionals."""
    x = np.full((size, L), MASK, dtype=np.int64)
    if isinstance(model, (NGramModel, HmmModel)):
        pred = ArPredictor(model, size)
        for i in range(L):
            x[:, i] = sample_categorical(pred.probs(), rng)
            pred.push(x[:, i])
    else:
        oracle = oracle or make_oracle(model)
        rows = np.arange(size)
        for i in range(L):
            probs, _ = oracle.query(x, rows, np.full(size, i))
            x[:, i] = sample_categorical(probs, rng)
    steps = np.broadcast_to(np.arange(1, L + 1), (size, L)).copy()
    return BatchResult(x, steps, np.full(size, L, dtype=np.int64), np.zeros(size, dtype=bool), L)


def l2r_mdm_sample_batch(model, L: int, size: int, rng: np.random.Generator, oracle=None) -> BatchResult:
    """MDM with N = L steps where step k reveals exactly slot k-1."""
    oracle = oracle or make_oracle(model)
    x = np.full((size, L), MASK, dtype=np.int64)
    rows = np.arange(size)
    tainted = np.zeros(size, dtype=bool)
    for i in range(L):
        probs, deg = oracle.query(x, rows, np.full(size, i))
        tainted |= deg
        x[:, i] = sample_categorical(probs, rng)
    steps = np.broadcast_to(np.arange(1, L + 1), (size, L)).copy()
    return BatchResult(x, steps, np.full(size, L, dtype=np.int64), tainted, L)


def remdm_sample(model, L, schedule, remask_schedule, rng, oracle=None):
    res = remdm_sample_batch(model, L, schedule, remask_schedule, 1, rng, oracle, record=True)
    sets = [np.empty(0, dtype=np.int64) for _ in range(schedule.num_steps)]
    remasked = []
    for k, kind, _, pos in res.events:
        if kind == "reveal":
            sets[k - 1] = np.sort(pos)
        else:
            remasked.extend((k, int(p)) for p in pos)
    rec = TrajectoryRecord(sets, int(res.oracle_calls[0]), remasked, bool(res.tainted[0]))
    return res.tokens[0], rec


def ar_sample(model, L: int, rng: np.random.Generator) -> np.ndarray:
    return ar_sample_batch(model, L, 1, rng).tokens[0]


def l2r_mdm_sample(model, L: int, rng: np.random.Generator, oracle=None):
    res = l2r_mdm_sample_batch(model, L, 1, rng, oracle)
    return res.tokens[0], res.trajectory(0)
