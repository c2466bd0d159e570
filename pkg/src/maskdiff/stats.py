"""Small statistical helpers: confidence intervals and goodness-of-fit tests."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

Z99 = float(stats.norm.ppf(0.995))


@dataclass(frozen=True)
class MetricEstimate:
    """A Monte Carlo estimate with a 99% normal-approximation half width."""

    value: float
    ci_half_width: float
    num_samples: int

    def __post_init__(self):
        if self.ci_half_width < 0 or self.num_samples < 1:
            raise ValueError(f"invalid estimate {self}")

    @property
    def sigma(self) -> float:
        """Standard error implied by the 99% half width."""
        return self.ci_half_width / Z99

    @property
    def lo(self) -> float:
        return self.value - self.ci_half_width

    @property
    def hi(self) -> float:
        return self.value + self.ci_half_width


def mean_estimate(samples) -> MetricEstimate:
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n == 0:
        raise ValueError("no samples")
    sd = float(x.std(ddof=1)) if n > 1 else 0.0
    return MetricEstimate(float(x.mean()), Z99 * sd / math.sqrt(n), n)


def binomial_estimate(successes: int, n: int) -> MetricEstimate:
    if n < 1:
        raise ValueError("no trials")
    p = successes / n
    return MetricEstimate(p, Z99 * math.sqrt(p * (1.0 - p) / n), n)


def binomial_sigma(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def within_sigma(observed: float, expected_p: float, n: int, k: float = 3.0) -> bool:
    """Is an observed frequency within ``k`` binomial standard errors of ``expected_p``?"""
    return abs(observed - expected_p) <= k * binomial_sigma(expected_p, n) + 1e-12


def chi2_homogeneity(counts_a, counts_b) -> float:
    """p-value of a chi-square test that two count vectors share one law.

    Categories empty in both samples are dropped.
    """
    a = np.asarray(counts_a, dtype=float)
    b = np.asarray(counts_b, dtype=float)
    keep = (a + b) > 0
    table = np.vstack([a[keep], b[keep]])
    if table.shape[1] < 2:
        return 1.0
    return float(stats.chi2_contingency(table, correction=False)[1])


def chi2_goodness_of_fit(counts, probs) -> float:
    """p-value of observed ``counts`` against expected probabilities.

    Cells with zero expected probability must have zero counts, otherwise the
    p-value is 0.
    """
    c = np.asarray(counts, dtype=float)
    p = np.asarray(probs, dtype=float)
    if np.any(c[p <= 0] > 0):
        return 0.0
    keep = p > 0
    expected = p[keep] / p[keep].sum() * c.sum()
    return float(stats.chisquare(c[keep], expected)[1])


def total_variation(counts, probs) -> float:
    c = np.asarray(counts, dtype=float)
    return 0.5 * float(np.abs(c / c.sum() - np.asarray(probs, dtype=float)).sum())
