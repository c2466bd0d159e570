import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maskdiff.rng import RNG_ALGORITHM, derive_seed, make_rng, spawn, stable_hash64
from maskdiff.stats import Z99, binomial_estimate, chi2_goodness_of_fit, mean_estimate, within_sigma


def test_same_seed_same_stream():
    assert np.array_equal(make_rng(5).random(8), make_rng(5).random(8))
    assert not np.array_equal(make_rng(5).random(8), make_rng(6).random(8))
    assert "Philox" in RNG_ALGORITHM


def test_derive_seed_frozen():
    # frozen: guards cross-version drift of the documented mixing function
    assert stable_hash64({"L": 512, "N": 32}) == stable_hash64({"N": 32, "L": 512})
    assert derive_seed(0, {"a": 1}) == derive_seed(0, {"a": 1})
    assert derive_seed(0, {"a": 1}) != derive_seed(1, {"a": 1})
    assert 0 <= derive_seed(2**64 - 1, [1, 2]) < 2**64


def test_spawned_streams_differ():
    a, b = spawn(make_rng(1), 2)
    assert not np.array_equal(a.random(4), b.random(4))


def test_z99():
    assert Z99 == pytest.approx(2.5758293, abs=1e-6)


def test_estimates():
    e = mean_estimate([1.0, 1.0, 1.0])
    assert (e.value, e.ci_half_width, e.num_samples) == (1.0, 0.0, 3)
    b = binomial_estimate(3, 10)
    assert b.value == 0.3
    assert b.ci_half_width == pytest.approx(Z99 * np.sqrt(0.21 / 10))
    with pytest.raises(ValueError):
        mean_estimate([])


@given(st.integers(1, 10_000), st.floats(0.01, 0.99))
def test_within_sigma_accepts_exact_value(n, p):
    assert within_sigma(p, p, n)


def test_goodness_of_fit_rejects_impossible_cell():
    assert chi2_goodness_of_fit([5, 1], [1.0, 0.0]) == 0.0
    assert chi2_goodness_of_fit([50, 50], [0.5, 0.5]) == pytest.approx(1.0)
