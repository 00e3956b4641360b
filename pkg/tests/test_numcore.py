import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_pearson
from rapa.numcore import (
    SeededRng,
    ShapeError,
    matmul,
    pearson,
    pearson_flagged,
    require_finite,
    shuffle,
)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(a, np.eye(2)), a)

    def test_zero(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(a, np.zeros((2, 2))), np.zeros((2, 2)))

    def test_hand_evaluated(self):
        # [[1,2],[3,4]] @ [[5],[6]]: rows dot (5,6) -> 17, 39
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0], [6.0]])
        np.testing.assert_array_equal(matmul(a, b), [[17.0], [39.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match="inner extents"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_non_2d_rejected(self):
        with pytest.raises(ShapeError, match="2-D"):
            matmul(np.ones(3), np.ones((3, 1)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
    def test_identity_and_distributivity(self, seed, m, k, n):
        g = SeededRng(seed)
        a = g.normal(0, 1, (m, k))
        b = g.normal(0, 1, (k, n))
        c = g.normal(0, 1, (k, n))
        np.testing.assert_allclose(matmul(a, np.eye(k)), a, rtol=1e-12)
        np.testing.assert_allclose(
            matmul(a, b + c), matmul(a, b) + matmul(a, c), rtol=1e-12, atol=1e-12
        )

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 4),
           st.integers(1, 4), st.integers(1, 4))
    def test_associativity(self, seed, m, k, n, p):
        g = SeededRng(seed)
        a = g.normal(0, 1, (m, k))
        b = g.normal(0, 1, (k, n))
        c = g.normal(0, 1, (n, p))
        np.testing.assert_allclose(
            matmul(matmul(a, b), c), matmul(a, matmul(b, c)), rtol=1e-12, atol=1e-12
        )


class TestPearson:
    def test_self_correlation(self):
        u = [1.0, 2.0, 5.0]
        assert pearson(u, u) == 1.0

    def test_negation(self):
        u = np.array([1.0, 2.0, 5.0])
        assert pearson(u, -u) == -1.0

    def test_direct_formula(self):
        # frozen from the direct-formula oracle: 9/sqrt(84)
        want = naive_pearson([1, 2, 3], [1, 2, 4])
        assert want == pytest.approx(0.9819805060619657, abs=1e-15)
        assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(want, abs=1e-12)

    def test_zero_variance_flagged(self):
        r, flagged = pearson_flagged([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
        assert r == 0.0 and flagged
        r, flagged = pearson_flagged([1.0, 2.0, 3.0], [4.0, 4.0, 4.0])
        assert r == 0.0 and flagged

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            pearson([1, 2], [1, 2, 3])

    def test_too_short(self):
        with pytest.raises(ShapeError):
            pearson([1.0], [2.0])

    @settings(max_examples=50, deadline=None)
    @given(
        st.integers(0, 2**32 - 1),
        st.floats(0.1, 10.0),
        st.floats(-5.0, 5.0),
    )
    def test_affine_invariance(self, seed, a, b):
        g = SeededRng(seed)
        u = g.normal(0, 1, 10)
        v = g.normal(0, 1, 10)
        r = pearson(u, v)
        assert pearson(a * u + b, v) == pytest.approx(r, abs=1e-9)
        assert pearson(-a * u + b, v) == pytest.approx(-r, abs=1e-9)


class TestShuffle:
    def test_singleton(self, rng):
        np.testing.assert_array_equal(shuffle(1, rng), [0])

    def test_empty(self, rng):
        assert shuffle(0, rng).size == 0

    def test_determinism(self):
        a = shuffle(10, SeededRng(42))
        b = shuffle(10, SeededRng(42))
        np.testing.assert_array_equal(a, b)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 10_000))
    def test_valid_permutation(self, seed, n):
        p = shuffle(n, SeededRng(seed))
        np.testing.assert_array_equal(np.sort(p), np.arange(n))

    def test_uniformity_monte_carlo(self):
        # P(position 0 holds element 0) = 1/n for a uniform permutation.
        # Monte Carlo over distinct seeds; allow 3 sigma of binomial noise.
        n = 10_000
        trials = 100_000
        hits = sum(
            SeededRng(seed).permutation(n)[0] == 0 for seed in range(trials)
        )
        p = 1.0 / n
        sigma = (p * (1 - p) / trials) ** 0.5
        assert abs(hits / trials - p) < 3 * sigma


class TestSeededRng:
    def test_same_seed_same_stream(self):
        a = SeededRng(7).normal(0, 1, 5)
        b = SeededRng(7).normal(0, 1, 5)
        np.testing.assert_array_equal(a, b)

    def test_derived_streams_differ(self):
        base = SeededRng(7)
        a = base.derive("train", 0).normal(0, 1, 5)
        b = base.derive("train", 1).normal(0, 1, 5)
        assert not np.array_equal(a, b)

    def test_string_keys_stable(self):
        a = SeededRng(7).derive("augment").random(3)
        b = SeededRng(7).derive("augment").random(3)
        np.testing.assert_array_equal(a, b)

    def test_derivation_is_path_dependent(self):
        a = SeededRng(7).derive(1, 2).random()
        b = SeededRng(7).derive(2, 1).random()
        assert a != b


def test_require_finite():
    require_finite("ok", np.ones(3))
    with pytest.raises(ValueError, match="non-finite"):
        require_finite("bad", np.array([1.0, np.nan]))
