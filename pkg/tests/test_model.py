from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisy_po2.model import (
    QueueState,
    Scheme,
    SchemeKind,
    TailMeasure,
    arrival_fraction,
    arrival_fractions,
    arrival_fractions_quadratic,
    empirical_tail,
    join_probability,
    join_probability_matrix,
)

eps_st = st.floats(0.0, 1.0, allow_nan=False)
g_st = st.integers(0, 6)
q_st = st.integers(0, 40)


@st.composite
def schemes(draw):
    kind = draw(st.sampled_from(list(SchemeKind)))
    if kind is SchemeKind.LOAD_DEPENDENT:
        return Scheme.load_dependent(draw(g_st), draw(eps_st))
    if kind is SchemeKind.LOAD_INDEPENDENT:
        return Scheme.load_independent(draw(eps_st))
    return Scheme(kind)


@st.composite
def tails(draw, max_len=12):
    vals = draw(st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=1, max_size=max_len))
    return np.sort(np.array(vals))[::-1].copy()


def level_pair_oracle(scheme: Scheme, s: np.ndarray) -> np.ndarray:
    """P(arrival joins a server at level k), by enumerating ordered level pairs."""
    ext = np.concatenate([[1.0], s, [0.0]])
    f = ext[:-1] - ext[1:]  # fraction with exactly k jobs, k = 0..B
    out = np.zeros(f.size)
    for a in range(f.size):
        for b in range(f.size):
            w = f[a] * f[b]
            if w == 0.0:
                continue
            if a == b:
                out[a] += w
                continue
            # the first sampled server precedes the second; the index rule only matters on ties
            p_a = join_probability(scheme, a, b, True)
            out[a] += w * p_a
            out[b] += w * (1.0 - p_a)
    return out


class TestScheme:
    def test_validation(self):
        with pytest.raises(ValueError):
            Scheme.load_independent(1.5)
        with pytest.raises(ValueError):
            Scheme.load_dependent(-1, 0.2)
        with pytest.raises(ValueError):
            Scheme.load_dependent(2, -0.1)

    def test_stability_bounds(self):
        assert Scheme.load_dependent(100, 0.99).stability_bound() == 1.0
        assert Scheme.load_independent(0.8).stability_bound() == pytest.approx(0.625)
        assert Scheme.load_independent(0.4).stability_bound() == 1.0
        assert Scheme.random().stability_bound() == 1.0
        assert not Scheme.load_independent(0.8).is_stable(0.625)

    def test_lipschitz_constants(self):
        assert Scheme.load_dependent(2, 0.8).lipschitz_constant(0.9) == pytest.approx(17.12)
        assert Scheme.load_independent(0.3).lipschitz_constant(0.9) == pytest.approx(5.6)

    def test_queue_bounds(self):
        assert Scheme.load_independent(0.8).queue_bound(0.5) == pytest.approx(2.5)
        assert Scheme.load_independent(0.3).queue_bound(0.5) == pytest.approx(1.0)
        assert Scheme.load_dependent(3, 0.9).queue_bound(0.5) == pytest.approx(4.0)
        assert Scheme.load_dependent(3, 0.4).queue_bound(0.5) == pytest.approx(1.0)

    def test_from_name(self):
        assert Scheme.from_name("po2-g", g=2, eps=0.3) == Scheme.load_dependent(2, 0.3)
        assert Scheme.from_name("random").kind is SchemeKind.RANDOM
        with pytest.raises(ValueError):
            Scheme.from_name("jsq")


class TestJoinProbability:
    def test_examples(self):
        ld = Scheme.load_dependent(2, 0.3)
        assert join_probability(ld, 1, 5, True) == 1.0
        assert join_probability(ld, 3, 1, True) == pytest.approx(0.3)
        for scheme in (ld, Scheme.load_independent(0.6), Scheme.exact_po2()):
            assert join_probability(scheme, 7, 7, True) == 1.0
            assert join_probability(scheme, 7, 7, False) == 0.0
        assert join_probability(Scheme.load_independent(0.8), 5, 2, True) == pytest.approx(0.8)

    def test_random_is_uniform(self):
        for qi, qj in [(0, 0), (3, 9), (9, 3)]:
            assert join_probability(Scheme.random(), qi, qj, True) == 0.5

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            join_probability(Scheme.exact_po2(), -1, 0, True)

    @given(schemes(), q_st, q_st, st.booleans())
    def test_complementary(self, scheme, qi, qj, first):
        total = join_probability(scheme, qi, qj, first) + join_probability(scheme, qj, qi, not first)
        assert total == pytest.approx(1.0)

    @given(g_st, q_st, q_st, st.booleans())
    def test_equivalences_without_error(self, g, qi, qj, first):
        ref = join_probability(Scheme.exact_po2(), qi, qj, first)
        assert join_probability(Scheme.load_dependent(0, 0.7), qi, qj, first) == ref
        assert join_probability(Scheme.load_independent(0.0), qi, qj, first) == ref
        assert join_probability(Scheme.load_dependent(g, 0.0), qi, qj, first) == ref

    @given(st.floats(0.0, 0.5), g_st, q_st, q_st)
    def test_shorter_queue_favoured(self, eps, g, qi, qj):
        if qi >= qj:
            return
        for scheme in (Scheme.load_independent(eps), Scheme.load_dependent(g, eps)):
            assert join_probability(scheme, qi, qj, False) >= 0.5

    @given(schemes(), st.lists(q_st, min_size=2, max_size=8))
    def test_matrix_matches_scalar(self, scheme, q):
        P = join_probability_matrix(scheme, np.array(q))
        for i in range(len(q)):
            for j in range(len(q)):
                want = 0.0 if i == j else join_probability(scheme, q[i], q[j], i < j)
                assert P[i, j] == want


class TestArrivalFraction:
    def test_examples(self):
        for scheme in (Scheme.load_dependent(0, 0.1), Scheme.load_dependent(4, 0.9)):
            assert arrival_fraction(scheme, TailMeasure.empty(5), 1) == 1.0
        s = TailMeasure(np.array([0.8, 0.5]))
        assert arrival_fraction(Scheme.load_independent(0.5), s, 2) == pytest.approx(0.3, abs=1e-15)

    def test_rejects_nonpositive_level(self):
        with pytest.raises(ValueError):
            arrival_fraction(Scheme.exact_po2(), TailMeasure.empty(3), 0)

    def test_beyond_support_is_zero(self):
        assert arrival_fraction(Scheme.exact_po2(), TailMeasure(np.array([0.5, 0.2])), 9) == 0.0

    @given(schemes(), tails())
    def test_sums_to_one(self, scheme, s):
        p = arrival_fractions(scheme, s)
        assert p.min() >= -1e-12
        assert p.sum() == pytest.approx(1.0, abs=1e-12)

    @given(schemes(), tails(max_len=8))
    @settings(max_examples=60)
    def test_matches_level_pair_oracle(self, scheme, s):
        np.testing.assert_allclose(arrival_fractions(scheme, s), level_pair_oracle(scheme, s), atol=1e-12)

    @given(g_st, eps_st, tails())
    def test_quadratic_rewrite_agrees(self, g, eps, s):
        scheme = Scheme.load_dependent(g, eps)
        np.testing.assert_allclose(arrival_fractions(scheme, s), arrival_fractions_quadratic(scheme, s), atol=1e-12)

    @given(eps_st, tails())
    def test_wide_window_is_load_independent(self, eps, s):
        wide = Scheme.load_dependent(s.size + 1, eps)
        np.testing.assert_allclose(
            arrival_fractions(wide, s), arrival_fractions(Scheme.load_independent(eps), s), atol=1e-12
        )

    @given(tails())
    def test_limits(self, s):
        ext = np.concatenate([[1.0], s, [0.0]])
        np.testing.assert_allclose(arrival_fractions(Scheme.random(), s), ext[:-1] - ext[1:], atol=1e-15)
        np.testing.assert_allclose(arrival_fractions(Scheme.exact_po2(), s), ext[:-1] ** 2 - ext[1:] ** 2, atol=1e-15)


class TestTailAndState:
    def test_tail_validation(self):
        with pytest.raises(ValueError):
            TailMeasure(np.array([0.5, 0.7]))
        with pytest.raises(ValueError):
            TailMeasure(np.array([1.2]))
        with pytest.raises(ValueError):
            TailMeasure(np.array([]))

    def test_tail_indexing(self):
        s = TailMeasure(np.array([0.6, 0.3]))
        assert s[0] == 1.0 and s[-3] == 1.0
        assert s[1] == 0.6 and s[2] == 0.3 and s[3] == 0.0
        assert s.l1() == pytest.approx(0.9)
        assert s.with_truncation(1).truncated

    def test_queue_state_validation(self):
        with pytest.raises(ValueError):
            QueueState(np.array([3]))
        with pytest.raises(ValueError):
            QueueState(np.array([1, -1]))
        st_ = QueueState(np.array([2, 0, 5]))
        assert (st_.n, st_.total, st_.busy) == (3, 7, 2)

    def test_empirical_tail_examples(self):
        np.testing.assert_array_equal(empirical_tail(np.array([0, 0, 0]), 3).values, [0, 0, 0])
        np.testing.assert_allclose(empirical_tail(np.array([2, 1, 0, 0]), 3).values, [0.5, 0.25, 0.0])
        with pytest.warns(RuntimeWarning):
            t = empirical_tail(np.array([5, 5]), 3)
        assert t.truncated
        np.testing.assert_array_equal(t.values, [1, 1, 1])

    @given(st.lists(q_st, min_size=2, max_size=30), st.integers(1, 50))
    def test_empirical_tail_count_oracle(self, q, B):
        q = np.array(q)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            t = empirical_tail(q, B)
        want = [np.mean(q >= k) for k in range(1, B + 1)]
        np.testing.assert_allclose(t.values, want)
        assert t.truncated == bool(q.max() > B)
