from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisy_po2.fixedpoint import (
    Method,
    coupled_equation_residuals,
    fixed_point,
    fixed_point_eps,
    fixed_point_g,
    heavy_traffic_ratio,
    heavy_traffic_reference,
    mean_response_time,
    z_star,
    z_star_norm,
)
from noisy_po2.meanfield import drift
from noisy_po2.model import Scheme, UnstableError


def po2_tail(lam: float, n: int) -> np.ndarray:
    return lam ** (2.0 ** np.arange(1, n + 1) - 1.0)


class TestRecursion:
    def test_classic_po2(self):
        fp = fixed_point_eps(0.9, 0.0)
        np.testing.assert_allclose(fp.x[:3], [0.9, 0.729, 0.4782969], atol=1e-15)
        assert fp.method is Method.RECURSION

    def test_half_error_is_geometric(self):
        fp = fixed_point_eps(0.8, 0.5)
        np.testing.assert_allclose(fp.x, 0.8 ** np.arange(1, fp.x.size + 1), atol=1e-12)

    def test_outside_stability_rejected(self):
        with pytest.raises(UnstableError, match="1/\\(2\\*eps\\)"):
            fixed_point_eps(0.9, 0.6)
        with pytest.raises(UnstableError):
            fixed_point_eps(1.0, 0.1)

    @given(st.floats(0.01, 0.99), st.floats(0.0, 0.5))
    def test_residual_and_cutoff(self, lam, eps):
        fp = fixed_point_eps(lam, eps)
        scheme = Scheme.load_independent(eps) if eps > 0 else Scheme.exact_po2()
        assert fp.residual_l1 <= fp.tol
        assert np.abs(drift(scheme, fp.x, lam)).sum() == pytest.approx(fp.residual_l1)
        assert fp.x[0] == lam and np.all(np.diff(fp.x) <= 0)

    @given(st.floats(0.05, 0.95))
    def test_norm_nondecreasing_in_eps(self, lam):
        eps_grid = [e for e in np.linspace(0.0, 0.5, 11) if lam < 1.0 / max(1.0, 2.0 * e)]
        norms = [fixed_point_eps(lam, e, tol=1e-14).mean_queue() for e in eps_grid]
        assert np.all(np.diff(norms) >= -1e-12)

    def test_random(self):
        fp = fixed_point(Scheme.random(), 0.5)
        np.testing.assert_allclose(fp.x, 0.5 ** np.arange(1, fp.x.size + 1))


class TestZStar:
    def test_examples(self):
        z = z_star(0.5, 0)
        np.testing.assert_allclose(z.values[:3], [0.5, 0.125, 0.0078125])
        series = sum(0.5 ** (2.0**i - 1.0) for i in range(1, 8))
        assert z.l1() == pytest.approx(series, abs=1e-12)
        assert round(z.l1(), 4) == 0.6328
        z1 = z_star(0.5, 1)
        np.testing.assert_allclose(z1.values[:4], [0.5, 0.5, 0.125, 0.125])
        assert z1.l1() == pytest.approx(2 * z.l1(), abs=1e-15)

    def test_small_load(self):
        for g in range(4):
            z = z_star(1e-4, g)
            assert z[1] == 1e-4
            assert z.l1() == pytest.approx((g + 1) * 1e-4, rel=1e-3)

    @given(st.floats(0.05, 0.95), st.integers(0, 6))
    def test_norm_identity(self, lam, g):
        assert z_star(lam, g, tol=1e-18).l1() == pytest.approx(z_star_norm(lam, g), abs=1e-12)

    def test_rejects(self):
        with pytest.raises(ValueError):
            z_star(1.0, 0)
        with pytest.raises(ValueError):
            z_star(0.5, -1)


class TestLoadDependent:
    def test_no_window_matches_po2(self):
        fp = fixed_point_g(0.9, 0, 0.7)
        ref = fixed_point_eps(0.9, 0.0, tol=1e-14)
        np.testing.assert_allclose(fp.x, ref.tail.padded(fp.x.size), atol=10 * fp.tol)

    def test_wide_window_matches_load_independent(self):
        # levels beyond the support never see a gap larger than g
        ref = fixed_point_eps(0.6, 0.3, tol=1e-14)
        fp = fixed_point_g(0.6, ref.x.size + 2, 0.3, B=ref.x.size + 5)
        np.testing.assert_allclose(fp.x, ref.tail.padded(fp.x.size), atol=1e-7)

    def test_heavy_error_example(self):
        fp = fixed_point_g(0.95, 2, 1.0)
        assert fp.x[0] == pytest.approx(0.95, abs=fp.tol)
        i = np.arange(1, 40)
        assert fp.mean_queue() <= 3 * np.sum(0.95 ** (2.0**i - 1.0))

    @pytest.mark.parametrize("g,eps", [(1, 0.3), (3, 0.9), (4, 0.5)])
    def test_coupled_equations_and_domination(self, g, eps):
        fp = fixed_point_g(0.8, g, eps)
        assert fp.residual_l1 < fp.tol
        assert np.abs(coupled_equation_residuals(fp.x, 0.8, g, eps)).max() <= 10 * fp.tol
        assert np.all(fp.x <= z_star(0.8, g).padded(fp.x.size) + 10 * fp.tol)

    def test_unique_from_other_start(self):
        a = fixed_point_g(0.85, 2, 0.6)
        start = z_star(0.85, 2).values
        b = fixed_point_g(0.85, 2, 0.6, start=start, B=a.x.size)
        np.testing.assert_allclose(a.x, b.x, atol=1e-7)

    def test_coupled_residuals_vanish_for_recursion(self):
        # g = 0: the coupled equation reduces to x_k = lam x_{k-1}^2
        x = po2_tail(0.7, 8)
        np.testing.assert_allclose(coupled_equation_residuals(x, 0.7, 0, 0.4)[:-1], 0.0, atol=1e-15)

    def test_unstable(self):
        with pytest.raises(UnstableError):
            fixed_point_g(1.0, 2, 0.3)


class TestResponseTime:
    def test_geometric(self):
        assert mean_response_time(fixed_point_eps(0.8, 0.5, tol=1e-15)) == pytest.approx(5.0, abs=1e-12)

    @given(st.floats(0.05, 0.95))
    def test_po2_series(self, lam):
        fp = fixed_point_eps(lam, 0.0, tol=1e-15)
        assert mean_response_time(fp) == pytest.approx(po2_tail(lam, 60).sum() / lam, abs=1e-12)

    def test_light_load(self):
        for scheme in (Scheme.exact_po2(), Scheme.load_independent(0.9), Scheme.random()):
            assert mean_response_time(fixed_point(scheme, 1e-4)) == pytest.approx(1.0, abs=1e-3)


class TestHeavyTraffic:
    def test_references(self):
        assert heavy_traffic_reference(Scheme.exact_po2()) == pytest.approx(1 / math.log(2))
        assert heavy_traffic_reference(Scheme.load_independent(0.25)) == pytest.approx(2.4663, abs=1e-4)
        assert heavy_traffic_reference(Scheme.load_dependent(2, 0.5)) == pytest.approx(3 / math.log(2))
        assert math.isinf(heavy_traffic_reference(Scheme.load_independent(0.5)))

    def test_ratio_row(self):
        (row,) = heavy_traffic_ratio(Scheme.exact_po2(), [0.9])
        assert row.T1 == pytest.approx(10.0)
        assert row.T2 == pytest.approx(po2_tail(0.9, 60).sum() / 0.9)
        assert row.ratio == pytest.approx(row.T2 / math.log(10.0))

    def test_gap_to_limit_shrinks(self):
        lams = [0.9, 0.99, 0.999, 0.9999]
        for eps in (0.0, 0.25):
            rows = heavy_traffic_ratio(Scheme.load_independent(eps) if eps else Scheme.exact_po2(), lams)
            gaps = [abs(r.ratio - r.reference) / r.reference for r in rows]
            assert np.all(np.diff(gaps) < 0)

    def test_rejects_unstable(self):
        with pytest.raises(UnstableError):
            heavy_traffic_ratio(Scheme.load_independent(0.8), [0.7])

    @settings(max_examples=5, deadline=None)
    @given(st.integers(0, 2), st.floats(0.0, 1.0))
    def test_load_dependent_upper_bound(self, g, eps):
        (row,) = heavy_traffic_ratio(Scheme.load_dependent(g, eps), [0.99])
        assert row.ratio <= row.reference
