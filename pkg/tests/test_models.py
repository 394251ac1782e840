import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dosecombo.models import (
    DEFAULT_TRADEOFF,
    DesignConstants,
    DoseDomainError,
    EfficacyParams,
    InvalidGridError,
    InvalidParamsError,
    StandardDoseGrid,
    ToxicityParams,
    UtilityTradeoff,
    efficacy_prob,
    standardize_grid,
    toxicity_prob,
    utility,
)

# Frozen oracle values, each computed by direct evaluation of the closed form
# (cross-checked at 40 digits with mpmath).
TOX_11_EXPECTED = 0.8444444444444444  # expit(logit(.4) + logit(.3) - logit(.05))
EFF_HALF_EXPECTED = 0.5312093733737563  # expit(0.125)
U_MAX_EXPECTED = 0.9997062943441735  # 0.385 * (exp(1.28) - 1)


def valid_tox_params(draw_source=None):
    return st.tuples(
        st.floats(0.01, 0.5), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 3.0)
    ).map(lambda t: ToxicityParams(
        rho00=t[0],
        rho01=t[0] + (0.98 - t[0]) * t[1],
        rho10=t[0] + (0.98 - t[0]) * t[2],
        eta=t[3],
    ))


class TestStandardizeGrid:
    def test_affine_map(self):
        g = standardize_grid([10, 20, 30, 40], [0, 1])
        assert g.x_levels == (0.0, 1 / 3, 2 / 3, 1.0)
        assert g.y_levels == (0.0, 1.0)

    def test_identity_case(self):
        g = standardize_grid([0, 1], [0, 1])
        assert g.x_levels == (0.0, 1.0)

    def test_non_increasing_rejected(self):
        with pytest.raises(InvalidGridError):
            standardize_grid([5, 5, 6], [0, 1])
        with pytest.raises(InvalidGridError):
            standardize_grid([1, 2], [3])

    def test_endpoints_pinned(self):
        g = standardize_grid([2.5, 7.1, 19.0], [1, 4, 9, 16])
        assert g.x_levels[0] == 0.0 and g.x_levels[-1] == 1.0
        assert g.y_levels[0] == 0.0 and g.y_levels[-1] == 1.0
        assert all(b > a for a, b in zip(g.x_levels, g.x_levels[1:]))


class TestToxicityProb:
    def setup_method(self):
        self.p = ToxicityParams(rho00=0.05, rho01=0.3, rho10=0.4, eta=0.0)

    def test_corner_identities(self):
        assert toxicity_prob(self.p, 0, 0) == pytest.approx(0.05, rel=1e-12)
        assert toxicity_prob(self.p, 1, 0) == pytest.approx(0.40, rel=1e-12)
        assert toxicity_prob(self.p, 0, 1) == pytest.approx(0.30, rel=1e-12)

    def test_interior_value(self):
        assert toxicity_prob(self.p, 1, 1) == pytest.approx(TOX_11_EXPECTED, rel=1e-12)

    def test_domain_error(self):
        with pytest.raises(DoseDomainError):
            toxicity_prob(self.p, 1.2, 0.0)
        with pytest.raises(DoseDomainError):
            toxicity_prob(self.p, 0.0, -0.1)

    @given(valid_tox_params())
    @settings(max_examples=60)
    def test_corners_for_random_params(self, p):
        assert toxicity_prob(p, 0, 0) == pytest.approx(p.rho00, rel=1e-9)
        assert toxicity_prob(p, 1, 0) == pytest.approx(p.rho10, rel=1e-9)
        assert toxicity_prob(p, 0, 1) == pytest.approx(p.rho01, rel=1e-9)

    @given(valid_tox_params(), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=60)
    def test_monotone_in_each_dose(self, p, a, b, other):
        lo, hi = min(a, b), max(a, b)
        assert toxicity_prob(p, lo, other) <= toxicity_prob(p, hi, other) + 1e-15
        assert toxicity_prob(p, other, lo) <= toxicity_prob(p, other, hi) + 1e-15

    def test_pure(self):
        v1 = toxicity_prob(self.p, 0.37, 0.81)
        v2 = toxicity_prob(self.p, 0.37, 0.81)
        assert v1 == v2


class TestEfficacyProb:
    def test_flat_spline_is_half(self):
        p = EfficacyParams.from_named([0.0] * 12, 0.3, 0.6, 0.3, 0.6)
        for x, y in [(0, 0), (0.5, 0.25), (1, 1)]:
            assert efficacy_prob(p, x, y) == 0.5

    def test_single_cubic_term(self):
        beta = [0.0] * 12
        beta[3] = 1.0
        p = EfficacyParams.from_named(beta, 0.3, 0.6, 0.3, 0.6)
        assert efficacy_prob(p, 0.5, 0.9) == pytest.approx(EFF_HALF_EXPECTED, rel=1e-12)

    def test_truncation_below_knot(self):
        beta = [0.0] * 12
        beta[4] = 1.0  # active only above its knot at 0.7
        p = EfficacyParams.from_named(beta, 0.7, 0.9, 0.3, 0.6)
        assert efficacy_prob(p, 0.5, 0.0) == 0.5
        assert efficacy_prob(p, 0.8, 0.0) > 0.5

    def test_knot_order_violation(self):
        with pytest.raises(InvalidParamsError):
            efficacy_prob(EfficacyParams.from_named([0.0] * 12, 0.6, 0.3, 0.3, 0.6), 0.5, 0.5)

    def test_domain_error(self):
        p = EfficacyParams.from_named([0.0] * 12, 0.3, 0.6, 0.3, 0.6)
        with pytest.raises(DoseDomainError):
            efficacy_prob(p, 0.0, 1.5)

    @pytest.mark.parametrize("knot_index", [1, 2, 4, 5])
    def test_smooth_across_knots(self, knot_index):
        # First and second derivatives must agree across each knot. A break in
        # C2 (e.g. a squared instead of cubed truncated term) would shift the
        # one-sided second-derivative estimates by orders of magnitude more
        # than the tolerance.
        beta = [0.0, 0.02, -0.02, 0.01, 0.012, -0.008, 0.015, -0.01, 0.009, 0.011, -0.007, 0.005]
        p = EfficacyParams.from_named(beta, 0.35, 0.72, 0.28, 0.64)
        k = p.knots[knot_index]
        axis = "x" if knot_index in (1, 2) else "y"
        eps = 1e-3
        h = eps / 2

        def f(v):
            return efficacy_prob(p, v, 0.41) if axis == "x" else efficacy_prob(p, 0.41, v)

        def d1(v):
            return (f(v + h) - f(v - h)) / (2 * h)

        def d2(v):
            return (f(v + h) - 2 * f(v) + f(v - h)) / h**2

        assert abs(d1(k + eps) - d1(k - eps)) < 1e-4
        assert abs(d2(k + eps) - d2(k - eps)) < 1e-4


class TestUtility:
    def test_zero_at_no_efficacy(self):
        assert utility(0.0, 0.0, DEFAULT_TRADEOFF) == 0.0

    def test_indicator_above_bound(self):
        assert utility(0.31, 1.0, DEFAULT_TRADEOFF) == 0.0

    def test_maximum_anchor(self):
        assert utility(0.0, 1.0, DEFAULT_TRADEOFF) == pytest.approx(U_MAX_EXPECTED, abs=1e-12)

    def test_linear_factor_at_bound(self):
        expected = 0.368 * U_MAX_EXPECTED
        assert utility(0.3, 1.0, DEFAULT_TRADEOFF) == pytest.approx(expected, rel=1e-12)

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=80)
    def test_monotone(self, a, b, other):
        t = DEFAULT_TRADEOFF
        lo, hi = min(a, b), max(a, b)
        # nonincreasing in toxicity on [0, theta_T]
        if hi <= t.theta_T:
            assert utility(lo, other, t) >= utility(hi, other, t) - 1e-15
        # increasing in efficacy for fixed safe toxicity
        assert utility(0.1, lo, t) <= utility(0.1, hi, t) + 1e-15

    @given(st.floats(0, 1).filter(lambda v: v > 0.3), st.floats(0, 1))
    @settings(max_examples=40)
    def test_zero_above_bound(self, pi_t, pi_e):
        assert utility(pi_t, pi_e, DEFAULT_TRADEOFF) == 0.0

    def test_nonnegative_on_unit_square(self):
        ts = np.linspace(0, 1, 31)
        vals = utility(*np.meshgrid(ts, ts), DEFAULT_TRADEOFF)
        assert np.all(vals >= 0.0)

    def test_tradeoff_validation(self):
        with pytest.raises(InvalidParamsError):
            UtilityTradeoff(0.3, 0.4, 1.0, -0.4, theta_T=1.5).validate()
        with pytest.raises(InvalidParamsError):
            UtilityTradeoff(0.3, -0.1, 1.0, -0.4, theta_T=0.3).validate()


class TestDesignConstants:
    def test_defaults_consistent(self):
        d = DesignConstants().validate()
        assert d.n1_total == 30
        assert d.n2_total == 66
        assert d.n_total == 96

    def test_invalid_thresholds(self):
        with pytest.raises(InvalidParamsError):
            DesignConstants(delta1=0.0).validate()
        with pytest.raises(InvalidParamsError):
            DesignConstants(alpha_step=0.0).validate()
        with pytest.raises(InvalidParamsError):
            DesignConstants(alpha_start=0.6, alpha_stop=0.7).validate()


class TestParamValidation:
    def test_toxicity_support(self):
        assert ToxicityParams(0.05, 0.3, 0.4, 0.0).is_valid()
        assert not ToxicityParams(0.5, 0.3, 0.4, 0.0).is_valid()
        assert not ToxicityParams(0.05, 0.3, 0.4, -0.1).is_valid()
        with pytest.raises(InvalidParamsError):
            ToxicityParams(0.5, 0.3, 0.4, 0.0).validate()

    def test_efficacy_shapes(self):
        with pytest.raises(InvalidParamsError):
            EfficacyParams(beta=(0.0,) * 11, knots=(0.0, 0.3, 0.6, 0.0, 0.3, 0.6))
        with pytest.raises(InvalidParamsError):
            EfficacyParams(beta=(0.0,) * 12, knots=(0.1, 0.3, 0.6, 0.0, 0.3, 0.6)).validate()
