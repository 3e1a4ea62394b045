"""
配分ルール・支払い恒等式・入札戦略の逆変換のテスト
"""
import math

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st
from scipy.integrate import quad

from src.config import settings
from src.utils.rulekit import (
    BidCurve,
    DegenerateError,
    DomainError,
    MonotoneRule,
    NoWinRegionError,
    NonInvertibleError,
    PaymentFormat,
    bid_strategy,
    cumulative,
    evaluate,
    infer_value_foc,
    invert_strategy,
    linear_tail_slope,
    linear_tail_slope_closed,
    make_bid_rule,
    scale_rule,
    truthful_payment,
)

WPB = PaymentFormat.WINNER_PAYS_BID
ALL_PAY = PaymentFormat.ALL_PAY
VMAX = 5.0


def sqrt_rule(v):
    return 1.0 - 2.0 / np.sqrt(4.0 + 2.0 * v)


@pytest.fixture(scope="module")
def smooth_rule():
    return MonotoneRule.from_function(sqrt_rule, VMAX)


@pytest.fixture(scope="module")
def linear_rule():
    return MonotoneRule.linear(VMAX)


# ---- MonotoneRule ---------------------------------------------------------

def test_rule_rejects_decreasing_probs():
    with pytest.raises(DomainError, match="decrease"):
        MonotoneRule.from_knots([[0, 0.1], [1, 0.5], [2, 0.4]])


def test_strict_rule_rejects_flat_segment():
    with pytest.raises(DomainError, match="strictly monotone"):
        MonotoneRule.from_knots([[0, 0.1], [1, 0.5], [2, 0.5]])
    relaxed = MonotoneRule.from_knots([[0, 0.1], [1, 0.5], [2, 0.5]], strict=False)
    assert relaxed(1.5) == pytest.approx(0.5)


def test_rule_requires_first_knot_at_zero():
    with pytest.raises(DomainError, match="first knot"):
        MonotoneRule.from_knots([[0.5, 0.1], [1, 0.5]])


def test_evaluate_is_constant_past_last_knot(linear_rule):
    assert evaluate(linear_rule, VMAX * 2) == pytest.approx(1.0)
    with pytest.raises(DomainError):
        evaluate(linear_rule, -0.1)


def test_fingerprint_depends_on_knots(linear_rule):
    same = MonotoneRule.linear(VMAX)
    other = MonotoneRule.linear(VMAX, grid=513)
    assert linear_rule.fingerprint == same.fingerprint
    assert linear_rule.fingerprint != other.fingerprint


# ---- payment identity -----------------------------------------------------

@given(st.floats(min_value=0.0, max_value=VMAX))
def test_cumulative_of_linear_rule_is_exact(v):
    rule = MonotoneRule.linear(VMAX, grid=65, min_slope=0.0)
    assert cumulative(rule, v) == pytest.approx(v * v / (2 * VMAX), abs=1e-12)


@pytest.mark.parametrize("v", [0.3, 1.0, 2.5, 4.9])
def test_truthful_payment_matches_quadrature(smooth_rule, v):
    integral, _ = quad(sqrt_rule, 0.0, v)
    expected = v * sqrt_rule(v) - integral
    assert truthful_payment(smooth_rule, v) == pytest.approx(expected, abs=1e-5)


def test_truthful_payment_adds_transfer(smooth_rule):
    assert truthful_payment(smooth_rule, 2.0, transfer=0.3) == pytest.approx(
        truthful_payment(smooth_rule, 2.0) + 0.3
    )


# ---- bid strategies -------------------------------------------------------

def test_winner_pays_bid_strategy_on_sqrt_rule(smooth_rule):
    # ∫₀^2.5 x = 0.5, x(2.5) = 1/3 → 2.5 − 1.5
    assert bid_strategy(smooth_rule, 2.5, WPB) == pytest.approx(1.0, abs=1e-4)


def test_all_pay_strategy_equals_truthful_payment(smooth_rule):
    v = np.linspace(0.0, VMAX, 11)
    np.testing.assert_allclose(bid_strategy(smooth_rule, v, ALL_PAY), truthful_payment(smooth_rule, v))


def test_no_win_region_raises():
    rule = MonotoneRule.from_knots([[0, 0], [1, 0], [VMAX, 1]], strict=False)
    assert bid_strategy(rule, 0.0, WPB) == 0.0
    with pytest.raises(NoWinRegionError):
        bid_strategy(rule, 0.5, WPB)


@pytest.mark.parametrize("alpha", [0.1, 0.5, 0.9])
def test_scaling_rule_keeps_winner_pays_bid_strategy(smooth_rule, alpha):
    v = np.linspace(0.5, VMAX - 0.5, 7)
    scaled = scale_rule(smooth_rule, alpha)
    np.testing.assert_allclose(scaled.probs, alpha * smooth_rule.probs)
    np.testing.assert_allclose(bid_strategy(scaled, v, WPB), bid_strategy(smooth_rule, v, WPB), rtol=1e-9)
    b = make_bid_rule(smooth_rule, WPB).strategy(v)
    np.testing.assert_allclose(infer_value_foc(make_bid_rule(scaled, WPB), b).value, v, atol=settings.FOC_TOL * VMAX)


def test_scaling_rule_rejects_probabilities_above_one(smooth_rule):
    with pytest.raises(DomainError):
        scale_rule(smooth_rule, 4.0)
    with pytest.raises(DomainError):
        scale_rule(smooth_rule, 0.0)


def test_winner_pays_bid_with_positive_transfer_is_not_invertible(linear_rule):
    with pytest.raises(NonInvertibleError) as exc:
        make_bid_rule(linear_rule, WPB, transfer=0.1)
    lo, hi = exc.value.segment
    assert 0.0 <= lo < hi <= VMAX


def test_negative_transfer_stays_invertible(linear_rule):
    bid_rule = make_bid_rule(linear_rule, WPB, transfer=-0.2)
    assert np.all(np.diff(bid_rule.bids) > 0)


# ---- inversion ------------------------------------------------------------

@hsettings(max_examples=50, deadline=None)
@given(st.floats(min_value=0.05, max_value=VMAX), st.sampled_from([WPB, ALL_PAY]))
def test_invert_strategy_round_trip(v, fmt):
    rule = MonotoneRule.from_function(sqrt_rule, VMAX, grid=257)
    bid_rule = make_bid_rule(rule, fmt)
    inf = invert_strategy(bid_rule, bid_rule.strategy(v))
    assert not inf.extrapolated
    assert inf.value == pytest.approx(v, abs=1e-6 * VMAX)


def test_out_of_range_bids_are_clamped(linear_rule):
    bid_rule = make_bid_rule(linear_rule, ALL_PAY)
    lo_b, hi_b = bid_rule.bid_range
    inf = invert_strategy(bid_rule, np.array([lo_b - 1.0, hi_b + 1.0]))
    assert inf.extrapolated.tolist() == [True, True]
    np.testing.assert_allclose(inf.value, [bid_rule.domain_start, VMAX])


def test_bid_space_allocation_composes_with_strategy(smooth_rule):
    bid_rule = make_bid_rule(smooth_rule, WPB)
    for v in (1.0, 2.5, 4.0):
        assert bid_rule.alloc(bid_rule.strategy(v)) == pytest.approx(sqrt_rule(v), abs=1e-5)
        b = bid_rule.strategy(v)
        assert bid_rule.payment(b) == pytest.approx(b * bid_rule.alloc(b))


# ---- first-order inference --------------------------------------------------

def test_foc_inference_on_explicit_curve():
    curve = BidCurve(
        alloc_fn=lambda b: b / (b + 2.0),
        format=WPB,
        bid_lo=0.0,
        bid_hi=VMAX,
        deriv_fn=lambda b: 2.0 / (b + 2.0) ** 2,
    )
    inf = infer_value_foc(curve, 1.0)
    assert inf.value == pytest.approx(2.5)
    assert not inf.extrapolated


def test_foc_inference_on_all_pay_root_curve():
    # x̃(b) = √(2b) は x(v) = v の all-pay 入札配分、1/x̃′(0.125) = 0.5
    curve = BidCurve(
        alloc_fn=lambda b: np.sqrt(2.0 * np.maximum(b, 0.0)),
        format=ALL_PAY,
        bid_lo=0.0,
        bid_hi=0.5,
    )
    assert infer_value_foc(curve, 0.125).value == pytest.approx(0.5, abs=1e-6)
    bid_rule = make_bid_rule(MonotoneRule.linear(1.0), ALL_PAY)
    assert infer_value_foc(bid_rule, 0.125).value == pytest.approx(0.5, abs=1e-6)


@pytest.mark.parametrize("fmt", [WPB, ALL_PAY])
def test_foc_inference_agrees_with_bisection(smooth_rule, fmt):
    bid_rule = make_bid_rule(smooth_rule, fmt)
    v = np.linspace(0.25, VMAX - 0.25, 37)
    b = bid_rule.strategy(v)
    foc = infer_value_foc(bid_rule, b).value
    bisection = invert_strategy(bid_rule, b).value
    assert np.max(np.abs(foc - bisection)) <= settings.FOC_TOL * VMAX
    np.testing.assert_allclose(bisection, v, atol=settings.ROUND_TRIP_TOL * VMAX)


# ---- linear tail ------------------------------------------------------------

def test_linear_tail_slope_at_zero_offset():
    # β = 0 で X/(V − B)
    V, X, P, delta = 2.0, 0.4, 0.2, 0.3
    B = P / X
    assert linear_tail_slope_closed(V, X, P, delta) == pytest.approx(X / (V - B))
    assert linear_tail_slope(V, X, P, delta) == pytest.approx(X / (V - B), rel=1e-4)


@given(st.floats(min_value=0.01, max_value=1.0))
def test_linear_tail_slope_matches_closed_form(beta):
    V, X, P, delta = 3.0, 0.5, 0.5, 0.2
    assert linear_tail_slope(V, X, P, delta, beta) == pytest.approx(
        linear_tail_slope_closed(V, X, P, delta, beta), rel=1e-4
    )


def test_linear_tail_degenerate_when_payment_exhausts_value():
    with pytest.raises(DegenerateError):
        linear_tail_slope_closed(1.0, 0.5, 0.5, 0.2)
    assert math.isfinite(linear_tail_slope_closed(1.0, 0.5, 0.4, 0.2))
