"""
ダッシュボード構築・入札・推定のテスト
"""
import json
import logging

import numpy as np
import pytest

from src.utils.dashboards import (
    DashboardPolicy,
    PolicyKind,
    RuleHistory,
    average_rules,
    build_dashboard,
    dashboard_alloc,
    dashboard_bid,
    dashboard_from_curve,
    dashboard_infer,
    make_dashboard,
)
from src.utils.rulekit import BidCurve, DomainError, MonotoneRule, NonInvertibleError, PaymentFormat

WPB = PaymentFormat.WINNER_PAYS_BID
ALL_PAY = PaymentFormat.ALL_PAY


@pytest.fixture
def identity_rule():
    return MonotoneRule.linear(1.0)


@pytest.fixture
def square_rule():
    return MonotoneRule.from_function(lambda v: v * v, 1.0)


def _history(rules, wins=None):
    history = RuleHistory()
    wins = wins or [True] * len(rules)
    for rule, won in zip(rules, wins):
        history.append(rule, won)
    return history


# ---- policies ---------------------------------------------------------------

def test_k_lookback_averages_pointwise(identity_rule, square_rule):
    history = _history([MonotoneRule.from_function(lambda v: 0.5 + 0.5 * v, 1.0), identity_rule, square_rule])
    d = build_dashboard(DashboardPolicy(PolicyKind.K_LOOKBACK, k=2), history, WPB)
    v = identity_rule.values
    np.testing.assert_allclose(d.ealloc.probs, (identity_rule.probs + v * v) / 2)
    assert d.stage_index == 4
    assert not d.fallback


def test_last_winning_stage_uses_latest_win(identity_rule, square_rule):
    rules = [identity_rule, MonotoneRule.from_function(lambda v: 0.5 + 0.5 * v, 1.0), square_rule, identity_rule]
    history = _history(rules, wins=[True, False, True, False])
    d = build_dashboard(DashboardPolicy(PolicyKind.LAST_WINNING_STAGE), history, WPB)
    assert d.ealloc is square_rule


def test_last_winning_stage_without_wins_falls_back(identity_rule):
    initial = MonotoneRule.from_function(lambda v: 0.1 + 0.9 * v, 1.0)
    policy = DashboardPolicy(PolicyKind.LAST_WINNING_STAGE, initial_rule=initial)
    d = build_dashboard(policy, _history([identity_rule], wins=[False]), WPB)
    assert d.fallback
    assert d.ealloc is initial


def test_fallback_after_first_stage_logs_warning(identity_rule, caplog):
    policy = DashboardPolicy(PolicyKind.LAST_WINNING_STAGE)
    history = _history([identity_rule, identity_rule], wins=[False, False])
    with caplog.at_level(logging.WARNING, logger="src.utils.dashboards"):
        d = build_dashboard(policy, history, WPB)
    assert d.fallback
    warned = [r for r in caplog.records if r.levelno == logging.WARNING]
    assert any("Stage 3: no history selected by last_winning_stage" in r.getMessage() for r in warned)


def test_first_stage_uses_linear_initial_rule():
    d = build_dashboard(DashboardPolicy(PolicyKind.INFERRED_VALUES_ALL), RuleHistory(), ALL_PAY, vmax=2.0)
    assert d.fallback
    assert d.stage_index == 1
    assert d.ealloc(1.0) == pytest.approx(0.5)


def test_first_stage_needs_vmax():
    with pytest.raises(DomainError):
        build_dashboard(DashboardPolicy(PolicyKind.LAST_STAGE), RuleHistory(), WPB)


def test_last_stage_is_one_step_lookback():
    assert DashboardPolicy(PolicyKind.LAST_STAGE, k=5).k == 1
    with pytest.raises(DomainError):
        DashboardPolicy(PolicyKind.K_LOOKBACK, k=0)


@pytest.mark.parametrize("kind", list(PolicyKind))
def test_static_history_is_a_fixed_point(kind, square_rule):
    history = _history([square_rule] * 3)
    d = build_dashboard(DashboardPolicy(kind, k=2), history, WPB)
    np.testing.assert_allclose(d.ealloc.probs, square_rule.probs, atol=1e-15)


def test_averaging_preserves_strictness(identity_rule, square_rule):
    mean = average_rules([identity_rule, square_rule])
    assert mean.strict
    np.testing.assert_allclose(mean.slopes, (identity_rule.slopes + square_rule.slopes) / 2)


def test_history_rejects_mixed_vmax(identity_rule):
    history = _history([identity_rule])
    with pytest.raises(DomainError):
        history.append(MonotoneRule.linear(2.0), True)


# ---- bidding and inference --------------------------------------------------

def test_follow_bid_on_identity_rule(identity_rule):
    d = make_dashboard(identity_rule, WPB)
    assert dashboard_bid(d, 0.5) == pytest.approx(0.25)
    assert dashboard_bid(d, 0.0) == 0.0


def test_all_pay_bid_with_transfer(identity_rule):
    # 0.5·0.5 − 0.125 + 0.2
    d = make_dashboard(identity_rule, ALL_PAY, transfer=0.2)
    assert dashboard_bid(d, 0.5) == pytest.approx(0.325)


@pytest.mark.parametrize("fmt", [WPB, ALL_PAY])
def test_infer_inverts_dashboard_bid(fmt, square_rule):
    d = make_dashboard(square_rule, fmt)
    v = np.array([0.1, 0.45, 0.9])
    inf = dashboard_infer(d, dashboard_bid(d, v))
    np.testing.assert_allclose(inf.value, v, atol=1e-6)
    assert not inf.extrapolated.any()


def test_infer_below_range_clamps_with_flag(identity_rule):
    d = make_dashboard(identity_rule, WPB)
    inf = dashboard_infer(d, -0.1)
    assert inf.value == 0.0
    assert inf.extrapolated


def test_proportional_share_curve_inference():
    # 相手の推定価値 2 の比例配分 b/(b+2)
    curve = BidCurve(lambda b: b / (b + 2.0), WPB, 0.0, 5.0, deriv_fn=lambda b: 2.0 / (b + 2.0) ** 2)
    ealloc = MonotoneRule.from_function(lambda v: v / (v + 2.0), 5.0)
    d = dashboard_from_curve(curve, ealloc, stage_index=3)
    assert dashboard_infer(d, 1.0).value == pytest.approx(2.5)
    assert dashboard_alloc(d, 1.0) == pytest.approx(1.0 / 3.0)


def test_non_invertible_dashboard_is_flagged(identity_rule):
    d = make_dashboard(identity_rule, WPB, transfer=0.1)
    assert d.non_invertible
    assert d.bid_rule is None
    with pytest.raises(NonInvertibleError):
        dashboard_infer(d, 0.2)


def test_dashboard_serializes_knots(square_rule):
    d = make_dashboard(square_rule, ALL_PAY, transfer=0.05, stage_index=7)
    data = json.loads(d.dumps())
    assert data["stage"] == 7
    assert data["format"] == "all_pay"
    assert data["transfer"] == 0.05
    assert len(data["knots"]) == len(square_rule.values)
    assert data["id"] == d.fingerprint
    assert make_dashboard(square_rule, ALL_PAY, transfer=0.05).fingerprint == d.fingerprint
