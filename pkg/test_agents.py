"""
エージェント戦略と Hedge 学習器のテスト
"""
import math

import numpy as np
import pytest
from scipy.stats import chi2

from src.utils.agents import (
    AgentSpec,
    ConstantBid,
    FollowDashboard,
    HedgeLearner,
    LearnerState,
    ValuePath,
    act,
    fixed_hedge_rate,
    hedge_rate,
    learner_update,
    realized_alloc_fn,
    run_static_learner,
    stage_utilities,
)
from src.experiment import ExperimentConfig
from src.utils.dashboards import dashboard_bid, make_dashboard
from src.utils.rulekit import DomainError, MonotoneRule, PaymentFormat

WPB = PaymentFormat.WINNER_PAYS_BID
ALL_PAY = PaymentFormat.ALL_PAY


@pytest.fixture
def identity_dashboard():
    return make_dashboard(MonotoneRule.linear(1.0), WPB)


def _run_hedge(utilities_at, stages, arms):
    """期待効用ベースの後悔 max_a Σu_a − Σ w·u を t で割って返す"""
    state = LearnerState(np.zeros(arms), np.zeros(arms), 0)
    earned = 0.0
    for s in range(stages):
        u = utilities_at(s)
        earned += float(state.weights @ u)
        state = learner_update(state, u, scale=2.0)
    return (float(state.cumulative.max()) - earned) / stages, state


# ---- strategies ------------------------------------------------------------------

def test_follow_dashboard_bids_optimal_bid(identity_dashboard):
    spec = AgentSpec(ValuePath("static", 0.5))
    assert act(spec, identity_dashboard, 0.5) == pytest.approx(0.25)


def test_constant_bid_ignores_dashboard(identity_dashboard):
    spec = AgentSpec(ValuePath("static", 0.5), ConstantBid(0.3))
    for v in (0.1, 0.9):
        assert act(spec, identity_dashboard, v) == 0.3


def test_hedge_first_stage_is_uniform_over_grid():
    learner = HedgeLearner(1.0)
    rng = np.random.default_rng(0)
    draws = 10000
    bids = np.array([learner.act(None, 0.5, rng) for _ in range(draws)])
    assert set(np.unique(bids)) <= set(learner.grid)
    counts = np.bincount(np.rint(bids * (len(learner.grid) - 1)).astype(int), minlength=len(learner.grid))
    expected = draws / len(learner.grid)
    stat = float(((counts - expected) ** 2 / expected).sum())
    assert stat <= chi2.ppf(0.999, len(learner.grid) - 1)


def test_hedge_needs_two_arms():
    with pytest.raises(DomainError):
        HedgeLearner(1.0, arms=1)


def test_seeded_hedge_reproduces_bids():
    utilities = np.linspace(0.0, 0.2, 17)
    first, second = HedgeLearner(1.0, 17, seed=4), HedgeLearner(1.0, 17, seed=4)
    bids = []
    for s in range(50):
        # 学習器のシードがあれば渡された乱数列は使わない
        a = first.act(None, 0.5, np.random.default_rng(s))
        b = second.act(None, 0.5, np.random.default_rng(1000 + s))
        bids.append((a, b))
        first.update(utilities)
        second.update(utilities)
    assert all(a == b for a, b in bids)


def test_fixed_rate_schedule_is_constant():
    rate = fixed_hedge_rate(100)
    assert rate(1, 257) == rate(50, 257) == pytest.approx(hedge_rate(100, 257))
    with pytest.raises(DomainError):
        fixed_hedge_rate(0)


def test_learner_uses_its_rate_schedule():
    frozen = HedgeLearner(1.0, 3, rate=lambda t, arms: 0.0)
    frozen.update(np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(frozen.state.weights, 1.0 / 3.0)
    state = LearnerState(np.zeros(2), np.zeros(2), 0)
    after = learner_update(state, np.array([1.0, 0.0]), scale=2.0, rate=lambda t, arms: 2.0)
    assert after.log_weights[0] - after.log_weights[1] == pytest.approx(1.0)


def test_hedge_strategy_config_builds_schedule_and_seed():
    config = ExperimentConfig.model_validate({
        "format": "all_pay",
        "vmax": 1.0,
        "stages": 400,
        "agents": [{
            "values": {"kind": "static", "value": 0.5},
            "strategy": {"kind": "hedge", "arms": 17, "schedule": "fixed", "seed": 3},
        }],
    })
    learner = config.build_agents()[0].strategy
    assert learner.seed == 3
    assert learner.rate(1, 17) == pytest.approx(hedge_rate(400, 17))


# ---- value paths ---------------------------------------------------------------------

def test_value_paths():
    rng = np.random.default_rng(1)
    assert ValuePath("static", 0.7).value_at(5, rng) == 0.7
    path = ValuePath("list", values=(0.1, 0.2, 0.3))
    assert [path.value_at(s, rng) for s in (1, 2, 3, 4)] == [0.1, 0.2, 0.3, 0.3]
    draws = [ValuePath("uniform", low=0.2, high=0.4).value_at(s, rng) for s in range(1, 200)]
    assert min(draws) >= 0.2 and max(draws) <= 0.4
    with pytest.raises(DomainError):
        ValuePath("gaussian").value_at(1, rng)


# ---- learner updates --------------------------------------------------------------

def test_equal_utilities_keep_weights():
    state = LearnerState(np.log(np.array([0.2, 0.3, 0.5])), np.zeros(3), 4)
    after = learner_update(state, np.full(3, 0.7), scale=2.0)
    np.testing.assert_allclose(after.weights, state.weights)
    assert after.t == 5


def test_hedge_rate_schedule():
    assert hedge_rate(1, 257) == pytest.approx(math.sqrt(8 * math.log(257)))
    assert hedge_rate(100, 257) == pytest.approx(hedge_rate(1, 257) / 10)


def test_dominant_arm_takes_over():
    arms, stages = 257, 10000
    u = np.zeros(arms)
    u[40] = 0.1
    regret, state = _run_hedge(lambda s: u, stages, arms)
    assert state.weights[40] > 0.99
    assert regret <= 2.0 * math.sqrt(math.log(arms) / stages)


def test_alternating_utilities_regret_vanishes():
    arms = 2
    patterns = (np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    regrets = [_run_hedge(lambda s: patterns[s % 2], t, arms)[0] for t in (1000, 10000)]
    for t, r in zip((1000, 10000), regrets):
        assert -1e-9 <= r <= 2.0 * math.sqrt(math.log(arms) / t)
    assert regrets[1] < regrets[0]


def test_static_learner_plays_grid_bids():
    alloc = lambda b: np.minimum(1.0, np.sqrt(2.0 * np.maximum(b, 0.0)))
    played, utilities = run_static_learner(alloc, 0.5, ALL_PAY, stages=200, vmax=1.0, seed=3, arms=33)
    grid = np.linspace(0.0, 1.0, 33)
    assert np.all(np.isin(played, grid))
    np.testing.assert_allclose(utilities, stage_utilities(grid, 0.5, alloc, ALL_PAY))


# ---- utilities -----------------------------------------------------------------------

def test_stage_utilities_per_format():
    bids = np.array([0.0, 0.2, 0.4])
    alloc = lambda b: b
    np.testing.assert_allclose(stage_utilities(bids, 0.5, alloc, WPB), 0.5 * bids - bids * bids)
    np.testing.assert_allclose(stage_utilities(bids, 0.5, alloc, ALL_PAY), 0.5 * bids - bids)


def test_realized_alloc_replays_projection(identity_dashboard):
    projection = MonotoneRule.from_function(lambda v: 0.5 * v, 1.0)
    alloc = realized_alloc_fn(identity_dashboard, projection)
    b = dashboard_bid(identity_dashboard, np.array([0.3, 0.8]))
    np.testing.assert_allclose(alloc(b), [0.15, 0.4], atol=1e-6)
    assert FollowDashboard().act(identity_dashboard, 0.3) == pytest.approx(b[0])
