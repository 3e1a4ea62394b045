"""
フルスケールの受け入れテスト（pytest -m slow）
"""
import itertools

import numpy as np
import pytest
from scipy.integrate import quad

from src.config import settings
from src.engine import run_dashboard_mechanism
from src.experiment import ExperimentConfig, load_config
from src.utils.agents import run_static_learner, stage_utilities
from src.utils.analysis import (
    enforce,
    hindsight_regret,
    interval_checks,
    rationalizable_boundary,
    run_checks,
    value_interval,
)
from src.utils.harness import (
    chernoff_violation_fraction,
    simulate_balance_paths,
    simulate_singlecall_paths,
)
from src.utils.rulekit import PaymentFormat, linear_tail_slope
from src.utils.singlecall import InstrumentConfig, instrument_batch, pool_adjacent_violators

pytestmark = pytest.mark.slow

WORKERS = settings.SWEEP_WORKERS

WPB = PaymentFormat.WINNER_PAYS_BID
ALL_PAY = PaymentFormat.ALL_PAY


def _static_config(fmt, policy, stages, values=(0.6, 0.4), reserve_range=(0.1, 1.0)):
    return ExperimentConfig.model_validate({
        "name": f"static-{fmt}-{policy}",
        "format": fmt,
        "vmax": 1.0,
        "stages": stages,
        "algorithm": {"kind": "proportional_share", "reserve_range": list(reserve_range)},
        "agents": [{"values": {"kind": "static", "value": v}} for v in values],
        "policy": {"kind": policy},
    })


# ---- rebalancing bounds ----------------------------------------------------------

def test_all_pay_balance_stays_within_vmax():
    paths = simulate_balance_paths(ALL_PAY, "reference", eta=1.0, stages=10000, seeds=20, workers=WORKERS)
    assert paths.max_abs.max() <= paths.vmax


@pytest.mark.parametrize("mode", ["reference", "ir"])
def test_winner_pays_bid_balance_stays_within_vmax_over_eta(mode):
    paths = simulate_balance_paths(WPB, mode, eta=0.2, stages=10000, seeds=20, workers=WORKERS)
    bound = paths.vmax / paths.eta
    assert paths.max_abs.max() <= bound
    assert paths.inconsistency.max() <= bound / paths.stages + 1e-12


def test_ir_low_value_stages_never_grow_balance_past_value():
    paths = simulate_balance_paths(WPB, "ir", eta=0.2, stages=10000, seeds=20, workers=WORKERS)
    mask = paths.low_value
    before, after = np.abs(paths.before[mask]), np.abs(paths.balances[mask])
    assert mask.any()
    assert np.all((after <= before + 1e-9) | (after <= paths.values[mask] + 1e-9))


def test_allpay_engine_rebalancing_over_seeds():
    config = load_config("allpay-rebalance")
    for seed in config.seed_list():
        trace = run_dashboard_mechanism(config, seed)
        enforce(run_checks(trace, config), seed)


@pytest.mark.parametrize("fmt,policy", [("all_pay", "last_stage"), ("winner_pays_bid", "last_winning_stage")])
def test_natural_rebalancing_keeps_balance_below_value(fmt, policy):
    config = _static_config(fmt, policy, stages=1000)
    trace = run_dashboard_mechanism(config, seed=0)
    checks = {c.name: c for c in run_checks(trace, config)}
    assert checks["natural rebalancing |B| <= v"].passed


# ---- follow-the-dashboard regret ------------------------------------------------------

@pytest.mark.parametrize("stages", [100, 1000, 10000])
def test_following_last_stage_dashboard_has_vanishing_regret(stages):
    config = _static_config("all_pay", "last_stage", stages=stages)
    trace = run_dashboard_mechanism(config, seed=1)
    for i, agent in enumerate(config.agents):
        regret, _ = hindsight_regret(trace, i)
        assert regret <= agent.values.value / stages + config.vmax / 256


# ---- single call ------------------------------------------------------------------------

def test_implicit_payment_is_unbiased_at_scale():
    rho, draws, reserve = 0.2, 1_000_000, 0.5
    values = [0.6, 0.3]

    def blackbox(v, rng):
        probs = v / (v.sum(axis=-1, keepdims=True) + reserve)
        return (rng.random(v.shape) < probs).astype(int)

    def x_bar(z):
        explored = z * np.log((z + 1.0 + reserve) / (z + reserve))
        return (1 - rho) * z / (z + values[1] + reserve) + rho * explored

    out = instrument_batch(blackbox, values, InstrumentConfig(rho=rho, vmax=1.0, seed=23), draws=draws)
    p = out.implicit_payment[:, 0]
    integral, _ = quad(x_bar, 0.0, values[0])
    expected = (1 - rho) * (values[0] * x_bar(values[0]) - integral)
    assert abs(p.mean() - expected) <= 3 * p.std(ddof=1) / np.sqrt(draws)


def test_singlecall_balance_over_thousand_seeds():
    paths = simulate_singlecall_paths(rho=0.2, eta=0.1, stages=200, seeds=1000, workers=WORKERS)
    assert paths.max_abs.max() <= paths.vmax / (paths.rho * paths.eta)
    fraction, _ = chernoff_violation_fraction(paths, delta=0.05)
    assert fraction <= 0.05


def test_singlecall_engine_runs_stay_within_pathwise_bound():
    config = load_config("singlecall-balance")
    for seed in range(10):
        trace = run_dashboard_mechanism(config, seed)
        enforce(run_checks(trace, config), seed)


# ---- isotonic regression -----------------------------------------------------------------

def _block_fits(y):
    """連続ブロックへの全分割について、ブロック平均が非減少になる当てはめ"""
    n = len(y)
    for cuts in itertools.product([False, True], repeat=n - 1):
        edges = [0] + [i + 1 for i, c in enumerate(cuts) if c] + [n]
        means = [float(np.mean(y[a:b])) for a, b in zip(edges[:-1], edges[1:])]
        if all(m0 <= m1 for m0, m1 in zip(means[:-1], means[1:])):
            yield np.concatenate([np.full(b - a, m) for a, b, m in zip(edges[:-1], edges[1:], means)])


def test_pava_equals_exhaustive_least_squares():
    worst = 0.0
    for pattern in itertools.product([0.0, 1.0], repeat=8):
        y = np.array(pattern)
        best = min(_block_fits(y), key=lambda fit: float(np.sum((y - fit) ** 2)))
        worst = max(worst, float(np.max(np.abs(pool_adjacent_violators(y) - best))))
    assert worst <= 1e-9


# ---- learners -----------------------------------------------------------------------------

def _learner_interval(alloc, value, fmt, vmax, stages, arms=257):
    played, utilities = run_static_learner(alloc, value, fmt, stages=stages, vmax=vmax, seed=5, arms=arms)
    actual = stage_utilities(played, value, alloc, fmt).mean()
    grid = np.linspace(0.0, vmax, arms)
    # グリッドの離散化誤差を後悔の水準に足す
    eps_bar = float(utilities.max() - actual) + 1e-4 * vmax
    boundary = rationalizable_boundary([alloc] * stages, played, fmt, grid)
    return value_interval(boundary, eps_bar), eps_bar


@pytest.mark.parametrize("fmt,value,vmax,alloc", [
    (ALL_PAY, 0.5, 1.0, lambda b: np.minimum(1.0, np.sqrt(2.0 * np.maximum(b, 0.0)))),
    (WPB, 2.5, 5.0, lambda b: b / (b + 2.0)),
])
def test_learner_value_is_rationalizable(fmt, value, vmax, alloc):
    widths = []
    for stages in (1000, 10000, 100000):
        interval, eps_bar = _learner_interval(alloc, value, fmt, vmax, stages)
        assert interval.lo <= value <= interval.hi
        enforce(interval_checks(interval, eps_bar))
        widths.append(interval.width)
    assert widths[1] <= 1.1 * widths[0]
    assert widths[2] <= 1.1 * widths[1]


# ---- linear tail ---------------------------------------------------------------------------

@pytest.mark.parametrize("V,X,P,delta", [(2.0, 0.6, 0.3, 0.3), (3.0, 0.5, 0.5, 0.2), (1.0, 0.8, 0.3, 0.05)])
def test_linear_tail_slope_law(V, X, P, delta):
    B = P / X
    slope = linear_tail_slope(V, X, P, delta)
    assert slope == pytest.approx(X / (V - B), rel=1e-4)
    assert slope >= delta
