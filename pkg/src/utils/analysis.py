"""
実行記録（Trace）の事後分析

- 未精算残高と誘因不整合
- 事後的な後悔（hindsight regret）と最適応答ギャップ
- 学習者の合理化可能集合の境界と価値区間
- 曲率の数値チェック
- 定理の上界チェック（report.md 用）
"""
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from src.config import settings
from src.utils.agents import realized_alloc_fn, stage_utilities
from src.utils.dashboards import dashboard_infer
from src.utils.rulekit import DomainError, MonotoneRule, PaymentFormat, truthful_payment

logger = logging.getLogger(__name__)

AllocFn = Callable[[np.ndarray], np.ndarray]


class BoundViolation(RuntimeError):
    """上界チェックの違反"""

    def __init__(self, name: str, value: float, bound: float, stage: Optional[int] = None, seed: Optional[int] = None):
        self.name = name
        self.value = value
        self.bound = bound
        self.stage = stage
        self.seed = seed
        super().__init__(f"{name}: {value:.6g} exceeds bound {bound:.6g} at stage {stage} (seed {seed})")


# ---- balances ---------------------------------------------------------------

def expected_payment(bids, alloc_probs, fmt: PaymentFormat) -> np.ndarray:
    """実際の期待支払い（WPB は b·x⁽ˢ⁾(ṽ)、AllPay は b）"""
    bids = np.asarray(bids, dtype=float)
    if PaymentFormat(fmt) == PaymentFormat.WINNER_PAYS_BID:
        return bids * np.asarray(alloc_probs, dtype=float)
    return bids.copy()


def outstanding_from_payments(truthful, expected) -> np.ndarray:
    """ステージ方向（axis 0）の累積 Σ(真実の支払い − 期待支払い)"""
    truthful = np.asarray(truthful, dtype=float)
    if truthful.size == 0:
        return np.zeros((0, 0))
    return np.cumsum(truthful - np.asarray(expected, dtype=float), axis=0)


def outstanding_balance(trace) -> np.ndarray:
    """
    未精算残高 B⁽ᵗ⁾ = Σ(真実の支払い − 実際の期待支払い)

    (stages, agents) の配列。WPB の期待支払いは b·x⁽ˢ⁾(ṽ)。
    """
    if not trace.records:
        return np.zeros((0, 0))
    return outstanding_from_payments(trace.column("truthful_payments"), trace.column("expected_payments"))


def ledger_balance(trace) -> np.ndarray:
    """台帳の残高系列（実現ベース、リバランシングの精算を含む）"""
    if not trace.records:
        return np.zeros((0, 0))
    return trace.column("balances")


class BalancePeak(NamedTuple):
    value: float
    stage: int
    agent: int


def max_abs_balance(series: np.ndarray) -> BalancePeak:
    """|B| の最大値とその位置"""
    if series.size == 0:
        return BalancePeak(0.0, 0, 0)
    flat = int(np.argmax(np.abs(series)))
    s, a = np.unravel_index(flat, series.shape)
    return BalancePeak(float(abs(series[s, a])), int(s) + 1, int(a))


def incentive_inconsistency(trace) -> Tuple[np.ndarray, np.ndarray]:
    """
    誘因不整合

    alloc_gap = |平均 x̃⁽ˢ⁾(b⁽ˢ⁾) − 平均 x⁽ˢ⁾(ṽ⁽ˢ⁾)|（構成上ほぼ 0）
    ε = |B⁽ᵗ⁾| / t
    どちらもエージェントごとの配列。
    """
    t = trace.stages
    if t == 0:
        return np.zeros(0), np.zeros(0)
    n = trace.n_agents
    replayed = np.zeros((t, n))
    for s, r in enumerate(trace.records):
        for i in range(n):
            d = r.dashboards[i]
            if d is None:
                replayed[s, i] = r.alloc_probs[i]
            else:
                replayed[s, i] = float(realized_alloc_fn(d, r.projections[i])(np.array([r.bids[i]]))[0])
    alloc_gap = np.abs(replayed.mean(axis=0) - trace.column("alloc_probs").mean(axis=0))
    eps = np.abs(outstanding_balance(trace)[-1]) / t
    return alloc_gap, eps


# ---- regret -----------------------------------------------------------------

class _AllocCache:
    """(ダッシュボード, 射影) ごとに入札グリッド上の x̃⁽ˢ⁾ を覚えておく"""

    def __init__(self, grid: np.ndarray, size: int = 256):
        self.grid = grid
        self.size = size
        self._cache: "OrderedDict[Tuple[str, str], np.ndarray]" = OrderedDict()

    def get(self, dashboard, projection: MonotoneRule) -> np.ndarray:
        key = (dashboard.fingerprint, projection.fingerprint)
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        alloc = np.asarray(realized_alloc_fn(dashboard, projection)(self.grid), dtype=float)
        self._cache[key] = alloc
        if len(self._cache) > self.size:
            self._cache.popitem(last=False)
        return alloc


def hindsight_regret(trace, agent: int, grid: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """
    事後的な平均後悔

    グリッド上の固定入札 b の平均効用の最大値から、実際の平均（期待）効用を引く。
    (regret, best_fixed_bid) を返す。
    """
    if trace.stages == 0:
        raise DomainError("empty trace")
    grid = np.linspace(0.0, trace.vmax, settings.HEDGE_ARMS) if grid is None else np.asarray(grid, dtype=float)
    fmt = trace.format
    cache = _AllocCache(grid)
    total = np.zeros_like(grid)
    realized = 0.0
    for r in trace.records:
        d = r.dashboards[agent]
        if d is None:
            raise DomainError("hindsight regret needs published dashboards")
        v = float(r.values[agent])
        alloc = cache.get(d, r.projections[agent])
        pay = grid * alloc if fmt == PaymentFormat.WINNER_PAYS_BID else grid
        total += v * alloc - pay
        realized += v * float(r.alloc_probs[agent]) - float(r.expected_payments[agent])
    t = trace.stages
    best = int(np.argmax(total))
    return float(total[best] / t - realized / t), float(grid[best])


def best_response_gap(trace, agent: int, stage: int, grid: Optional[int] = None) -> float:
    """
    ステージ s の最適応答ギャップ

    他のエージェントの入札（推定価値）を固定し、入札グリッド上の最大効用と
    実際の入札の効用の差。
    """
    r = trace.records[stage - 1]
    d = r.dashboards[agent]
    if d is None:
        raise DomainError("best-response gap needs a published dashboard")
    bids = np.linspace(0.0, trace.vmax, grid or settings.GRID_SIZE)
    alloc_fn = realized_alloc_fn(d, r.projections[agent])
    v = float(r.values[agent])
    u = stage_utilities(bids, v, alloc_fn, trace.format)
    actual = float(stage_utilities(np.array([r.bids[agent]]), v, alloc_fn, trace.format)[0])
    return max(0.0, float(u.max()) - actual)


def constant_bid_inconsistency(trace, agent: int, grid: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """
    定額入札の誘因不整合 ε_CB

    グリッド上の入札 b を全ステージで固定したとき、各ステージのダッシュボードが
    推定する価値 ṽ_b での真実の支払いと実際の期待支払いの差の平均 |·| を測る。
    その最大値と最大を与える入札 (eps_cb, bid) を返す。
    """
    if trace.stages == 0:
        raise DomainError("empty trace")
    grid = np.linspace(0.0, trace.vmax, settings.HEDGE_ARMS) if grid is None else np.asarray(grid, dtype=float)
    total = np.zeros_like(grid)
    for r in trace.records:
        d = r.dashboards[agent]
        if d is None:
            raise DomainError("constant-bid inconsistency needs published dashboards")
        projection = r.projections[agent]
        inferred = np.asarray(dashboard_infer(d, grid).value, dtype=float)
        alloc = np.interp(inferred, projection.values, projection.probs)
        total += truthful_payment(projection, inferred) - expected_payment(grid, alloc, trace.format)
    gap = np.abs(total) / trace.stages
    k = int(np.argmax(gap))
    return float(gap[k]), float(grid[k])


def average_bid_gap(played: Sequence[float], best_bid: float) -> float:
    """平均入札と最適固定入札の距離 |mean(b) − b*|"""
    played = np.asarray(played, dtype=float)
    return float(abs(played.mean() - best_bid))


def average_bid_bound(eps_bar: float, alpha: float, value: float) -> float:
    """平均入札の距離の上界 ε̄·(1 + α/(v − ε̄/α)²)"""
    margin = value - eps_bar / alpha
    if margin <= 0:
        raise DomainError(f"value {value} must exceed eps/alpha = {eps_bar / alpha:.6g}")
    return eps_bar * (1.0 + alpha / margin ** 2)


# ---- rationalizable sets ------------------------------------------------------

@dataclass(frozen=True)
class RationalizablePoint:
    bid: float
    value: float
    regret: float
    alloc: float


@dataclass(frozen=True)
class RationalizableBoundary:
    """境界の点列（価値の昇順）と、傾き 0 で除外した点の数"""
    points: Tuple[RationalizablePoint, ...]
    skipped: int = 0

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        v = np.array([p.value for p in self.points])
        e = np.array([p.regret for p in self.points])
        x = np.array([p.alloc for p in self.points])
        return v, e, x

    def to_json(self) -> dict:
        return {
            "skipped": self.skipped,
            "points": [[p.bid, p.value, p.regret, p.alloc] for p in self.points],
        }


def rationalizable_boundary(
    alloc_fns: Sequence[AllocFn],
    played_bids: Sequence[float],
    fmt: PaymentFormat,
    bid_grid: Sequence[float],
    h: Optional[float] = None,
) -> RationalizableBoundary:
    """
    合理化可能集合の境界

    平均入札配分 X̄(b) について、b が最適となる価値
    AllPay: v(b) = 1/X̄′(b)、WPB: v(b) = b + X̄(b)/X̄′(b)
    と、その価値での後悔 ε(b) = v·X̄(b) − P̄(b) − (v·A − P) を求める。
    A, P は実際に入札した列の平均配分と平均支払い。
    """
    fmt = PaymentFormat(fmt)
    played = np.asarray(played_bids, dtype=float)
    if len(alloc_fns) != len(played) or len(played) == 0:
        raise DomainError("need one allocation rule per played bid")
    grid = np.asarray(bid_grid, dtype=float)
    lo, hi = float(grid[0]), float(grid[-1])
    h = (hi - lo) / settings.FD_DIVISOR if h is None else h
    inner = grid[(grid >= lo + h) & (grid <= hi - h)]

    # 同じルールは一度だけ評価する
    groups: Dict[int, List[int]] = {}
    fn_by_id: Dict[int, AllocFn] = {}
    for s, fn in enumerate(alloc_fns):
        groups.setdefault(id(fn), []).append(s)
        fn_by_id[id(fn)] = fn

    t = len(played)
    X = np.zeros_like(inner)
    dX = np.zeros_like(inner)
    A = 0.0
    won_pay = 0.0
    for key, stages in groups.items():
        fn = fn_by_id[key]
        w = len(stages) / t
        X += w * np.asarray(fn(inner), dtype=float)
        dX += w * (np.asarray(fn(inner + h), dtype=float) - np.asarray(fn(inner - h), dtype=float)) / (2 * h)
        a = np.asarray(fn(played[stages]), dtype=float)
        A += float(np.sum(a)) / t
        won_pay += float(np.sum(a * played[stages])) / t

    wpb = fmt == PaymentFormat.WINNER_PAYS_BID
    P = won_pay if wpb else float(played.mean())
    Pbar = inner * X if wpb else inner

    ok = dX > 0
    skipped = int(np.sum(~ok))
    if skipped:
        logger.debug(f"rationalizable boundary: {skipped} bids with zero slope skipped")
    b, X, dX, Pbar = inner[ok], X[ok], dX[ok], Pbar[ok]
    v = b + X / dX if wpb else 1.0 / dX
    eps = v * X - Pbar - (v * A - P)
    order = np.argsort(v, kind="stable")
    points = tuple(
        RationalizablePoint(float(b[k]), float(v[k]), float(eps[k]), float(X[k])) for k in order
    )
    return RationalizableBoundary(points, skipped)


class ValueInterval(NamedTuple):
    lo: float
    hi: float
    v_star: float
    alpha: float
    width: float
    curvature: float


class WidthBounds(NamedTuple):
    """区間幅の上界（linear は 4ε̄/α、curvature は 2√(2ε̄/κ)、alpha は 2α√(2ε̄·hi³)）"""
    linear: float
    curvature: float
    alpha: float


def _crossing(v0: float, e0: float, v1: float, e1: float, level: float) -> float:
    if e1 == e0:
        return v0
    return v0 + (level - e0) * (v1 - v0) / (e1 - e0)


def value_interval(
    boundary: RationalizableBoundary, eps_bar: float, alpha: Optional[float] = None, tol: float = 1e-9
) -> ValueInterval:
    """
    後悔 ε̄ 以下で合理化可能な価値の区間

    境界上の最小後悔点 v* から左右に ε(b) = ε̄ の交点を線形補間で求める。
    後悔曲線の二階微分は dX̄/dv なので、区間上のその最小値を curvature κ とする。
    alpha は dX̄/dv ≥ 1/(α²v³) を満たす最小の α = 1/√(min dX̄/dv·v³)（引数で上書き可）。
    """
    if not boundary.points:
        raise DomainError("empty rationalizable boundary")
    v, e, x = boundary.arrays()
    k = int(np.argmin(e))
    v_star = float(v[k])
    if e[k] > eps_bar + tol:
        raise DomainError(f"no value rationalizable at regret {eps_bar:.6g} (min {e[k]:.6g})")
    if e[k] > eps_bar or eps_bar <= tol:
        lo = hi = v_star
        i0 = i1 = k
    else:
        i0 = k
        while i0 > 0 and e[i0 - 1] <= eps_bar:
            i0 -= 1
        i1 = k
        while i1 < len(v) - 1 and e[i1 + 1] <= eps_bar:
            i1 += 1
        lo = float(v[i0]) if i0 == 0 else _crossing(v[i0 - 1], e[i0 - 1], v[i0], e[i0], eps_bar)
        hi = float(v[i1]) if i1 == len(v) - 1 else _crossing(v[i1], e[i1], v[i1 + 1], e[i1 + 1], eps_bar)
    curvature, cubic_alpha = 0.0, math.inf
    a, b = max(i0 - 1, 0), min(i1 + 1, len(v) - 1)
    if b > a:
        dv = np.diff(v[a:b + 1])
        dx = np.diff(x[a:b + 1])
        keep = dv > 0
        if np.any(keep):
            slopes = dx[keep] / dv[keep]
            mids = 0.5 * (v[a:b][keep] + v[a + 1:b + 1][keep])
            curvature = float(slopes.min())
            scaled = float(np.min(slopes * mids ** 3))
            cubic_alpha = 1.0 / math.sqrt(scaled) if scaled > 0 else math.inf
    if alpha is None:
        alpha = cubic_alpha
    return ValueInterval(float(lo), float(hi), v_star, float(alpha), float(hi - lo), curvature)


def interval_width_bounds(interval: ValueInterval, eps_bar: float) -> WidthBounds:
    """
    区間幅の3つの上界

    curvature と alpha は強凸性から従う上界（√ε̄ のオーダー）。
    linear = 4ε̄/α は ε̄ に線形な形で、後悔曲線が二次なので ε̄ が小さいと
    実際の幅を下回りうる（報告のみ）。
    """
    alpha = interval.alpha
    linear = 4.0 * eps_bar / alpha if alpha > 0 else math.inf
    curvature = 2.0 * math.sqrt(2.0 * eps_bar / interval.curvature) if interval.curvature > 0 else math.inf
    cubic = 2.0 * alpha * math.sqrt(2.0 * eps_bar * interval.hi ** 3)
    return WidthBounds(linear, curvature, cubic)


def is_convex(boundary: RationalizableBoundary, tol: float = 1e-9) -> bool:
    """(v, ε) 曲線の離散的な傾きが非減少か"""
    v, e, _ = boundary.arrays()
    dv = np.diff(v)
    keep = dv > 0
    if np.sum(keep) < 2:
        return True
    slopes = np.diff(e)[keep] / dv[keep]
    return bool(np.all(np.diff(slopes) >= -tol))


# ---- curvature ------------------------------------------------------------------

def bid_rule_second_derivative(alloc_fn: AllocFn, b: np.ndarray, h: float) -> np.ndarray:
    """x̃″(b) の中心差分"""
    b = np.asarray(b, dtype=float)
    return (np.asarray(alloc_fn(b + h)) - 2.0 * np.asarray(alloc_fn(b)) + np.asarray(alloc_fn(b - h))) / h ** 2


def allpay_curvature_delta(rule: MonotoneRule, lo: float = 0.0) -> float:
    """min_{v ≥ lo} x′(v)·v³（区間中点で評価）"""
    mid = 0.5 * (rule.values[:-1] + rule.values[1:])
    keep = mid >= lo
    if not np.any(keep):
        raise DomainError(f"no grid segment above {lo}")
    return float(np.min(rule.slopes[keep] * mid[keep] ** 3))


# ---- bounds ---------------------------------------------------------------------

def singlecall_pathwise_bound(vmax: float, rho: float, eta: float) -> float:
    """|B| ≤ vmax/(ρη)"""
    return vmax / (rho * eta)


def chernoff_bound(vmax: float, rho: float, eta: float, delta: float) -> float:
    """確率 1−δ で |B| ≤ vmax/η + (vmax/ρ)·√(ln(2/δ)/(2η))"""
    return vmax / eta + (vmax / rho) * math.sqrt(math.log(2.0 / delta) / (2.0 * eta))


@dataclass(frozen=True)
class Check:
    """report.md の1行"""
    name: str
    value: float
    bound: float
    passed: bool
    stage: Optional[int] = None
    agent: Optional[int] = None
    enforced: bool = True


def interval_checks(interval: ValueInterval, eps_bar: float, rel: float = 1e-2) -> List[Check]:
    """学習者の合理化可能区間の幅チェック（線形形は参考値）"""
    bounds = interval_width_bounds(interval, eps_bar)
    w = interval.width
    return [
        Check("value interval width <= 4 eps/alpha", w, bounds.linear, w <= bounds.linear, enforced=False),
        Check("value interval width <= 2 sqrt(2 eps/kappa)", w, bounds.curvature, w <= bounds.curvature * (1 + rel)),
        Check("value interval width <= 2 alpha sqrt(2 eps hi^3)", w, bounds.alpha, w <= bounds.alpha * (1 + rel)),
    ]


def min_rate(trace) -> float:
    """実行中に使われた再均衡率の最小値"""
    if trace.records and trace.records[0].etas is not None:
        return float(trace.column("etas").min())
    return min(l.rate for l in trace.ledgers)


def _static_values(config) -> bool:
    return all(a.values.kind == "static" for a in config.agents)


def run_checks(trace, config) -> List[Check]:
    """実行に当てはまる上界チェックを全て評価する"""
    checks: List[Check] = []
    vmax = trace.vmax
    fmt = trace.format
    mode = config.rebalancing.mode
    ledgers = ledger_balance(trace)
    peak = max_abs_balance(ledgers)
    follow = all(a.strategy.kind == "follow" for a in config.agents)
    static = _static_values(config)

    if config.singlecall.enabled:
        if mode != "off":
            rate = min_rate(trace)
            bound = singlecall_pathwise_bound(vmax, config.singlecall.rho, rate)
            checks.append(Check("singlecall pathwise |B|", peak.value, bound, peak.value <= bound, peak.stage, peak.agent))
            refined = chernoff_bound(vmax, config.singlecall.rho, rate, config.singlecall.delta)
            checks.append(Check("singlecall high-probability |B|", peak.value, refined, peak.value <= refined,
                                peak.stage, peak.agent, enforced=False))
    elif mode == "reference" and fmt == PaymentFormat.ALL_PAY:
        rate = config.rebalancing.eta
        bound = vmax if rate >= 1.0 else vmax / rate
        checks.append(Check("all-pay rebalancing |B|", peak.value, bound, peak.value <= bound, peak.stage, peak.agent))
    elif mode == "ir":
        bound = vmax / config.rebalancing.eta
        checks.append(Check("winner-pays-bid rebalancing |B|", peak.value, bound, peak.value <= bound, peak.stage, peak.agent))
        _, eps = incentive_inconsistency(trace)
        ieps = float(eps.max())
        ibound = bound / trace.stages + 1e-12
        checks.append(Check("incentive inconsistency", ieps, ibound, ieps <= ibound))
    elif mode == "off" and static and follow:
        natural = (
            (fmt == PaymentFormat.ALL_PAY and config.policy.kind.value == "last_stage")
            or (fmt == PaymentFormat.WINNER_PAYS_BID and config.policy.kind.value == "last_winning_stage")
        )
        if natural:
            values = np.array([a.values.value for a in config.agents])
            ratio = np.abs(ledgers) - values[None, :]
            flat = int(np.argmax(ratio))
            s, a = np.unravel_index(flat, ratio.shape)
            worst = float(abs(ledgers[s, a]))
            checks.append(Check("natural rebalancing |B| <= v", worst, float(values[a]),
                                bool(ratio.max() <= 1e-9 * vmax), int(s) + 1, int(a)))

    nash_policy = config.policy.kind.value in ("last_stage", "inferred_values_all")
    if static and follow and mode == "off" and not config.singlecall.enabled and nash_policy and trace.stages >= 2:
        inferred = trace.column("inferred")[1:]
        values = trace.column("values")[1:]
        dev = float(np.max(np.abs(inferred - values)))
        checks.append(Check("inferred value error from stage 2", dev, 1e-6 * vmax, dev <= 1e-6 * vmax))
        gaps = [
            best_response_gap(trace, i, s)
            for s in range(2, trace.stages + 1)
            for i in range(trace.n_agents)
        ]
        gap = float(max(gaps))
        bound = settings.NASH_GAP_TOL * vmax
        checks.append(Check("best-response gap from stage 2", gap, bound, gap <= bound))
    return checks


def enforce(checks: Sequence[Check], seed: Optional[int] = None) -> None:
    """強制チェックの最初の違反を BoundViolation として送出"""
    for c in checks:
        if c.enforced and not c.passed:
            raise BoundViolation(c.name, c.value, c.bound, c.stage, seed)
