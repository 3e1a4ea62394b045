"""
シングルコール（ブラックボックス1回呼び出し）実装

一様探索つきの計装アルゴリズム、暗黙支払い p̂、等調回帰による経験ダッシュボード。
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from src.config import settings
from src.utils.dashboards import Dashboard, make_dashboard
from src.utils.rebalancing import BalanceLedger
from src.utils.rulekit import DomainError, MonotoneRule, PaymentFormat

logger = logging.getLogger(__name__)

# values, rng → 0/1 の実現配分
Blackbox = Callable[[np.ndarray, np.random.Generator], np.ndarray]


class ProtocolError(RuntimeError):
    """ブラックボックスが 0/1 以外を返した"""


class InstrumentConfig(BaseModel):
    """計装パラメータ"""
    rho: float = Field(..., gt=0.0, lt=1.0, description="探索確率 ρ")
    vmax: float = Field(..., gt=0.0, description="価値の上限")
    seed: int = Field(0, ge=0, lt=2 ** 64, description="乱数シード")


@dataclass(frozen=True)
class InstrumentedOutcome:
    """1回の計装ドローの結果（エージェントごとの配列）"""
    values: np.ndarray
    sampled: np.ndarray
    explored: np.ndarray
    realized: np.ndarray
    own_alloc: np.ndarray
    below: np.ndarray
    implicit_payment: np.ndarray


def _check_allocations(alloc: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    alloc = np.asarray(alloc)
    if alloc.shape != shape:
        raise ProtocolError(f"blackbox returned shape {alloc.shape}, expected {shape}")
    if not np.all((alloc == 0) | (alloc == 1)):
        raise ProtocolError("blackbox must return 0/1 allocations")
    return alloc.astype(float)


def _instrument(
    blackbox: Blackbox, values: np.ndarray, rho: float, vmax: float, rng: np.random.Generator
) -> InstrumentedOutcome:
    if np.any(values < 0) or np.any(values > vmax):
        raise DomainError(f"values must lie in [0, {vmax}]")
    explored = rng.random(values.shape) < rho
    uniform = rng.uniform(0.0, vmax, values.shape)
    sampled = np.where(explored, uniform, values)
    realized = _check_allocations(blackbox(sampled, rng), values.shape)
    own = realized * ~explored
    safe = np.where(values > 0, values, 1.0)
    below = np.where(explored & (sampled < values) & (values > 0), realized * vmax / safe, 0.0)
    payment = values * (own - (1.0 - rho) / rho * below)
    return InstrumentedOutcome(values, sampled, explored, realized, own, below, payment)


def instrument_draw(
    blackbox: Blackbox, values: Sequence[float], cfg: InstrumentConfig, rng: Optional[np.random.Generator] = None
) -> InstrumentedOutcome:
    """
    計装ドロー（ブラックボックスを1回だけ呼ぶ）

    各入力を確率 ρ で U[0, vmax] に置き換え、
    x̂ = x̂^ins·1[探索なし]、Ŷ = x̂^ins·(vmax/v)·1[探索かつ ṽ < v]、
    p̂ = v·(x̂ − (1−ρ)/ρ·Ŷ) を計算する。
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return _instrument(blackbox, np.asarray(values, dtype=float), cfg.rho, cfg.vmax, rng)


def instrument_batch(
    blackbox: Blackbox, values: Sequence[float], cfg: InstrumentConfig, draws: int,
    rng: Optional[np.random.Generator] = None,
) -> InstrumentedOutcome:
    """独立ドローをまとめて行う（各行が1ドロー。ブラックボックスは行ごとに独立に評価すること）"""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    base = np.asarray(values, dtype=float)
    tiled = np.broadcast_to(base, (draws, base.size)).copy()
    return _instrument(blackbox, tiled, cfg.rho, cfg.vmax, rng)


def instrumented_rule(valloc: MonotoneRule, rho: float, avg_alloc: float) -> MonotoneRule:
    """x^ins(v) = (1−ρ)·x(v) + ρ·avg"""
    if not 0.0 <= avg_alloc <= 1.0:
        raise DomainError(f"average allocation must be in [0, 1]: {avg_alloc}")
    if not 0.0 < rho < 1.0:
        raise DomainError(f"rho must be in (0, 1): {rho}")
    return valloc.with_probs((1.0 - rho) * valloc.probs + rho * avg_alloc)


def pool_adjacent_violators(y: Sequence[float], w: Optional[Sequence[float]] = None) -> np.ndarray:
    """重み付き最小二乗の等調回帰（PAVA）。入力順に非減少な水準を返す"""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    means: List[float] = []
    weights: List[float] = []
    counts: List[int] = []
    for yi, wi in zip(y, w):
        means.append(yi)
        weights.append(wi)
        counts.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            wsum = weights[-2] + weights[-1]
            merged = (means[-2] * weights[-2] + means[-1] * weights[-1]) / wsum
            count = counts[-2] + counts[-1]
            del means[-1], weights[-1], counts[-1]
            means[-1], weights[-1], counts[-1] = merged, wsum, count
    return np.repeat(np.asarray(means), counts)


def isotonic_fit(
    points: Sequence[Tuple[float, float]], vmax: float, grid: Optional[int] = None
) -> MonotoneRule:
    """
    連続な等調回帰

    1. 値でソートし、同じ値の点はまとめる
    2. PAVA で水準を求める
    3. ブロック中点を代表点として線形補間（連続化）
    4. (1 − m·vmax)·p + m·v で傾きの下限を課す
    """
    if len(points) == 0:
        raise DomainError("isotonic fit needs at least one point")
    arr = np.asarray(points, dtype=float)
    order = np.argsort(arr[:, 0], kind="stable")
    xs, ys = arr[order, 0], arr[order, 1]
    ux, inverse, counts = np.unique(xs, return_inverse=True, return_counts=True)
    uy = np.bincount(inverse, weights=ys) / counts
    levels = pool_adjacent_violators(uy, counts)

    reps_x, reps_y = [], []
    start = 0
    for i in range(1, len(levels) + 1):
        if i == len(levels) or levels[i] != levels[start]:
            reps_x.append(0.5 * (ux[start] + ux[i - 1]))
            reps_y.append(levels[start])
            start = i
    values = np.linspace(0.0, vmax, grid or settings.GRID_SIZE)
    fitted = np.clip(np.interp(values, reps_x, reps_y), 0.0, 1.0)
    # (1−ρ) 倍しても min_slope を下回らない余裕をもたせる
    m = settings.MIN_SLOPE * 100
    probs = (1.0 - m * vmax) * fitted + m * values
    return MonotoneRule(values, np.clip(probs, 0.0, 1.0), vmax)


@dataclass
class InstrumentedHistory:
    """単一エージェントの計装ドロー履歴（探索ラウンドのみ回帰に使う）"""
    sampled: List[float] = field(default_factory=list)
    realized: List[float] = field(default_factory=list)
    explored: List[bool] = field(default_factory=list)

    def append(self, sampled: float, realized: float, explored: bool) -> None:
        self.sampled.append(float(sampled))
        self.realized.append(float(realized))
        self.explored.append(bool(explored))

    def exploration_points(self) -> List[Tuple[float, float]]:
        return [(s, r) for s, r, e in zip(self.sampled, self.realized, self.explored) if e]

    def __len__(self) -> int:
        return len(self.sampled)


def build_instrumented_dashboard(
    history: InstrumentedHistory,
    rho: float,
    vmax: float,
    fmt: PaymentFormat,
    transfer: float = 0.0,
    initial_rule: Optional[MonotoneRule] = None,
    grid: Optional[int] = None,
) -> Tuple[Dashboard, float]:
    """
    経験ダッシュボード (1−ρ)·isotonic_fit + ρ·avg を構築

    (dashboard, avg) を返す。探索ラウンドがなければ初期ルールにフォールバック。
    """
    stage = len(history) + 1
    points = history.exploration_points()
    if not points:
        initial = initial_rule or MonotoneRule.linear(vmax, grid)
        return make_dashboard(initial, fmt, transfer, stage_index=stage, fallback=True), float(initial.probs.mean())
    fit = isotonic_fit(points, vmax, grid)
    avg = float(np.mean([r for _, r in points]))
    rule = fit.with_probs((1.0 - rho) * fit.probs + rho * avg)
    return make_dashboard(rule, fmt, transfer, stage_index=stage), avg


def default_eta(rho: float, avg_alloc: float) -> float:
    """η = factor·ρ·avg（ダッシュボードの最小配分以下）"""
    return settings.SINGLECALL_ETA_FACTOR * rho * avg_alloc


def update_balance_singlecall(
    ledger: BalanceLedger,
    implicit_payment: float,
    realized_alloc: int,
    bid: float,
    premium: float = 0.0,
    fmt: PaymentFormat = PaymentFormat.WINNER_PAYS_BID,
    stage: Optional[int] = None,
) -> BalanceLedger:
    """
    B′ = B + p̂ − x̂^ins·b（AllPay は B + p̂ − b）

    premium はダッシュボードが上乗せした分で、精算額として記録する。
    """
    paid = bid if PaymentFormat(fmt) == PaymentFormat.ALL_PAY else realized_alloc * bid
    charged = premium if PaymentFormat(fmt) == PaymentFormat.ALL_PAY else realized_alloc * premium
    if not paid and not implicit_payment and not charged:
        return ledger
    stage = ledger.next_stage if stage is None else stage
    return ledger.record(stage, implicit_payment - paid + charged, charged, int(realized_alloc))
