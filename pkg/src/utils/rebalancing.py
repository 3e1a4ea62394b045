"""
支払いリバランシング

未精算残高 B（正ならエージェントの支払い不足）を台帳で管理し、
参照リバランシング（p(0) = Bη）と、移転なしのIRスプライスでダッシュボードに反映する。
"""
import copy
import logging
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from src.config import settings
from src.utils.dashboards import Dashboard, make_dashboard
from src.utils.rulekit import (
    BidRule,
    DomainError,
    MonotoneRule,
    PaymentFormat,
    bid_strategy,
    cumulative,
    evaluate,
    make_bid_rule,
)

logger = logging.getLogger(__name__)


class ContractError(ValueError):
    """ダッシュボードの配分確率が [η, 1] に収まっていない"""


class LedgerEntry(NamedTuple):
    stage: int
    residual: float
    resolved: float
    realized: int
    balance: float


@dataclass
class BalanceLedger:
    """
    エージェントごとの未精算残高

    balance = initial + Σ(residual − resolved) を常に満たす。
    active=False の場合は記録のみ行い、ダッシュボードには反映しない。
    """
    balance: float = 0.0
    rate: float = 1.0
    dead_band: float = settings.DEAD_BAND
    active: bool = True
    initial: Optional[float] = None
    entries: List[LedgerEntry] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.rate <= 1.0:
            raise DomainError(f"rebalancing rate must be in (0, 1]: {self.rate}")
        if self.initial is None:
            self.initial = self.balance

    def target(self, value: float = math.inf) -> float:
        """今回のダッシュボードで精算対象とする残高（デッドバンド内と非アクティブは 0）"""
        if not self.active:
            return 0.0
        if self.dead_band > 0 and abs(self.balance) <= self.dead_band * value:
            return 0.0
        return self.balance

    def record(self, stage: int, residual: float, resolved: float, realized: int = 1) -> "BalanceLedger":
        self.balance = self.balance + residual - resolved
        self.entries.append(LedgerEntry(stage, float(residual), float(resolved), int(realized), self.balance))
        return self

    def snapshot(self) -> "BalanceLedger":
        return copy.deepcopy(self)

    @property
    def next_stage(self) -> int:
        return self.entries[-1].stage + 1 if self.entries else 1


def update_balance_allpay(
    ledger: BalanceLedger, s_realized: float, actual_bid: float, premium: float = 0.0, stage: Optional[int] = None
) -> BalanceLedger:
    """B′ = B + s(ṽ) − bid（premium はダッシュボードが上乗せした額）"""
    stage = ledger.next_stage if stage is None else stage
    return ledger.record(stage, s_realized - actual_bid + premium, premium, 1)


def update_balance_wpb(
    ledger: BalanceLedger,
    s_realized: float,
    actual_bid: float,
    realized_alloc: int,
    premium: float = 0.0,
    stage: Optional[int] = None,
) -> BalanceLedger:
    """B′ = B + [s(ṽ) − bid]·x̂。配分されなければ台帳は変わらない"""
    if not realized_alloc:
        return ledger
    stage = ledger.next_stage if stage is None else stage
    return ledger.record(stage, s_realized - actual_bid + premium, premium, 1)


def reference_rebalancing(
    ealloc: MonotoneRule, fmt: PaymentFormat, B: float, eta: float, stage_index: int = 0
) -> Dashboard:
    """
    参照リバランシングダッシュボード（transfer = B·η）

    WPB で B·η > 0 の場合は逆変換不能としてフラグが立つ（解析専用）。
    """
    if not 0.0 < eta <= 1.0:
        raise DomainError(f"rebalancing rate must be in (0, 1]: {eta}")
    return make_dashboard(ealloc, fmt, transfer=B * eta, stage_index=stage_index)


def clamp_support(rule: MonotoneRule, eta: float) -> MonotoneRule:
    """x ↦ η + (1−η)x で配分確率を [η, 1] に写す"""
    if not 0.0 < eta < 1.0:
        raise DomainError(f"support floor must be in (0, 1): {eta}")
    return rule.with_probs(eta + (1.0 - eta) * rule.probs)


def linear_bid_exponent(gamma: float) -> Tuple[float, bool]:
    """γ/(1−γ) を返す。上限を超えたら切り詰めてフラグ"""
    if not 0.0 < gamma < 1.0:
        raise DomainError(f"gamma must be in (0, 1): {gamma}")
    exponent = gamma / (1.0 - gamma)
    if exponent > settings.EXPONENT_CAP:
        logger.warning(f"linear-bid exponent {exponent:.3g} capped at {settings.EXPONENT_CAP:.3g}")
        return settings.EXPONENT_CAP, True
    return exponent, False


def linear_bid_rule(
    gamma: float, meet_v: float, meet_x: float, vmax: Optional[float] = None, grid: Optional[int] = None
) -> MonotoneRule:
    """
    点 (meet_v, meet_x) を通る線形入札ルール x(z) = meet_x·(z/meet_v)^{γ/(1−γ)}

    WPB の入札戦略はちょうど γ·z になる。1 でクリップするため、クリップが
    起きた場合は strict でないルールになる。
    """
    if not 0.0 < meet_x <= 1.0 or meet_v <= 0:
        raise DomainError(f"meet point must satisfy meet_v > 0 and meet_x in (0, 1]: ({meet_v}, {meet_x})")
    exponent, _ = linear_bid_exponent(gamma)
    vmax = meet_v if vmax is None else vmax
    values = np.linspace(0.0, vmax, grid or settings.GRID_SIZE)
    probs = np.minimum(1.0, meet_x * (values / meet_v) ** exponent)
    strict = bool(np.all(np.diff(probs) / np.diff(values) >= settings.MIN_SLOPE))
    return MonotoneRule(values, probs, vmax, strict=strict)


@dataclass(frozen=True, eq=False)
class IRSplice:
    """
    IRスプライス

    [0, v†] は線形入札ルール、[v†, vmax] は ealloc。found=False は根が
    見つからず v† = vmax としたことを示す。
    """
    v_dagger: float
    gamma: float
    low_rule: Optional[MonotoneRule]
    spliced: MonotoneRule
    found: bool = True
    capped: bool = False

    def to_json(self) -> dict:
        return {
            "v_dagger": self.v_dagger,
            "gamma": self.gamma,
            "found": self.found,
            "capped": self.capped,
            "knots": self.spliced.to_json(),
        }


def _solve_v_dagger(plain: BidRule, B: float, tol: float) -> Tuple[float, bool]:
    """B ≥ 0: v − ŝ(v) = B、B < 0: ŝ(v) = |B| を二分法で解く（どちらも v について単調増加）"""
    vmax = plain.vmax

    def gap(v: float) -> float:
        s = float(plain.strategy(v))
        return (v - s) - B if B >= 0 else s - abs(B)

    lo, hi = plain.domain_start, vmax
    if gap(hi) < 0:
        return vmax, False
    if gap(lo) >= 0:
        return lo, True
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if gap(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), True


def ir_rebalancing(
    ealloc: MonotoneRule, B: float, eta: float, stage_index: int = 0
) -> Tuple[Dashboard, IRSplice]:
    """
    移転なし（p(0)=0）のIRリバランシングダッシュボード（WPB専用）

    1. v† を解く（B ≥ 0: v† − ŝ(v†) = B、B < 0: ŝ(v†) = |B|）
    2. [0, v†] は γ → 1（B ≥ 0、入札 = 価値）または γ → 0（B < 0、入札 ≈ 0）の極限
    3. v† より上は、スプライス後のルールの戦略をそのまま入札テーブルにする
    4. 逆変換できるよう入札テーブルに傾き下限を課す

    η は呼び出し側が clamp_support で反映済みであることを前提とする。
    """
    if not 0.0 < eta <= 1.0:
        raise DomainError(f"rebalancing rate must be in (0, 1]: {eta}")
    fmt = PaymentFormat.WINNER_PAYS_BID
    plain = make_bid_rule(ealloc, fmt, 0.0)
    vmax = ealloc.vmax
    if B == 0:
        dashboard = Dashboard(format=fmt, ealloc=ealloc, bid_rule=plain, stage_index=stage_index)
        return dashboard, IRSplice(0.0, settings.GAMMA_HIGH, None, ealloc)

    v_dagger, found = _solve_v_dagger(plain, B, settings.INVERT_TOL * vmax)
    if not found:
        logger.warning(f"Stage {stage_index}: no v† for balance {B:.6g}, treating all values as low")
    gamma = settings.GAMMA_HIGH if B > 0 else settings.GAMMA_LOW
    exponent, capped = linear_bid_exponent(gamma)

    values = ealloc.values
    near = np.abs(values - v_dagger) <= 1e-12 * vmax
    if np.any(near):
        v_dagger = float(values[np.argmax(near)])
    else:
        values = np.sort(np.append(values, v_dagger))
    x_dagger = float(evaluate(ealloc, v_dagger))
    low = values <= v_dagger

    probs = np.array(evaluate(ealloc, values), dtype=float)
    if v_dagger > 0:
        # 冪は v ≤ v† の区間だけで計算（比 ≤ 1 なので溢れない）
        probs[low] = x_dagger * (values[low] / v_dagger) ** exponent
    spliced = MonotoneRule(values, probs, vmax, strict=False)
    low_rule = None
    if v_dagger > 0:
        low_rule = MonotoneRule(values[low], probs[low], v_dagger, strict=False)

    # γ → 1 の極限では [0, v†] の積分は 0
    integral_low = 0.0 if B > 0 else x_dagger * v_dagger / (exponent + 1.0)
    high_x = evaluate(ealloc, values)
    above = cumulative(ealloc, values) - cumulative(ealloc, v_dagger)
    bids = np.where(
        low,
        values if B > 0 else gamma * values,
        (values * high_x - integral_low - above) / np.maximum(high_x, settings.NO_WIN_THRESHOLD),
    )
    m = settings.MIN_SLOPE
    bids = np.maximum.accumulate(bids - m * values) + m * values
    bid_rule = BidRule.from_table(fmt, spliced, values, bids)
    splice = IRSplice(v_dagger, gamma, low_rule, spliced, found=found, capped=capped)
    dashboard = Dashboard(format=fmt, ealloc=ealloc, bid_rule=bid_rule, stage_index=stage_index, splice=splice)
    return dashboard, splice


def residual_and_resolved(
    valloc: MonotoneRule,
    ealloc: MonotoneRule,
    fmt: PaymentFormat,
    v: float,
    B: float,
    eta: float,
    realized_alloc: int = 1,
) -> Tuple[float, float]:
    """
    支払い残差 Δ と精算額 R

    AllPay: Δ = s(ṽ) − ŝ(ṽ)、R = Bη
    WPB: Δ = [s(ṽ) − ŝ(ṽ)]·x̂、R = [Bη/ealloc(ṽ)]·x̂
    """
    fmt = PaymentFormat(fmt)
    if fmt == PaymentFormat.ALL_PAY:
        return bid_strategy(valloc, v, fmt) - bid_strategy(ealloc, v, fmt), B * eta
    x_hat = float(evaluate(ealloc, v))
    if x_hat < eta - 1e-12:
        raise ContractError(f"dashboard allocation {x_hat:.6g} at value {v:.6g} is below rate {eta}")
    if not realized_alloc:
        return 0.0, 0.0
    return bid_strategy(valloc, v, fmt) - bid_strategy(ealloc, v, fmt), B * eta / x_hat
