"""
ダッシュボード（公開される単一エージェントの入札配分ルール）の構築
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, List, Optional, Tuple, Union

import numpy as np

from src.utils.rulekit import (
    ArrayLike,
    BidCurve,
    BidRule,
    DomainError,
    Inference,
    MonotoneRule,
    NonInvertibleError,
    PaymentFormat,
    _strategy_values,
    infer_value_foc,
    invert_strategy,
    make_bid_rule,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HistoryEntry:
    stage: int
    rule: MonotoneRule
    won: bool


class RuleHistory:
    """エージェントごとのステージ別配分ルール履歴（単一ライター）"""

    def __init__(self):
        self._entries: List[HistoryEntry] = []

    def append(self, rule: MonotoneRule, won: bool) -> int:
        if self._entries and rule.vmax != self._entries[0].rule.vmax:
            raise DomainError(
                f"history rules must share vmax: {rule.vmax} != {self._entries[0].rule.vmax}"
            )
        stage = len(self._entries) + 1
        self._entries.append(HistoryEntry(stage, rule, bool(won)))
        return stage

    @property
    def entries(self) -> Tuple[HistoryEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)


class PolicyKind(str, Enum):
    INFERRED_VALUES_ALL = "inferred_values_all"
    K_LOOKBACK = "k_lookback"
    LAST_STAGE = "last_stage"
    LAST_WINNING_STAGE = "last_winning_stage"


@dataclass(frozen=True)
class DashboardPolicy:
    """履歴からどのステージのルールを平均するか"""
    kind: PolicyKind
    k: int = 1
    initial_rule: Optional[MonotoneRule] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.k < 1:
            raise DomainError(f"lookback k must be >= 1: {self.k}")
        if self.kind == PolicyKind.LAST_STAGE and self.k != 1:
            object.__setattr__(self, "k", 1)

    def select(self, history: RuleHistory) -> List[MonotoneRule]:
        entries = history.entries
        if self.kind == PolicyKind.INFERRED_VALUES_ALL:
            return [e.rule for e in entries]
        if self.kind in (PolicyKind.K_LOOKBACK, PolicyKind.LAST_STAGE):
            return [e.rule for e in entries[-self.k:]]
        wins = [e for e in entries if e.won]
        return [wins[-1].rule] if wins else []


@dataclass(frozen=True, eq=False)
class Dashboard:
    """
    公開ダッシュボード

    ealloc: 価値空間の配分ルール推定 x̂
    bid_rule: (ealloc, format, transfer) から導出。逆変換不能なら None
    curve: 入札空間で直接与えられた x̃（比例配分の例など）
    splice: IRスプライスの情報（rebalancing.IRSplice）
    """
    format: PaymentFormat
    ealloc: MonotoneRule
    transfer: float = 0.0
    bid_rule: Optional[BidRule] = None
    stage_index: int = 0
    fallback: bool = False
    non_invertible: bool = False
    curve: Optional[BidCurve] = None
    splice: Optional[Any] = None
    _id: str = field(init=False, repr=False, default="")

    def __post_init__(self):
        h = hashlib.sha1()
        h.update(self.ealloc.fingerprint.encode())
        h.update(f"{self.format.value}:{self.transfer!r}".encode())
        if self.splice is not None:
            h.update(self.bid_rule.bids.tobytes())
        object.__setattr__(self, "_id", h.hexdigest()[:16])

    @property
    def fingerprint(self) -> str:
        return self._id

    def to_json(self) -> dict:
        data = {
            "id": self.fingerprint,
            "stage": self.stage_index,
            "format": self.format.value,
            "transfer": self.transfer,
            "fallback": self.fallback,
            "non_invertible": self.non_invertible,
            "knots": self.ealloc.to_json(),
        }
        if self.splice is not None:
            data["splice"] = self.splice.to_json()
        return data

    def dumps(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False)


def make_dashboard(
    ealloc: MonotoneRule,
    fmt: PaymentFormat,
    transfer: float = 0.0,
    stage_index: int = 0,
    fallback: bool = False,
) -> Dashboard:
    """ealloc から入札ルールを導出してダッシュボードを作る（逆変換不能ならフラグ）"""
    fmt = PaymentFormat(fmt)
    try:
        bid_rule = make_bid_rule(ealloc, fmt, transfer)
        non_invertible = False
    except NonInvertibleError as e:
        logger.warning(f"Stage {stage_index}: dashboard not invertible, analysis only: {e}")
        bid_rule = None
        non_invertible = True
    return Dashboard(
        format=fmt,
        ealloc=ealloc,
        transfer=transfer,
        bid_rule=bid_rule,
        stage_index=stage_index,
        fallback=fallback,
        non_invertible=non_invertible,
    )


def dashboard_from_curve(curve: BidCurve, ealloc: MonotoneRule, stage_index: int = 0) -> Dashboard:
    """入札空間の x̃ を直接公開するダッシュボード"""
    return Dashboard(format=curve.format, ealloc=ealloc, curve=curve, stage_index=stage_index)


def average_rules(rules: List[MonotoneRule]) -> MonotoneRule:
    """共通グリッド上での点ごとの平均"""
    base = rules[0]
    vmax = base.vmax
    probs = np.zeros_like(base.probs)
    for rule in rules:
        if rule.vmax != vmax:
            raise DomainError("rules must share vmax to be averaged")
        if rule.values.shape == base.values.shape and np.array_equal(rule.values, base.values):
            probs = probs + rule.probs
        else:
            probs = probs + np.interp(base.values, rule.values, rule.probs)
    strict = all(r.strict for r in rules)
    return MonotoneRule(base.values, probs / len(rules), vmax, strict=strict, min_slope=base.min_slope)


def build_dashboard(
    policy: DashboardPolicy,
    history: RuleHistory,
    fmt: PaymentFormat,
    transfer: float = 0.0,
    vmax: Optional[float] = None,
) -> Dashboard:
    """
    履歴からダッシュボードを構築

    選択されたステージのルールを点ごとに平均する。選択が空なら
    initial_rule（未指定なら線形ルール）にフォールバックし、fallback フラグを立てる。
    """
    stage = len(history) + 1
    window = policy.select(history)
    if window:
        ealloc = window[0] if len(window) == 1 else average_rules(window)
        return make_dashboard(ealloc, fmt, transfer, stage_index=stage)
    initial = policy.initial_rule
    if initial is None:
        if vmax is None:
            if not len(history):
                raise DomainError("vmax is required to build the initial dashboard")
            vmax = history.entries[0].rule.vmax
        initial = MonotoneRule.linear(vmax)
    if stage > 1:
        logger.warning(f"Stage {stage}: no history selected by {policy.kind.value}, using initial rule")
    return make_dashboard(initial, fmt, transfer, stage_index=stage, fallback=True)


def dashboard_bid(d: Dashboard, v: ArrayLike):
    """
    ダッシュボードに従う入札

    IRスプライスはテーブル、それ以外は戦略の式。WPBの勝てない領域は 0。
    """
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if d.splice is not None:
        out = np.interp(arr, d.bid_rule.values, d.bid_rule.bids)
    else:
        out = _strategy_values(d.ealloc, arr, d.format, d.transfer)
        out = np.where(np.isnan(out), 0.0, out)
    return float(out[0]) if np.ndim(v) == 0 else out


def dashboard_infer(d: Dashboard, b: ArrayLike) -> Inference:
    """入札から価値を推定（範囲外はクランプしてフラグ）"""
    if d.curve is not None:
        return infer_value_foc(d.curve, b)
    if d.non_invertible or d.bid_rule is None:
        raise NonInvertibleError(f"dashboard at stage {d.stage_index} is not invertible", (0.0, 0.0))
    return invert_strategy(d.bid_rule, b)


def dashboard_alloc(d: Dashboard, b: ArrayLike):
    """ダッシュボードが予測する入札配分 x̃(b)"""
    if d.curve is not None:
        return d.curve.alloc(b)
    return d.bid_rule.alloc(b)
