"""
エージェントの入札戦略

- FollowDashboard: ダッシュボードに従う
- ConstantBid: 毎ステージ同じ入札
- HedgeLearner: 入札グリッド上の指数重み（フル情報）学習
"""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from src.config import settings
from src.utils.dashboards import Dashboard, dashboard_bid, dashboard_infer
from src.utils.rulekit import DomainError, MonotoneRule, PaymentFormat

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ValuePath:
    """
    ステージごとの価値

    kind: static（一定）、uniform（毎ステージ U[low, high] を独立に引く）、list（明示的な列、末尾以降は最後の値）
    """
    kind: str = "static"
    value: float = 0.0
    low: float = 0.0
    high: float = 1.0
    values: Tuple[float, ...] = ()

    def value_at(self, stage: int, rng: np.random.Generator) -> float:
        if self.kind == "static":
            return self.value
        if self.kind == "uniform":
            return float(rng.uniform(self.low, self.high))
        if self.kind == "list":
            return float(self.values[min(stage, len(self.values)) - 1])
        raise DomainError(f"unknown value path kind: {self.kind}")


@dataclass
class LearnerState:
    """指数重み学習器の状態（対数重みで保持）"""
    log_weights: np.ndarray
    cumulative: np.ndarray
    t: int = 0

    @property
    def weights(self) -> np.ndarray:
        w = np.exp(self.log_weights - self.log_weights.max())
        return w / w.sum()


RateSchedule = Callable[[int, int], float]


def hedge_rate(t: int, arms: int) -> float:
    """学習率 √(8 ln K / t)（エニータイム）"""
    return math.sqrt(8.0 * math.log(arms) / max(t, 1))


def fixed_hedge_rate(horizon: int) -> RateSchedule:
    """ホライズン T が既知のときの一定学習率 √(8 ln K / T)"""
    if horizon < 1:
        raise DomainError(f"horizon must be positive: {horizon}")

    def rate(t: int, arms: int) -> float:
        return math.sqrt(8.0 * math.log(arms) / horizon)

    return rate


def learner_update(
    state: LearnerState, utilities: np.ndarray, scale: float, rate: RateSchedule = hedge_rate
) -> LearnerState:
    """
    乗法的重み更新 w ← w·exp(η_t·u/scale)

    η_t = rate(t, K)。全アームの効用が等しければ正規化後の重みは変わらない。
    """
    utilities = np.asarray(utilities, dtype=float)
    t = state.t + 1
    eta = rate(t, len(utilities))
    log_w = state.log_weights + eta * utilities / scale
    return replace(
        state,
        log_weights=log_w - log_w.max(),
        cumulative=state.cumulative + utilities,
        t=t,
    )


class Strategy(ABC):
    """入札戦略の基底クラス"""
    name = "strategy"
    needs_feedback = False

    @abstractmethod
    def act(self, dashboard: Dashboard, value: float, rng: Optional[np.random.Generator] = None) -> float:
        ...

    def update(self, utilities: np.ndarray) -> None:
        return None


class FollowDashboard(Strategy):
    name = "follow"

    def act(self, dashboard: Dashboard, value: float, rng: Optional[np.random.Generator] = None) -> float:
        return float(dashboard_bid(dashboard, value))


@dataclass
class ConstantBid(Strategy):
    bid: float
    name = "constant"

    def act(self, dashboard: Dashboard, value: float, rng: Optional[np.random.Generator] = None) -> float:
        return self.bid


class HedgeLearner(Strategy):
    """
    [0, vmax] 上の一様グリッドに対する Hedge（フル情報）

    seed を与えると学習器自身の乱数列で入札を引く（エンジンの乱数は使わない）。
    """
    name = "hedge"
    needs_feedback = True

    def __init__(
        self,
        vmax: float,
        arms: Optional[int] = None,
        rate: Optional[RateSchedule] = None,
        seed: Optional[int] = None,
    ):
        arms = arms or settings.HEDGE_ARMS
        if arms < 2:
            raise DomainError(f"hedge needs at least two arms: {arms}")
        self.vmax = vmax
        self.grid = np.linspace(0.0, vmax, arms)
        self.state = LearnerState(np.zeros(arms), np.zeros(arms), 0)
        self.rate = rate or hedge_rate
        self.seed = seed
        self._rng = np.random.default_rng(seed) if seed is not None else None
        # 効用は [−vmax, vmax] に収まる
        self.scale = 2.0 * vmax

    def act(self, dashboard: Optional[Dashboard], value: float, rng: Optional[np.random.Generator] = None) -> float:
        if self._rng is not None:
            rng = self._rng
        elif rng is None:
            rng = np.random.default_rng()
        return float(self.grid[rng.choice(len(self.grid), p=self.state.weights)])

    def update(self, utilities: np.ndarray) -> None:
        self.state = learner_update(self.state, utilities, self.scale, self.rate)


@dataclass
class AgentSpec:
    value_path: ValuePath
    strategy: Strategy = field(default_factory=FollowDashboard)


def act(spec: AgentSpec, dashboard: Dashboard, value: float, rng: Optional[np.random.Generator] = None) -> float:
    """エージェントの入札"""
    return spec.strategy.act(dashboard, value, rng)


def stage_utilities(
    bids: np.ndarray,
    value: float,
    alloc_fn: Callable[[np.ndarray], np.ndarray],
    fmt: PaymentFormat,
) -> np.ndarray:
    """u(b) = v·x̃(b) − p̃(b)"""
    bids = np.asarray(bids, dtype=float)
    alloc = np.asarray(alloc_fn(bids), dtype=float)
    pay = bids * alloc if PaymentFormat(fmt) == PaymentFormat.WINNER_PAYS_BID else bids
    return value * alloc - pay


def realized_alloc_fn(dashboard: Dashboard, projection: MonotoneRule) -> Callable[[np.ndarray], np.ndarray]:
    """ステージの実際の入札配分 x̃⁽ˢ⁾(b) = x⁽ˢ⁾(ダッシュボードで推定した価値)"""

    def alloc(bids: np.ndarray) -> np.ndarray:
        inferred = dashboard_infer(dashboard, bids).value
        return np.interp(np.atleast_1d(inferred), projection.values, projection.probs)

    return alloc


def run_static_learner(
    alloc_fn: Callable[[np.ndarray], np.ndarray],
    value: float,
    fmt: PaymentFormat,
    stages: int,
    vmax: float,
    seed: int = 0,
    arms: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    静的な入札配分ルールに対して Hedge を回す

    (played_bids, arm_utilities) を返す。効用ベクトルは毎ステージ同じなので一度だけ計算する。
    """
    learner = HedgeLearner(vmax, arms, seed=seed)
    utilities = stage_utilities(learner.grid, value, alloc_fn, fmt)
    played = np.empty(stages)
    for s in range(stages):
        played[s] = learner.act(None, value)
        learner.update(utilities)
        if (s + 1) % 10000 == 0:
            logger.debug(f"static learner: {s + 1}/{stages} stages")
    return played, utilities
