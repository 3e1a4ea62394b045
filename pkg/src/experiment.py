"""
実験設定（JSON）のスキーマと読み込み
"""
import contextlib
import json
import logging
import re
from pathlib import Path
from typing import Iterator, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.config import settings
from src.utils.agents import (
    AgentSpec,
    ConstantBid,
    FollowDashboard,
    HedgeLearner,
    ValuePath,
    fixed_hedge_rate,
    hedge_rate,
)
from src.utils.dashboards import DashboardPolicy, PolicyKind
from src.utils.rulekit import MonotoneRule, PaymentFormat

logger = logging.getLogger(__name__)

PRESETS_DIR = Path(__file__).resolve().parent.parent / "presets"


class ConfigError(ValueError):
    """設定ファイルのエラー（行番号つき）"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AlgorithmConfig(_Strict):
    kind: Literal["proportional_share", "softmax", "fixed_rule"] = "proportional_share"
    reserve: float = Field(0.0, ge=0.0, description="比例配分の仮想リザーブ（softmax では仮想候補）")
    reserve_range: Optional[Tuple[float, float]] = Field(None, description="ステージごとに一様に引き直すリザーブの範囲")
    temperature: float = Field(1.0, gt=0.0)
    rule: Optional[List[Tuple[float, float]]] = Field(None, description="fixed_rule のノット [value, prob]")

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "fixed_rule" and not self.rule:
            raise ValueError("fixed_rule requires 'rule' knots")
        if self.reserve_range is not None:
            lo, hi = self.reserve_range
            if not 0.0 <= lo <= hi:
                raise ValueError("reserve_range must satisfy 0 <= low <= high")
        return self


class ValuePathConfig(_Strict):
    kind: Literal["static", "uniform", "list"] = "static"
    value: float = 0.0
    low: float = 0.0
    high: float = 1.0
    values: List[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "list" and not self.values:
            raise ValueError("list value path needs 'values'")
        if self.kind == "uniform" and self.low > self.high:
            raise ValueError("uniform value path needs low <= high")
        return self

    def bounds(self) -> Tuple[float, float]:
        if self.kind == "static":
            return self.value, self.value
        if self.kind == "uniform":
            return self.low, self.high
        return min(self.values), max(self.values)


class StrategyConfig(_Strict):
    kind: Literal["follow", "constant", "hedge"] = "follow"
    bid: float = Field(0.0, ge=0.0)
    arms: int = Field(settings.HEDGE_ARMS, ge=2)
    schedule: Literal["anytime", "fixed"] = Field("anytime", description="Hedge の学習率（fixed はステージ数をホライズンに使う）")
    seed: Optional[int] = Field(None, ge=0, description="Hedge 自身の乱数シード（省略でエンジンの乱数列）")


class AgentConfig(_Strict):
    values: ValuePathConfig
    strategy: StrategyConfig = Field(default_factory=StrategyConfig)


class PolicyConfig(_Strict):
    kind: PolicyKind = PolicyKind.LAST_STAGE
    k: int = Field(1, ge=1)


class RebalancingConfig(_Strict):
    mode: Literal["off", "reference", "ir"] = "off"
    eta: Optional[float] = Field(None, gt=0.0, le=1.0, description="リバランス率 η（シングルコールでは省略で自動）")
    dead_band: float = Field(settings.DEAD_BAND, ge=0.0)
    initial_balance: float = 0.0


class SingleCallConfig(_Strict):
    enabled: bool = False
    rho: float = Field(0.2, gt=0.0, lt=1.0)
    delta: float = Field(0.05, gt=0.0, lt=1.0, description="高確率上界の δ")


class ToleranceConfig(_Strict):
    INVERT_TOL: Optional[float] = Field(None, gt=0.0)
    ROUND_TRIP_TOL: Optional[float] = Field(None, gt=0.0)
    FOC_TOL: Optional[float] = Field(None, gt=0.0)
    NASH_GAP_TOL: Optional[float] = Field(None, gt=0.0)


class ExperimentConfig(_Strict):
    """1回の実験（シード範囲を含む）の設定"""
    name: str = "experiment"
    format: PaymentFormat
    vmax: float = Field(..., gt=0.0)
    stages: int = Field(..., ge=1)
    seed: int = Field(0, ge=0)
    seeds: Optional[Tuple[int, int]] = Field(None, description="sweep のシード範囲 [A, B]")
    grid: int = Field(settings.GRID_SIZE, ge=3)
    algorithm: AlgorithmConfig = Field(default_factory=AlgorithmConfig)
    agents: List[AgentConfig] = Field(..., min_length=1)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    rebalancing: RebalancingConfig = Field(default_factory=RebalancingConfig)
    singlecall: SingleCallConfig = Field(default_factory=SingleCallConfig)
    tolerances: ToleranceConfig = Field(default_factory=ToleranceConfig)
    persist: bool = False

    @model_validator(mode="after")
    def _check(self):
        for i, agent in enumerate(self.agents):
            lo, hi = agent.values.bounds()
            if lo < 0 or hi > self.vmax:
                raise ValueError(f"agent {i} values must lie in [0, {self.vmax}]")
        mode = self.rebalancing.mode
        wpb = self.format == PaymentFormat.WINNER_PAYS_BID
        if wpb and mode == "reference":
            raise ValueError("winner-pays-bid reference rebalancing is not invertible; use mode 'ir'")
        if not wpb and mode == "ir":
            raise ValueError("ir rebalancing is defined for winner_pays_bid only")
        if mode != "off" and self.rebalancing.eta is None and not self.singlecall.enabled:
            if wpb:
                raise ValueError("winner-pays-bid rebalancing needs eta (dashboard support floor)")
            self.rebalancing.eta = 1.0
        if wpb and mode == "ir" and not self.singlecall.enabled and self.rebalancing.eta >= 1.0:
            raise ValueError("winner-pays-bid rebalancing needs eta < 1")
        if self.seeds is not None and self.seeds[0] > self.seeds[1]:
            raise ValueError("seeds range must satisfy A <= B")
        if self.algorithm.kind == "fixed_rule" and self.algorithm.rule[-1][0] > self.vmax:
            raise ValueError("fixed_rule knots must lie within [0, vmax]")
        return self

    # ---- builders --------------------------------------------------------

    def build_agents(self) -> List[AgentSpec]:
        """エージェント（戦略は状態を持つので実行ごとに作り直す）"""
        specs = []
        for agent in self.agents:
            v = agent.values
            path = ValuePath(v.kind, v.value, v.low, v.high, tuple(v.values))
            s = agent.strategy
            if s.kind == "constant":
                strategy = ConstantBid(s.bid)
            elif s.kind == "hedge":
                rate = fixed_hedge_rate(self.stages) if s.schedule == "fixed" else hedge_rate
                strategy = HedgeLearner(self.vmax, s.arms, rate, s.seed)
            else:
                strategy = FollowDashboard()
            specs.append(AgentSpec(path, strategy))
        return specs

    def build_policy(self) -> DashboardPolicy:
        return DashboardPolicy(self.policy.kind, self.policy.k, MonotoneRule.linear(self.vmax, self.grid))

    def fixed_rule(self) -> Optional[MonotoneRule]:
        if self.algorithm.rule is None:
            return None
        rule = MonotoneRule.from_knots(self.algorithm.rule, vmax=self.vmax)
        return rule.resample(MonotoneRule.linear(self.vmax, self.grid).values)

    def seed_list(self) -> List[int]:
        if self.seeds is None:
            return [self.seed]
        return list(range(self.seeds[0], self.seeds[1] + 1))


def _locate(text: str, loc: Tuple) -> Optional[int]:
    """エラー位置（キーの並び）から JSON テキスト中の行番号を推定"""
    pos = 0
    found = None
    for key in loc:
        if not isinstance(key, str):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            break
        pos = m.start()
        found = text.count("\n", 0, pos) + 1
    return found


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg}", e.lineno) from e
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(f"{where}: {err['msg']}", _locate(text, tuple(err["loc"]))) from e


def load_config(path: str) -> ExperimentConfig:
    """設定ファイル（またはプリセット名）を読み込む"""
    p = Path(path)
    if not p.exists():
        for candidate in (PRESETS_DIR / path, PRESETS_DIR / f"{path}.json"):
            if candidate.exists():
                p = candidate
                break
    if not p.exists():
        raise ConfigError(f"config not found: {path}")
    return parse_config(p.read_text(encoding="utf-8"))


@contextlib.contextmanager
def tolerance_overrides(tolerances: ToleranceConfig) -> Iterator[None]:
    """設定の許容誤差を一時的に上書き"""
    overrides = {k: v for k, v in tolerances.model_dump().items() if v is not None}
    saved = {k: getattr(settings, k) for k in overrides}
    try:
        for k, v in overrides.items():
            setattr(settings, k, v)
        yield
    finally:
        for k, v in saved.items():
            setattr(settings, k, v)
