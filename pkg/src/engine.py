"""
逐次ダッシュボードメカニズムのシミュレータ

各ステージで:
1. 価値を引く、ステージの配分アルゴリズムを引く
2. ダッシュボードを公開（方針 or 計装、WPBのクランプ、リバランシング）
3. 入札を集め、価値を推定
4. 推定価値でアルゴリズムを実行し、配分を実現
5. 支払い・真実の支払い（影）・台帳・履歴・学習器を更新
"""
import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.config import settings
from src.experiment import ExperimentConfig
from src.utils.agents import AgentSpec, realized_alloc_fn, stage_utilities
from src.utils.dashboards import (
    Dashboard,
    RuleHistory,
    build_dashboard,
    dashboard_bid,
    dashboard_infer,
)
from src.utils.rebalancing import (
    BalanceLedger,
    clamp_support,
    ir_rebalancing,
    reference_rebalancing,
    update_balance_allpay,
    update_balance_wpb,
)
from src.utils.rulekit import (
    DomainError,
    MonotoneRule,
    NoWinRegionError,
    NonInvertibleError,
    PaymentFormat,
    _strategy_values,
    truthful_payment,
)
from src.utils.singlecall import (
    InstrumentConfig,
    InstrumentedHistory,
    build_instrumented_dashboard,
    default_eta,
    instrument_draw,
    update_balance_singlecall,
)

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "stage", "agent", "value", "bid", "inferred_value", "alloc_prob", "realized",
    "payment", "truthful_payment", "residual", "resolved", "balance",
]


class EngineError(RuntimeError):
    """実行を中断するエラー（ステージ番号つき）"""

    def __init__(self, message: str, stage: int):
        self.stage = stage
        super().__init__(f"stage {stage}: {message}")


class ProjectionError(DomainError):
    """単一エージェント射影が狭義単調でない"""


class Purpose(IntEnum):
    """乱数サブストリームの用途"""
    VALUE = 0
    ALGORITHM = 1
    AGENT = 2
    EXPLORE = 3
    REALIZE = 4


def substream(seed: int, stage: int, agent: int, purpose: Purpose) -> np.random.Generator:
    """(stage, agent, purpose) ごとに独立で、反復順序に依存しない乱数列"""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stage, agent, int(purpose))))


# ---- allocation algorithms ----------------------------------------------

@dataclass(frozen=True)
class AllocationAlgorithm:
    """
    配分アルゴリズム

    proportional_share: x_i = z / (z + Σ_{j≠i} v_j + reserve)
    softmax: 単一財、x_i ∝ exp(z/T)（reserve > 0 なら仮想候補 exp(reserve/T) を加える）
    fixed_rule: 全エージェントに同じルール（他者に依存しない）
    """
    kind: str
    n: int
    vmax: float
    reserve: float = 0.0
    reserve_range: Optional[Tuple[float, float]] = None
    temperature: float = 1.0
    rule: Optional[MonotoneRule] = None
    grid: int = settings.GRID_SIZE

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "AllocationAlgorithm":
        a = cfg.algorithm
        return cls(
            kind=a.kind,
            n=len(cfg.agents),
            vmax=cfg.vmax,
            reserve=a.reserve,
            reserve_range=a.reserve_range,
            temperature=a.temperature,
            rule=cfg.fixed_rule(),
            grid=cfg.grid,
        )

    def draw_stage(self, rng: Optional[np.random.Generator] = None) -> "StageAllocation":
        reserve = self.reserve
        if self.reserve_range is not None:
            rng = rng if rng is not None else np.random.default_rng()
            reserve = float(rng.uniform(*self.reserve_range))
        return StageAllocation(self, reserve)


@dataclass(frozen=True)
class StageAllocation:
    """ステージで実際に使われるアルゴリズム（リザーブを引いた後）"""
    algorithm: AllocationAlgorithm
    reserve: float

    @property
    def single_item(self) -> bool:
        return self.algorithm.kind == "softmax"

    def alloc(self, z: np.ndarray, others: np.ndarray) -> np.ndarray:
        """x_i(z, v₋ᵢ)"""
        z = np.asarray(z, dtype=float)
        others = np.asarray(others, dtype=float)
        kind = self.algorithm.kind
        if kind == "proportional_share":
            denom = z + others.sum() + self.reserve
            return np.where(denom > 0, z / np.where(denom > 0, denom, 1.0), 0.0)
        if kind == "softmax":
            T = self.algorithm.temperature
            logits = list(others / T)
            if self.reserve > 0:
                logits.append(self.reserve / T)
            m = np.maximum(z / T, max(logits) if logits else -np.inf)
            own = np.exp(z / T - m)
            rest = sum(np.exp(l - m) for l in logits)
            return own / (own + rest)
        return np.interp(z, self.algorithm.rule.values, self.algorithm.rule.probs)

    def probs(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return np.array([
            float(self.alloc(values[i], np.delete(values, i))) for i in range(len(values))
        ])

    def project(self, i: int, values: np.ndarray) -> MonotoneRule:
        """エージェント i の単一エージェント射影 z ↦ x_i(z, v₋ᵢ) をグリッドに載せる"""
        if self.algorithm.kind == "fixed_rule":
            return self.algorithm.rule
        others = np.delete(np.asarray(values, dtype=float), i)
        try:
            return MonotoneRule.from_function(lambda z: self.alloc(z, others), self.algorithm.vmax, self.algorithm.grid)
        except DomainError as e:
            raise ProjectionError(f"projection for agent {i} is not strictly monotone: {e}") from e

    def realize(self, probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """単一財はカテゴリカルに1人、それ以外は周辺確率で独立に 0/1 を引く"""
        probs = np.asarray(probs, dtype=float)
        if self.single_item:
            u = rng.random()
            edges = np.cumsum(probs)
            out = np.zeros_like(probs)
            k = int(np.searchsorted(edges, u, side="right"))
            if k < len(probs):
                out[k] = 1.0
            return out
        return (rng.random(probs.shape) < probs).astype(float)

    def blackbox(self) -> Callable[[np.ndarray, np.random.Generator], np.ndarray]:
        def call(values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
            return self.realize(self.probs(values), rng)
        return call


# ---- trace ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StageRecord:
    """1ステージの記録（配列はエージェント順）"""
    stage: int
    values: np.ndarray
    bids: np.ndarray
    inferred: np.ndarray
    extrapolated: np.ndarray
    alloc_probs: np.ndarray
    realized: np.ndarray
    payments: np.ndarray
    expected_payments: np.ndarray
    truthful_payments: np.ndarray
    residuals: np.ndarray
    resolved: np.ndarray
    balances: np.ndarray
    dashboards: Tuple[Optional[Dashboard], ...]
    projections: Tuple[MonotoneRule, ...]
    etas: Optional[np.ndarray] = None
    reserve: float = 0.0
    explored: Optional[np.ndarray] = None
    implicit_payments: Optional[np.ndarray] = None


@dataclass(eq=False)
class Trace:
    """逐次実行の全記録"""
    config: dict
    seed: int
    mechanism: str
    format: PaymentFormat
    vmax: float
    records: List[StageRecord] = field(default_factory=list)
    ledgers: List[BalanceLedger] = field(default_factory=list)

    @property
    def stages(self) -> int:
        return len(self.records)

    @property
    def n_agents(self) -> int:
        return len(self.records[0].values) if self.records else 0

    def column(self, name: str) -> np.ndarray:
        """(stages, agents) の配列"""
        return np.vstack([getattr(r, name) for r in self.records])

    def rows(self) -> List[dict]:
        out = []
        for r in self.records:
            for i in range(len(r.values)):
                out.append({
                    "stage": r.stage,
                    "agent": i,
                    "value": float(r.values[i]),
                    "bid": float(r.bids[i]),
                    "inferred_value": float(r.inferred[i]),
                    "alloc_prob": float(r.alloc_probs[i]),
                    "realized": int(r.realized[i]),
                    "payment": float(r.payments[i]),
                    "truthful_payment": float(r.truthful_payments[i]),
                    "residual": float(r.residuals[i]),
                    "resolved": float(r.resolved[i]),
                    "balance": float(r.balances[i]),
                })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    def to_json(self) -> dict:
        stages = []
        for r in self.records:
            stages.append({
                "stage": r.stage,
                "reserve": r.reserve,
                "values": r.values.tolist(),
                "bids": r.bids.tolist(),
                "inferred": r.inferred.tolist(),
                "extrapolated": r.extrapolated.tolist(),
                "alloc_probs": r.alloc_probs.tolist(),
                "realized": r.realized.tolist(),
                "payments": r.payments.tolist(),
                "expected_payments": r.expected_payments.tolist(),
                "truthful_payments": r.truthful_payments.tolist(),
                "residuals": r.residuals.tolist(),
                "resolved": r.resolved.tolist(),
                "balances": r.balances.tolist(),
                "dashboards": [d.fingerprint if d is not None else None for d in r.dashboards],
                "explored": r.explored.tolist() if r.explored is not None else None,
                "implicit_payments": r.implicit_payments.tolist() if r.implicit_payments is not None else None,
            })
        return {
            "config": self.config,
            "seed": self.seed,
            "mechanism": self.mechanism,
            "format": self.format.value,
            "vmax": self.vmax,
            "stages": stages,
            "ledgers": [
                {"balance": l.balance, "rate": l.rate, "active": l.active, "entries": [e._asdict() for e in l.entries]}
                for l in self.ledgers
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False, sort_keys=True)


# ---- simulator ------------------------------------------------------------

def _plain_bid(rule: MonotoneRule, v: float, fmt: PaymentFormat) -> float:
    """transfer 0 の戦略。WPBの勝てない領域は 0"""
    s = _strategy_values(rule, np.array([v]), fmt, 0.0)[0]
    return 0.0 if math.isnan(s) else float(s)


class DashboardSimulator:
    """
    逐次ダッシュボードメカニズムの1回の実行

    状態（履歴・台帳・学習器）はエージェントごとに持ち、ステージループだけが更新する。
    """

    def __init__(self, config: ExperimentConfig, seed: Optional[int] = None):
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.format = PaymentFormat(config.format)
        self.vmax = config.vmax
        self.algorithm = AllocationAlgorithm.from_config(config)
        self.agents: List[AgentSpec] = config.build_agents()
        self.policy = config.build_policy()
        self.n = len(self.agents)
        reb = config.rebalancing
        self.mode = reb.mode
        self.histories = [RuleHistory() for _ in range(self.n)]
        self.inst_histories = [InstrumentedHistory() for _ in range(self.n)]
        self.ledgers = [
            BalanceLedger(
                balance=reb.initial_balance,
                rate=reb.eta if reb.eta is not None else 1.0,
                dead_band=reb.dead_band,
                active=reb.mode != "off",
            )
            for _ in range(self.n)
        ]
        self.singlecall = config.singlecall.enabled
        self.rho = config.singlecall.rho

    # 1エージェント分のダッシュボード公開
    def _publish(self, i: int) -> Tuple[Dashboard, MonotoneRule, float]:
        ledger = self.ledgers[i]
        if self.singlecall:
            base, avg = build_instrumented_dashboard(
                self.inst_histories[i], self.rho, self.vmax, self.format,
                initial_rule=self.policy.initial_rule, grid=self.config.grid,
            )
            eta = self.config.rebalancing.eta or max(default_eta(self.rho, avg), settings.NO_WIN_THRESHOLD)
        else:
            base = build_dashboard(self.policy, self.histories[i], self.format, vmax=self.vmax)
            eta = ledger.rate
        ealloc = base.ealloc
        stage = base.stage_index
        if self.mode == "off":
            return base, ealloc, eta
        ledger.rate = min(eta, 1.0)
        target = ledger.target(self.vmax)
        if self.format == PaymentFormat.ALL_PAY:
            return reference_rebalancing(ealloc, self.format, target, ledger.rate, stage), ealloc, ledger.rate
        if float(ealloc.probs[0]) < ledger.rate or not self.singlecall:
            ealloc = clamp_support(ealloc, ledger.rate)
        dashboard, _ = ir_rebalancing(ealloc, target, ledger.rate, stage)
        return dashboard, ealloc, ledger.rate

    def _learner_feedback(self, i: int, d: Dashboard, projection: MonotoneRule, value: float) -> None:
        strategy = self.agents[i].strategy
        if not strategy.needs_feedback:
            return
        utilities = stage_utilities(strategy.grid, value, realized_alloc_fn(d, projection), self.format)
        strategy.update(utilities)

    def step(self, stage: int) -> StageRecord:
        n, fmt, seed = self.n, self.format, self.seed
        values = np.array([
            a.value_path.value_at(stage, substream(seed, stage, i, Purpose.VALUE)) for i, a in enumerate(self.agents)
        ])
        stage_alg = self.algorithm.draw_stage(substream(seed, stage, n, Purpose.ALGORITHM))

        dashboards, ealloc_used = [], []
        etas = np.empty(n)
        for i in range(n):
            d, ealloc, etas[i] = self._publish(i)
            dashboards.append(d)
            ealloc_used.append(ealloc)

        bids = np.array([
            a.strategy.act(dashboards[i], values[i], substream(seed, stage, i, Purpose.AGENT))
            for i, a in enumerate(self.agents)
        ])
        inferred = np.empty(n)
        extrapolated = np.zeros(n, dtype=bool)
        for i in range(n):
            try:
                inf = dashboard_infer(dashboards[i], bids[i])
            except NonInvertibleError as e:
                raise EngineError(f"dashboard for agent {i} is not invertible: {e}", stage) from e
            inferred[i], extrapolated[i] = inf.value, inf.extrapolated
        if np.any(extrapolated):
            logger.debug(f"Stage {stage}: bids clamped for agents {np.flatnonzero(extrapolated).tolist()}")

        alloc_probs = stage_alg.probs(inferred)
        projections = tuple(stage_alg.project(i, inferred) for i in range(n))

        explored = implicit = None
        if self.singlecall:
            cfg = InstrumentConfig(rho=self.rho, vmax=self.vmax, seed=seed)
            outcome = instrument_draw(stage_alg.blackbox(), inferred, cfg, substream(seed, stage, n, Purpose.EXPLORE))
            realized = outcome.realized
            explored, implicit = outcome.explored, outcome.implicit_payment
        else:
            realized = stage_alg.realize(alloc_probs, substream(seed, stage, n, Purpose.REALIZE))

        wpb = fmt == PaymentFormat.WINNER_PAYS_BID
        payments = bids * realized if wpb else bids.copy()
        expected = bids * alloc_probs if wpb else bids.copy()
        truthful = np.array([truthful_payment(projections[i], inferred[i]) for i in range(n)])

        residuals = np.zeros(n)
        resolved = np.zeros(n)
        balances = np.zeros(n)
        for i in range(n):
            ledger = self.ledgers[i]
            v = float(inferred[i])
            plain = _plain_bid(ealloc_used[i], v, fmt)
            premium = float(dashboard_bid(dashboards[i], v)) - plain if self.mode != "off" else 0.0
            before = len(ledger.entries)
            if self.singlecall:
                update_balance_singlecall(ledger, float(implicit[i]), int(realized[i]), float(bids[i]), premium, fmt, stage)
            elif wpb:
                if realized[i]:
                    s_real = _plain_bid(projections[i], v, fmt)
                    update_balance_wpb(ledger, s_real, float(bids[i]), 1, premium, stage)
            else:
                update_balance_allpay(ledger, float(truthful[i]), float(bids[i]), premium, stage)
            if len(ledger.entries) > before:
                residuals[i], resolved[i] = ledger.entries[-1].residual, ledger.entries[-1].resolved
            balances[i] = ledger.balance

            self.histories[i].append(projections[i], bool(realized[i]))
            if self.singlecall:
                self.inst_histories[i].append(outcome.sampled[i], realized[i], bool(explored[i]))
            self._learner_feedback(i, dashboards[i], projections[i], float(values[i]))

        return StageRecord(
            stage=stage,
            values=values,
            bids=bids,
            inferred=inferred,
            extrapolated=extrapolated,
            alloc_probs=alloc_probs,
            realized=realized,
            payments=payments,
            expected_payments=expected,
            truthful_payments=truthful,
            residuals=residuals,
            resolved=resolved,
            balances=balances,
            dashboards=tuple(dashboards),
            projections=projections,
            etas=etas,
            reserve=stage_alg.reserve,
            explored=explored,
            implicit_payments=implicit,
        )

    def run(self) -> Trace:
        trace = Trace(
            config=self.config.model_dump(mode="json"),
            seed=self.seed,
            mechanism="dashboard",
            format=self.format,
            vmax=self.vmax,
        )
        every = settings.PROGRESS_EVERY
        for stage in range(1, self.config.stages + 1):
            try:
                trace.records.append(self.step(stage))
            except (NoWinRegionError, ProjectionError) as e:
                raise EngineError(str(e), stage) from e
            if stage % every == 0:
                logger.info(
                    f"Run {self.config.name} seed {self.seed}: stage {stage}/{self.config.stages}, "
                    f"max |B| {max(abs(l.balance) for l in self.ledgers):.6g}"
                )
        trace.ledgers = [l.snapshot() for l in self.ledgers]
        return trace


def run_dashboard_mechanism(config: ExperimentConfig, seed: Optional[int] = None) -> Trace:
    """ダッシュボードメカニズムを実行"""
    return DashboardSimulator(config, seed).run()


def run_truthful_mechanism(config: ExperimentConfig, reported: np.ndarray, seed: Optional[int] = None) -> Trace:
    """
    逐次真実メカニズム

    同じシードで同じステージアルゴリズム・同じ実現乱数を使い、
    各エージェントの射影ルールに対する支払い恒等式の支払いを課す。
    """
    seed = config.seed if seed is None else seed
    fmt = PaymentFormat(config.format)
    algorithm = AllocationAlgorithm.from_config(config)
    reported = np.atleast_2d(np.asarray(reported, dtype=float))
    n = algorithm.n
    if reported.shape[1] != n:
        raise DomainError(f"reported values need {n} columns, got {reported.shape[1]}")
    trace = Trace(config=config.model_dump(mode="json"), seed=seed, mechanism="truthful", format=fmt, vmax=config.vmax)
    for stage, values in enumerate(reported, start=1):
        stage_alg = algorithm.draw_stage(substream(seed, stage, n, Purpose.ALGORITHM))
        probs = stage_alg.probs(values)
        projections = tuple(stage_alg.project(i, values) for i in range(n))
        realized = stage_alg.realize(probs, substream(seed, stage, n, Purpose.REALIZE))
        pay = np.array([truthful_payment(projections[i], values[i]) for i in range(n)])
        zeros = np.zeros(n)
        trace.records.append(StageRecord(
            stage=stage,
            values=values.copy(),
            bids=pay.copy(),
            inferred=values.copy(),
            extrapolated=np.zeros(n, dtype=bool),
            alloc_probs=probs,
            realized=realized,
            payments=pay.copy(),
            expected_payments=pay.copy(),
            truthful_payments=pay,
            residuals=zeros,
            resolved=zeros.copy(),
            balances=zeros.copy(),
            dashboards=(None,) * n,
            projections=projections,
            reserve=stage_alg.reserve,
        ))
    trace.ledgers = [BalanceLedger() for _ in range(n)]
    return trace
