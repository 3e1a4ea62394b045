"""
残高上界のためのシード並列ハーネス

エンジン全体（履歴・ポリシー・推定）を回さず、台帳の経路だけをシードごとに進める。
各ステージで
- 真の配分ルール z/(z + w) と、ダッシュボードが想定する z/(z + w′) を独立に引く（食い違い）
- 価値 ṽ を U[0, vmax] から引き、エージェントはダッシュボードに従う
- エンジンと同じ clamp_support・reference_rebalancing・ir_rebalancing・update_balance_*・
  instrument_draw で台帳を更新する
シードは ProcessPoolExecutor に分配する（workers=1 で逐次）。
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from src.utils.analysis import chernoff_bound
from src.utils.dashboards import dashboard_bid
from src.utils.rebalancing import (
    BalanceLedger,
    clamp_support,
    ir_rebalancing,
    reference_rebalancing,
    residual_and_resolved,
    update_balance_allpay,
    update_balance_wpb,
)
from src.utils.rulekit import DomainError, MonotoneRule, PaymentFormat, bid_strategy, evaluate, truthful_payment
from src.utils.singlecall import InstrumentConfig, instrument_draw, update_balance_singlecall

logger = logging.getLogger(__name__)

HARNESS_GRID = 129

WPB = PaymentFormat.WINNER_PAYS_BID
ALL_PAY = PaymentFormat.ALL_PAY


def proportional_rule(w: float, vmax: float, grid: int = HARNESS_GRID) -> MonotoneRule:
    """x(z) = z/(z + w) をグリッド上のルールにする"""
    if w <= 0:
        raise DomainError(f"competing weight must be positive: {w}")
    return MonotoneRule.from_function(lambda z: z / (z + w), vmax, grid)


@dataclass(frozen=True, eq=False)
class BalancePaths:
    """(stages, seeds) の残高系列"""
    balances: np.ndarray
    before: np.ndarray
    values: np.ndarray
    low_value: np.ndarray
    eta: float
    vmax: float
    rho: Optional[float] = None
    v_dagger: Optional[np.ndarray] = None

    @property
    def stages(self) -> int:
        return self.balances.shape[0]

    @property
    def max_abs(self) -> np.ndarray:
        """シードごとの max_t |B⁽ᵗ⁾|"""
        return np.max(np.abs(self.balances), axis=0)

    @property
    def inconsistency(self) -> np.ndarray:
        """シードごとの |B⁽ᵗ⁾|/t"""
        return np.abs(self.balances[-1]) / self.stages

    def violation_fraction(self, bound: float) -> float:
        return float(np.mean(self.max_abs > bound))


class PathJob(NamedTuple):
    """1シード分の経路の入力（プロセス間で pickle される）"""
    fmt: PaymentFormat
    mode: str
    eta: float
    stages: int
    vmax: float
    w_range: Tuple[float, float]
    grid: int
    base_seed: int
    seed: int
    rho: Optional[float] = None


def path_rng(base_seed: int, seed: int) -> np.random.Generator:
    """シードごとの独立ストリーム"""
    return np.random.default_rng(np.random.SeedSequence(base_seed, spawn_key=(seed,)))


def _blackbox(rule: MonotoneRule):
    def call(values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return (rng.random(values.shape) < evaluate(rule, values)).astype(int)
    return call


def _run_path(job: PathJob) -> Dict[str, np.ndarray]:
    """1シードの経路をステージごとに進める"""
    rng = path_rng(job.base_seed, job.seed)
    ledger = BalanceLedger(rate=job.eta)
    n = job.stages
    out = {
        "balances": np.empty(n),
        "before": np.empty(n),
        "values": np.empty(n),
        "low_value": np.zeros(n, dtype=bool),
        "v_dagger": np.zeros(n),
    }
    lo, hi = job.w_range
    cfg = InstrumentConfig(rho=job.rho, vmax=job.vmax, seed=job.seed) if job.rho is not None else None
    for s in range(n):
        stage = s + 1
        v = float(rng.uniform(0.0, job.vmax))
        true = proportional_rule(float(rng.uniform(lo, hi)), job.vmax, job.grid)
        forecast = proportional_rule(float(rng.uniform(lo, hi)), job.vmax, job.grid)
        B = ledger.target(job.vmax)
        out["before"][s] = ledger.balance
        out["values"][s] = v

        if job.fmt == ALL_PAY:
            d = reference_rebalancing(forecast, ALL_PAY, B, job.eta, stage)
            bid = float(dashboard_bid(d, v))
            premium = bid - float(bid_strategy(forecast, v, ALL_PAY))
            update_balance_allpay(ledger, float(truthful_payment(true, v)), bid, premium, stage)
        elif job.mode == "reference":
            # 解析専用の変種（入札は逆変換できない）なので台帳を直接更新する
            ealloc = clamp_support(forecast, job.eta)
            won = int(rng.random() < float(evaluate(true, v)))
            residual, resolved = residual_and_resolved(true, ealloc, WPB, v, B, job.eta, won)
            if won:
                ledger.record(stage, residual, resolved)
        else:
            ealloc = clamp_support(forecast, job.eta)
            d, splice = ir_rebalancing(ealloc, B, job.eta, stage)
            out["v_dagger"][s] = splice.v_dagger
            out["low_value"][s] = B > 0 and v <= splice.v_dagger
            bid = float(dashboard_bid(d, v))
            premium = bid - float(bid_strategy(ealloc, v, WPB))
            if cfg is None:
                if rng.random() < float(evaluate(true, v)):
                    update_balance_wpb(ledger, float(bid_strategy(true, v, WPB)), bid, 1, premium, stage)
            else:
                outcome = instrument_draw(_blackbox(true), [v], cfg, rng)
                update_balance_singlecall(
                    ledger, float(outcome.implicit_payment[0]), int(outcome.realized[0]), bid, premium, WPB, stage,
                )
        out["balances"][s] = ledger.balance
    return out


def _fan_out(jobs: List[PathJob], workers: int) -> List[Dict[str, np.ndarray]]:
    if workers <= 1 or len(jobs) <= 1:
        return [_run_path(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_path, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def _stack(results: List[Dict[str, np.ndarray]], key: str) -> np.ndarray:
    return np.stack([r[key] for r in results], axis=1)


def simulate_balance_paths(
    fmt: PaymentFormat,
    mode: str,
    eta: float,
    stages: int,
    seeds: int,
    vmax: float = 1.0,
    w_range: Tuple[float, float] = (0.1, 5.0),
    base_seed: int = 0,
    grid: int = HARNESS_GRID,
    workers: int = 1,
) -> BalancePaths:
    """
    リバランシング台帳の経路をシードごとに計算

    AllPay reference: B′ = B + s(ṽ) − ŝ(ṽ) − Bη
    WPB reference: 勝ったとき B′ = B + s(ṽ) − ŝ(ṽ) − Bη/x̂(ṽ)
    WPB ir: 勝ったとき B′ = B + s(ṽ) − IRスプライスの入札
    WPB のダッシュボードは [η, 1] にクランプする。
    """
    fmt = PaymentFormat(fmt)
    if not 0.0 < eta <= 1.0:
        raise DomainError(f"rebalancing rate must be in (0, 1]: {eta}")
    wpb = fmt == WPB
    if wpb and eta >= 1.0:
        raise DomainError("winner-pays-bid dashboards need eta < 1")
    if mode not in ("reference", "ir") or (mode == "ir" and not wpb):
        raise DomainError(f"unsupported harness mode {mode} for {fmt.value}")
    jobs = [PathJob(fmt, mode, eta, stages, vmax, w_range, grid, base_seed, seed) for seed in range(seeds)]
    logger.info(f"Harness {fmt.value}/{mode}: {seeds} seeds x {stages} stages, eta={eta}, workers={workers}")
    results = _fan_out(jobs, workers)
    return BalancePaths(
        _stack(results, "balances"),
        _stack(results, "before"),
        _stack(results, "values"),
        _stack(results, "low_value"),
        eta,
        vmax,
        v_dagger=_stack(results, "v_dagger") if mode == "ir" else None,
    )


def simulate_singlecall_paths(
    rho: float,
    eta: float,
    stages: int,
    seeds: int,
    vmax: float = 1.0,
    w_range: Tuple[float, float] = (0.1, 5.0),
    base_seed: int = 0,
    grid: int = HARNESS_GRID,
    workers: int = 1,
) -> BalancePaths:
    """
    シングルコール台帳（WPB、IRスプライス）の経路

    計装ドローで実現配分と p̂ = v·(x̂ − (1−ρ)/ρ·Ŷ) を得て、
    B′ = B + p̂ − 実現配分·入札 と更新する。
    """
    if not 0.0 < rho < 1.0:
        raise DomainError(f"rho must be in (0, 1): {rho}")
    if not 0.0 < eta < 1.0:
        raise DomainError(f"eta must be in (0, 1): {eta}")
    jobs = [PathJob(WPB, "ir", eta, stages, vmax, w_range, grid, base_seed, seed, rho) for seed in range(seeds)]
    logger.info(f"Single-call harness: {seeds} seeds x {stages} stages, rho={rho}, eta={eta}, workers={workers}")
    results = _fan_out(jobs, workers)
    return BalancePaths(
        _stack(results, "balances"),
        _stack(results, "before"),
        _stack(results, "values"),
        _stack(results, "low_value"),
        eta,
        vmax,
        rho=rho,
        v_dagger=_stack(results, "v_dagger"),
    )


def chernoff_violation_fraction(paths: BalancePaths, delta: float) -> Tuple[float, float]:
    """(違反割合, 上界 vmax/η + (vmax/ρ)·√(ln(2/δ)/(2η)))"""
    if paths.rho is None:
        raise DomainError("chernoff bound applies to single-call paths")
    bound = chernoff_bound(paths.vmax, paths.rho, paths.eta, delta)
    return paths.violation_fraction(bound), bound
