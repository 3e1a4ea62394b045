"""
単一エージェントのMyerson計算ツールキット

配分ルール x: [0, vmax] → [0, 1] をノット上の区分線形関数として保持し、
支払い恒等式・入札戦略・逆変換・入札空間の配分ルールを計算する。
"""
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import settings

logger = logging.getLogger(__name__)

ArrayLike = Union[float, Sequence[float], np.ndarray]


class DomainError(ValueError):
    """定義域外の入力"""


class NoWinRegionError(ZeroDivisionError):
    """WPBで x(v)=0 の領域（勝てない価値）"""


class NonInvertibleError(RuntimeError):
    """入札戦略が狭義単調増加でない"""

    def __init__(self, message: str, segment: Tuple[float, float]):
        super().__init__(f"{message} (segment=[{segment[0]:.6g}, {segment[1]:.6g}])")
        self.segment = segment


class DegenerateError(ValueError):
    """支払いが余剰と一致する退化ケース"""


class PaymentFormat(str, Enum):
    """支払い形式"""
    WINNER_PAYS_BID = "winner_pays_bid"
    ALL_PAY = "all_pay"


class Inference(NamedTuple):
    """入札から推定した価値と、定義域外でクランプしたかのフラグ"""
    value: Union[float, np.ndarray]
    extrapolated: Union[bool, np.ndarray]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MonotoneRule:
    """
    単調な配分ルール（区分線形、最終ノット以降は定数延長）

    strict=True の場合、各区間の傾きが min_slope 以上であることを構築時に検証する。
    解析専用のルールは strict=False（relaxed）で構築できる。
    """
    values: np.ndarray
    probs: np.ndarray
    vmax: float
    strict: bool = True
    min_slope: float = settings.MIN_SLOPE
    _cum: np.ndarray = field(init=False, repr=False)
    _slopes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        values = _readonly(self.values)
        probs = _readonly(self.probs)
        if values.ndim != 1 or values.shape != probs.shape or len(values) < 2:
            raise DomainError("knots must be two or more (value, prob) pairs")
        if self.vmax <= 0:
            raise DomainError(f"vmax must be positive: {self.vmax}")
        if values[0] != 0.0:
            raise DomainError(f"first knot must be at value 0, got {values[0]}")
        dv = np.diff(values)
        if np.any(dv <= 0):
            raise DomainError("knot values must be strictly increasing")
        if np.any(probs < 0.0) or np.any(probs > 1.0):
            raise DomainError("probs must lie in [0, 1]")
        dp = np.diff(probs)
        if np.any(dp < 0):
            i = int(np.argmax(dp < 0))
            raise DomainError(f"probs decrease on segment [{values[i]:.6g}, {values[i + 1]:.6g}]")
        slopes = dp / dv
        if self.strict and np.any(slopes < self.min_slope):
            i = int(np.argmax(slopes < self.min_slope))
            raise DomainError(
                f"rule is not strictly monotone: slope {slopes[i]:.3g} < {self.min_slope:.3g} "
                f"on [{values[i]:.6g}, {values[i + 1]:.6g}]"
            )
        # 各ノットまでの累積積分（区間ごとの台形則で厳密）
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (probs[1:] + probs[:-1]) * dv)])
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "_cum", _readonly(cum))
        # 最終ノット以降は傾き0で定数延長
        object.__setattr__(self, "_slopes", _readonly(np.append(slopes, 0.0)))

    # ---- factories -------------------------------------------------------

    @classmethod
    def from_function(
        cls,
        fn: Callable[[np.ndarray], ArrayLike],
        vmax: float,
        grid: Optional[int] = None,
        strict: bool = True,
    ) -> "MonotoneRule":
        """関数を一様グリッド上でサンプリングしてルールを作成"""
        grid = grid or settings.GRID_SIZE
        values = np.linspace(0.0, vmax, grid)
        probs = np.asarray(fn(values), dtype=float) * np.ones_like(values)
        return cls(values, np.clip(probs, 0.0, 1.0), vmax, strict=strict)

    @classmethod
    def from_knots(
        cls,
        knots: Sequence[Tuple[float, float]],
        vmax: Optional[float] = None,
        strict: bool = True,
    ) -> "MonotoneRule":
        arr = np.asarray(knots, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise DomainError("knots must be [value, prob] pairs")
        return cls(arr[:, 0], arr[:, 1], vmax if vmax is not None else float(arr[-1, 0]), strict=strict)

    @classmethod
    def linear(cls, vmax: float, grid: Optional[int] = None, min_slope: Optional[float] = None) -> "MonotoneRule":
        """初期ダッシュボード用の線形ルール x(v) = max(min_slope, v/vmax)"""
        floor = settings.MIN_SLOPE if min_slope is None else min_slope
        return cls.from_function(lambda v: np.maximum(floor, v / vmax), vmax, grid)

    def to_json(self) -> list:
        return [[float(v), float(p)] for v, p in zip(self.values, self.probs)]

    @classmethod
    def from_json(cls, data: Union[str, list], vmax: Optional[float] = None, strict: bool = True) -> "MonotoneRule":
        if isinstance(data, str):
            data = json.loads(data)
        return cls.from_knots(data, vmax=vmax, strict=strict)

    # ---- helpers ---------------------------------------------------------

    @property
    def slopes(self) -> np.ndarray:
        return self._slopes[:-1]

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha1()
        h.update(self.values.tobytes())
        h.update(self.probs.tobytes())
        h.update(repr(float(self.vmax)).encode())
        return h.hexdigest()[:16]

    def resample(self, values: np.ndarray, strict: Optional[bool] = None) -> "MonotoneRule":
        """別のノット列上に再サンプリング"""
        return MonotoneRule(
            values,
            np.interp(values, self.values, self.probs),
            self.vmax,
            strict=self.strict if strict is None else strict,
            min_slope=self.min_slope,
        )

    def with_probs(self, probs: np.ndarray, strict: Optional[bool] = None) -> "MonotoneRule":
        return MonotoneRule(
            self.values, probs, self.vmax,
            strict=self.strict if strict is None else strict,
            min_slope=self.min_slope,
        )

    def __call__(self, v: ArrayLike):
        return evaluate(self, v)


def _as_array(v: ArrayLike) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(v, dtype=float)
    return np.atleast_1d(arr), arr.ndim == 0


def _out(arr: np.ndarray, scalar: bool):
    return float(arr[0]) if scalar else arr


def evaluate(rule: MonotoneRule, v: ArrayLike):
    """x(v) を線形補間で評価（vmax 超は最終ノットの値）"""
    arr, scalar = _as_array(v)
    if np.any(arr < 0):
        raise DomainError(f"value must be non-negative: {arr.min()}")
    return _out(np.interp(arr, rule.values, rule.probs), scalar)


def cumulative(rule: MonotoneRule, v: ArrayLike):
    """∫₀ᵛ x(z) dz を区間ごとに厳密に計算"""
    arr, scalar = _as_array(v)
    if np.any(arr < 0) or np.any(arr > rule.vmax * (1 + 1e-12)):
        raise DomainError(f"value outside [0, {rule.vmax}]")
    n = len(rule.values)
    idx = np.clip(np.searchsorted(rule.values, arr, side="right") - 1, 0, n - 1)
    dv = arr - rule.values[idx]
    out = rule._cum[idx] + dv * (rule.probs[idx] + 0.5 * rule._slopes[idx] * dv)
    return _out(out, scalar)


def truthful_payment(rule: MonotoneRule, v: ArrayLike, transfer: float = 0.0):
    """支払い恒等式 p(v) = v·x(v) − ∫₀ᵛ x + p(0)"""
    arr, scalar = _as_array(v)
    out = arr * evaluate(rule, arr) - cumulative(rule, arr) + transfer
    return _out(out, scalar)


def _strategy_values(rule: MonotoneRule, v: np.ndarray, fmt: PaymentFormat, transfer: float) -> np.ndarray:
    """入札戦略をベクトルで計算。WPBの勝てない領域は NaN"""
    x = evaluate(rule, v)
    pay = v * x - cumulative(rule, v) + transfer
    if fmt == PaymentFormat.ALL_PAY:
        return pay
    bids = np.full_like(v, np.nan)
    winnable = x >= settings.NO_WIN_THRESHOLD
    bids[winnable] = pay[winnable] / x[winnable]
    # v=0 は右極限で定義（transfer=0 のとき 0）
    bids[(v == 0) & ~winnable & (transfer == 0)] = 0.0
    return bids


def bid_strategy(rule: MonotoneRule, v: ArrayLike, fmt: PaymentFormat, transfer: float = 0.0):
    """
    価値 v に対する最適入札

    WPB: v − (1/x(v))∫₀ᵛx + transfer/x(v)
    AllPay: v·x(v) − ∫₀ᵛx + transfer
    """
    arr, scalar = _as_array(v)
    bids = _strategy_values(rule, arr, PaymentFormat(fmt), transfer)
    if np.any(np.isnan(bids)):
        bad = float(arr[np.isnan(bids)][0])
        raise NoWinRegionError(f"no-win region: x({bad:.6g}) < {settings.NO_WIN_THRESHOLD}")
    return _out(bids, scalar)


@dataclass(frozen=True, eq=False)
class BidRule:
    """
    入札空間の配分ルール x̃ = x ∘ s⁻¹

    values/bids は逆変換用の戦略テーブル。exact=True の場合、テーブル間は
    戦略の式そのものを二分法で逆変換する。exact=False の場合はテーブルが
    入札写像の定義であり、区間内は線形補間する。
    """
    format: PaymentFormat
    value_rule: MonotoneRule
    transfer: float
    values: np.ndarray
    bids: np.ndarray
    exact: bool = True

    def __post_init__(self):
        object.__setattr__(self, "values", _readonly(self.values))
        object.__setattr__(self, "bids", _readonly(self.bids))

    @property
    def vmax(self) -> float:
        return self.value_rule.vmax

    @property
    def domain_start(self) -> float:
        return float(self.values[0])

    @property
    def bid_range(self) -> Tuple[float, float]:
        return float(self.bids[0]), float(self.bids[-1])

    def strategy(self, v: ArrayLike):
        arr, scalar = _as_array(v)
        if self.exact:
            out = _strategy_values(self.value_rule, arr, self.format, self.transfer)
            # 定義域より下の価値はテーブル下端の入札
            out = np.where(arr < self.values[0], self.bids[0], out)
        else:
            out = np.interp(arr, self.values, self.bids)
        return _out(out, scalar)

    def invert(self, b: ArrayLike, tol: Optional[float] = None) -> Inference:
        return invert_strategy(self, b, tol)

    def alloc(self, b: ArrayLike):
        """x̃(b)"""
        inf = invert_strategy(self, b)
        return evaluate(self.value_rule, inf.value)

    def payment(self, b: ArrayLike):
        """p̃(b): WPB は b·x̃(b)、AllPay は b"""
        arr, scalar = _as_array(b)
        out = arr * self.alloc(arr) if self.format == PaymentFormat.WINNER_PAYS_BID else arr.copy()
        return _out(out, scalar)

    @classmethod
    def from_table(
        cls,
        fmt: PaymentFormat,
        value_rule: MonotoneRule,
        values: np.ndarray,
        bids: np.ndarray,
        transfer: float = 0.0,
    ) -> "BidRule":
        """入札写像をテーブルとして直接与える（IRスプライス用）"""
        bids = np.asarray(bids, dtype=float)
        if np.any(np.diff(bids) <= 0):
            i = int(np.argmax(np.diff(bids) <= 0))
            raise NonInvertibleError("bid table not strictly increasing", (float(values[i]), float(values[i + 1])))
        return cls(PaymentFormat(fmt), value_rule, transfer, values, bids, exact=False)


@dataclass(frozen=True)
class BidCurve:
    """明示的に与えられた入札空間の配分ルール x̃(b)（導関数は任意）"""
    alloc_fn: Callable[[np.ndarray], np.ndarray]
    format: PaymentFormat
    bid_lo: float
    bid_hi: float
    deriv_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def alloc(self, b: ArrayLike):
        arr, scalar = _as_array(b)
        return _out(np.asarray(self.alloc_fn(arr), dtype=float), scalar)

    def payment(self, b: ArrayLike):
        arr, scalar = _as_array(b)
        out = arr * self.alloc(arr) if self.format == PaymentFormat.WINNER_PAYS_BID else arr.copy()
        return _out(out, scalar)


def make_bid_rule(
    rule: MonotoneRule,
    fmt: PaymentFormat,
    transfer: float = 0.0,
    relaxed: bool = False,
) -> BidRule:
    """
    戦略テーブルを構築し、狭義単調性を検査する

    1. ルールの狭義単調性を確認（relaxed=True で省略）
    2. WPB かつ transfer > 0 は常に逆変換不能（v=0 で戦略の傾きが負）
    3. WPB の勝てないノットは定義域から除外
    4. テーブルの入札が狭義単調増加であることを確認
    """
    fmt = PaymentFormat(fmt)
    if not rule.strict and not relaxed:
        raise DomainError("bid rule requires a strictly monotone allocation rule")
    bids = _strategy_values(rule, rule.values, fmt, transfer)
    valid = ~np.isnan(bids)
    values, bids = rule.values[valid], bids[valid]
    if len(values) < 2:
        raise NoWinRegionError("allocation rule never wins")
    steps = np.diff(bids)
    if fmt == PaymentFormat.WINNER_PAYS_BID and transfer > 0:
        i = int(np.argmax(steps <= 0)) if np.any(steps <= 0) else 0
        raise NonInvertibleError(
            f"winner-pays-bid strategy with transfer {transfer:.6g} > 0 is not increasing",
            (float(values[i]), float(values[i + 1])),
        )
    if np.any(steps <= 0):
        i = int(np.argmax(steps <= 0))
        raise NonInvertibleError("bid strategy not strictly increasing", (float(values[i]), float(values[i + 1])))
    return BidRule(fmt, rule, transfer, values, bids, exact=True)


def invert_strategy(bid_rule: BidRule, b: ArrayLike, tol: Optional[float] = None) -> Inference:
    """
    入札から価値を二分法で逆算

    範囲外の入札は定義域の端点にクランプし、extrapolated フラグを立てる。
    """
    arr, scalar = _as_array(b)
    tol = (settings.INVERT_TOL if tol is None else tol) * bid_rule.vmax
    values, bids = bid_rule.values, bid_rule.bids
    lo_b, hi_b = bids[0], bids[-1]
    extrapolated = (arr < lo_b) | (arr > hi_b)
    bc = np.clip(arr, lo_b, hi_b)
    j = np.clip(np.searchsorted(bids, bc, side="right") - 1, 0, len(bids) - 2)
    lo, hi = values[j].copy(), values[j + 1].copy()
    if not bid_rule.exact:
        frac = (bc - bids[j]) / (bids[j + 1] - bids[j])
        out = lo + frac * (hi - lo)
    else:
        width = float(np.max(hi - lo)) if len(lo) else 0.0
        iters = max(1, int(math.ceil(math.log2(max(width, tol) / tol))) + 1)
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            go_right = _strategy_values(bid_rule.value_rule, mid, bid_rule.format, bid_rule.transfer) < bc
            lo = np.where(go_right, mid, lo)
            hi = np.where(go_right, hi, mid)
        out = 0.5 * (lo + hi)
        out = np.where(bc <= lo_b, values[0], np.where(bc >= hi_b, values[-1], out))
    if np.any(extrapolated):
        logger.debug(f"{int(np.sum(extrapolated))} bids outside [{lo_b:.6g}, {hi_b:.6g}] clamped")
    if scalar:
        return Inference(float(out[0]), bool(extrapolated[0]))
    return Inference(out, extrapolated)


def _bid_space_slope(alloc: Callable[[np.ndarray], np.ndarray], b: np.ndarray, lo: float, hi: float, h: float) -> np.ndarray:
    """入札空間の中心差分（端では片側差分）"""
    left = np.maximum(b - h, lo)
    right = np.minimum(b + h, hi)
    return (alloc(right) - alloc(left)) / (right - left)


def infer_value_foc(rule: Union[BidRule, BidCurve], b: ArrayLike) -> Inference:
    """
    一階条件から価値を推定

    WPB: v = b + x̃(b)/x̃′(b)、AllPay: v = 1/x̃′(b)
    """
    arr, scalar = _as_array(b)
    if isinstance(rule, BidCurve):
        lo_b, hi_b = rule.bid_lo, rule.bid_hi
        alloc = rule.alloc_fn
        deriv = rule.deriv_fn
    else:
        lo_b, hi_b = rule.bid_range
        tight = settings.INVERT_TOL * 1e-4

        def alloc(bids):
            return evaluate(rule.value_rule, invert_strategy(rule, bids, tight).value)

        deriv = None
    extrapolated = (arr < lo_b) | (arr > hi_b)
    bc = np.clip(arr, lo_b, hi_b)
    if deriv is not None:
        slope = np.asarray(deriv(bc), dtype=float)
    else:
        h = max(hi_b - lo_b, 1e-12) * 1e-6
        slope = _bid_space_slope(alloc, bc, lo_b, hi_b, h)
    if np.any(slope <= 0):
        raise NoWinRegionError("bid allocation rule has zero slope")
    if rule.format == PaymentFormat.ALL_PAY:
        out = 1.0 / slope
    else:
        out = bc + np.asarray(alloc(bc), dtype=float) / slope
    if scalar:
        return Inference(float(out[0]), bool(extrapolated[0]))
    return Inference(out, extrapolated)


def scale_rule(rule: MonotoneRule, alpha: float) -> MonotoneRule:
    """配分確率を α 倍する（WPBの入札戦略は不変）"""
    if alpha <= 0 or alpha * float(rule.probs.max()) > 1.0 + 1e-12:
        raise DomainError(f"scale {alpha} must keep probs within [0, 1]")
    return rule.with_probs(np.minimum(rule.probs * alpha, 1.0))


def _tail_nu(V: float, X: float, B: float, delta: float, beta: np.ndarray) -> np.ndarray:
    gap = V - B - beta
    return np.sqrt(gap ** 2 + 2.0 * beta * X / delta) - gap


def linear_tail_slope(V: float, X: float, P: float, delta: float, beta: float = 0.0) -> float:
    """
    V 以上で傾き δ の線形ルールについて、WPB入札配分ルールの入札 B+β での傾きを数値微分で求める
    """
    if X <= 0 or delta <= 0:
        raise DomainError("X and delta must be positive")
    B = P / X
    if V <= B:
        raise DegenerateError(f"payment per unit {B:.6g} is not below value {V:.6g}")
    h = 1e-6 * (V - B)
    pts = np.array([beta - h, beta + h])
    alloc = X + delta * _tail_nu(V, X, B, delta, pts)
    return float((alloc[1] - alloc[0]) / (2 * h))


def linear_tail_slope_closed(V: float, X: float, P: float, delta: float, beta: float = 0.0) -> float:
    """同じ傾きの閉形式 (X − δ(V−B−β))/√((V−B−β)² + 2βX/δ) + δ"""
    B = P / X
    if V <= B:
        raise DegenerateError(f"payment per unit {B:.6g} is not below value {V:.6g}")
    gap = V - B - beta
    return float((X - delta * gap) / math.sqrt(gap ** 2 + 2.0 * beta * X / delta) + delta)
