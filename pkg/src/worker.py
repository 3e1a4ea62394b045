import csv
import io
import json
import os
import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from sqlalchemy.orm import Session

from src.config import settings
from src.database import SessionLocal, engine as db_engine
from src.engine import EngineError, Trace, run_dashboard_mechanism
from src.experiment import ExperimentConfig, tolerance_overrides
from src.models import Base, ExperimentRun, StageRow, SweepResult
from src.utils.analysis import (
    Check,
    chernoff_bound,
    incentive_inconsistency,
    ledger_balance,
    max_abs_balance,
    min_rate,
    outstanding_balance,
    run_checks,
    singlecall_pathwise_bound,
)

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["stage", "agent", "outstanding_balance", "ledger_balance", "inconsistency"]
SWEEP_COLUMNS = [
    "seed", "status", "max_abs_balance", "bound", "violated", "chernoff_bound", "chernoff_violated",
]


def atomic_write(path: Path, text: str) -> None:
    """一時ファイルに書いてから置き換える"""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _csv_text(columns: List[str], rows: List[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


@dataclass
class RunResult:
    """1シードの実行結果（sweep の集計に使う）"""
    seed: int
    status: str
    max_abs_balance: float = 0.0
    bound: Optional[float] = None
    violated: bool = False
    chernoff_bound: Optional[float] = None
    chernoff_violated: Optional[bool] = None
    error: Optional[str] = None
    checks: List[Check] = field(default_factory=list)

    def row(self) -> dict:
        return {
            "seed": self.seed,
            "status": self.status,
            "max_abs_balance": self.max_abs_balance,
            "bound": self.bound if self.bound is not None else "",
            "violated": int(self.violated),
            "chernoff_bound": self.chernoff_bound if self.chernoff_bound is not None else "",
            "chernoff_violated": "" if self.chernoff_violated is None else int(self.chernoff_violated),
        }


@dataclass
class SweepSummary:
    name: str
    results: List[RunResult]
    chernoff_fraction: Optional[float] = None
    delta: Optional[float] = None

    @property
    def violations(self) -> List[RunResult]:
        return [r for r in self.results if r.violated]

    @property
    def errors(self) -> List[RunResult]:
        return [r for r in self.results if r.status == "error"]

    @property
    def chernoff_failed(self) -> bool:
        return self.chernoff_fraction is not None and self.chernoff_fraction > self.delta


class ExperimentWorker:
    """実験の実行と出力（ファイル・DB）"""

    def __init__(self, out_dir: Optional[str] = None, workers: Optional[int] = None):
        self.out_dir = Path(out_dir or settings.OUTPUT_DIR)
        self.workers = workers or settings.SWEEP_WORKERS

    # ---- outputs ---------------------------------------------------------

    @staticmethod
    def metric_rows(trace: Trace) -> List[dict]:
        outstanding = outstanding_balance(trace)
        ledger = ledger_balance(trace)
        rows = []
        for s in range(trace.stages):
            for i in range(trace.n_agents):
                rows.append({
                    "stage": s + 1,
                    "agent": i,
                    "outstanding_balance": float(outstanding[s, i]),
                    "ledger_balance": float(ledger[s, i]),
                    "inconsistency": float(abs(outstanding[s, i]) / (s + 1)),
                })
        return rows

    @staticmethod
    def report(trace: Trace, checks: List[Check]) -> str:
        """report.md（数値は全て analysis で trace から再計算できるもの）"""
        peak = max_abs_balance(ledger_balance(trace))
        outstanding = outstanding_balance(trace)
        alloc_gap, eps = incentive_inconsistency(trace)
        lines = [
            f"# Run report: {trace.config.get('name', 'experiment')} (seed {trace.seed})",
            "",
            f"- format: {trace.format.value}",
            f"- stages: {trace.stages}",
            f"- agents: {trace.n_agents}",
            f"- vmax: {trace.vmax!r}",
            f"- max |B| (ledger): {peak.value:.6g} at stage {peak.stage}, agent {peak.agent}",
            f"- max |B| (outstanding): {float(np.max(np.abs(outstanding))) if outstanding.size else 0.0:.6g}",
            "",
            "## Incentive inconsistency",
            "",
            "| agent | alloc gap | epsilon |",
            "|---|---|---|",
        ]
        for i in range(trace.n_agents):
            lines.append(f"| {i} | {alloc_gap[i]:.3g} | {eps[i]:.6g} |")
        lines += ["", "## Checks", ""]
        if not checks:
            lines.append("No bound checks apply to this configuration.")
        else:
            lines += ["| check | value | bound | result | stage |", "|---|---|---|---|---|"]
            for c in checks:
                result = "ok" if c.passed else ("VIOLATED" if c.enforced else "exceeded (informational)")
                stage = "" if c.stage is None else str(c.stage)
                lines.append(f"| {c.name} | {c.value:.6g} | {c.bound:.6g} | {result} | {stage} |")
        return "\n".join(lines) + "\n"

    def write_outputs(self, trace: Trace, checks: List[Check], out: Path) -> None:
        atomic_write(out / "trace.csv", trace.to_csv())
        atomic_write(out / "trace.json", trace.dumps())
        atomic_write(out / "metrics.csv", _csv_text(METRIC_COLUMNS, self.metric_rows(trace)))
        # 同じダッシュボードはノットを最初の出現時だけ書く
        seen = set()
        for r in trace.records:
            items = []
            for i, d in enumerate(r.dashboards):
                if d is None:
                    items.append({"agent": i, "id": None})
                elif d.fingerprint in seen:
                    items.append({"agent": i, "id": d.fingerprint, "ref": True})
                else:
                    seen.add(d.fingerprint)
                    items.append({"agent": i, **d.to_json()})
            atomic_write(out / "dashboards" / f"stage-{r.stage:06d}.json", json.dumps(items, sort_keys=True))
        atomic_write(out / "report.md", self.report(trace, checks))

    # ---- persistence -----------------------------------------------------

    @staticmethod
    def persist(db: Session, trace: Trace, result: RunResult, out: Path, sweep_name: Optional[str] = None) -> ExperimentRun:
        _, eps = incentive_inconsistency(trace)
        run = ExperimentRun(
            name=trace.config.get("name", "experiment"),
            sweep_name=sweep_name,
            seed=trace.seed,
            format=trace.format.value,
            stages=trace.stages,
            config_json=json.dumps(trace.config, sort_keys=True),
            status=result.status,
            error=result.error,
            max_abs_balance=result.max_abs_balance,
            inconsistency=float(eps.max()) if eps.size else 0.0,
            output_dir=str(out),
            finished_at=datetime.utcnow(),
        )
        db.add(run)
        db.flush()
        db.add_all([StageRow(run_id=run.id, **row) for row in trace.rows()])
        if sweep_name is not None:
            db.add(SweepResult(
                sweep_name=sweep_name,
                seed=trace.seed,
                run_id=run.id,
                max_abs_balance=result.max_abs_balance,
                bound=result.bound,
                violated=result.violated,
                status=result.status,
            ))
        db.commit()
        logger.info(f"Persisted run {run.id} ({run.name}, seed {run.seed})")
        return run

    # ---- execution -------------------------------------------------------

    def run_one(self, config: ExperimentConfig, seed: int, out: Path, sweep_name: Optional[str] = None) -> RunResult:
        """
        1シードを実行して出力を書く

        チェック違反は結果に記録する（送出は呼び出し側が enforce で行う）。
        """
        logger.info(f"Run {config.name} seed {seed}: {config.stages} stages -> {out}")
        with tolerance_overrides(config.tolerances):
            trace = run_dashboard_mechanism(config, seed)
            checks = run_checks(trace, config)
        result = self._summarize(trace, config, checks)
        self.write_outputs(trace, checks, out)
        if config.persist:
            Base.metadata.create_all(bind=db_engine)
            db = SessionLocal()
            try:
                self.persist(db, trace, result, out, sweep_name)
            finally:
                db.close()
        for c in checks:
            if c.enforced and not c.passed:
                logger.error(f"Run {config.name} seed {seed}: {c.name} {c.value:.6g} > {c.bound:.6g} (stage {c.stage})")
        return result

    @staticmethod
    def _summarize(trace: Trace, config: ExperimentConfig, checks: List[Check]) -> RunResult:
        peak = max_abs_balance(ledger_balance(trace))
        enforced = [c for c in checks if c.enforced and "|B" in c.name]
        bound = enforced[0].bound if enforced else None
        violated = any(c.enforced and not c.passed for c in checks)
        chern = chern_hit = None
        if config.singlecall.enabled and config.rebalancing.mode != "off":
            rate = min_rate(trace)
            chern = chernoff_bound(trace.vmax, config.singlecall.rho, rate, config.singlecall.delta)
            chern_hit = peak.value > chern
            bound = singlecall_pathwise_bound(trace.vmax, config.singlecall.rho, rate)
        return RunResult(
            seed=trace.seed,
            status="violation" if violated else "ok",
            max_abs_balance=peak.value,
            bound=bound,
            violated=violated,
            chernoff_bound=chern,
            chernoff_violated=chern_hit,
            checks=checks,
        )

    def sweep(self, config: ExperimentConfig, seeds: List[int]) -> SweepSummary:
        """
        複数シードをワーカープールで実行し sweep.csv を書く

        シードごとの失敗はログに残して続行する。
        """
        name = config.name
        results: Dict[int, RunResult] = {}
        config_json = config.model_dump_json()
        if len(seeds) == 1 or self.workers <= 1:
            for seed in seeds:
                results[seed] = _sweep_task(config_json, seed, str(self.out_dir), name)
        else:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                futures = {
                    pool.submit(_sweep_task, config_json, seed, str(self.out_dir), name): seed for seed in seeds
                }
                for future in as_completed(futures):
                    seed = futures[future]
                    try:
                        results[seed] = future.result()
                    except Exception as e:
                        logger.error(f"Sweep {name} seed {seed} crashed: {e}", exc_info=True)
                        results[seed] = RunResult(seed=seed, status="error", error=str(e))

        ordered = [results[s] for s in seeds]
        summary = SweepSummary(name, ordered)
        if config.singlecall.enabled and config.rebalancing.mode != "off":
            hits = [r.chernoff_violated for r in ordered if r.chernoff_violated is not None]
            summary.chernoff_fraction = float(np.mean(hits)) if hits else 0.0
            summary.delta = config.singlecall.delta
            logger.info(
                f"Sweep {name}: high-probability bound exceeded on {summary.chernoff_fraction:.3%} "
                f"of {len(hits)} paths (delta {summary.delta})"
            )
        atomic_write(self.out_dir / "sweep.csv", _csv_text(SWEEP_COLUMNS, [r.row() for r in ordered]))
        return summary


def _sweep_task(config_json: str, seed: int, out_dir: str, sweep_name: str) -> RunResult:
    """プロセスプールから呼ぶ1シード分の処理"""
    config = ExperimentConfig.model_validate_json(config_json)
    worker = ExperimentWorker(out_dir, workers=1)
    out = Path(out_dir) / f"seed-{seed}"
    try:
        return worker.run_one(config, seed, out, sweep_name)
    except EngineError as e:
        logger.error(f"Sweep {sweep_name} seed {seed} aborted: {e}", exc_info=True)
        return RunResult(seed=seed, status="error", error=str(e))
