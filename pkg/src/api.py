from fastapi import FastAPI, HTTPException, Depends, Path, Query
from sqlalchemy.orm import Session
from sqlalchemy import func
from datetime import datetime
from typing import List, Optional
from pydantic import BaseModel, Field
import json

from src.database import get_db
from src.models import ExperimentRun, StageRow, SweepResult
from src.utils.analysis import expected_payment, outstanding_from_payments

app = FastAPI(
    title="Dashboard Sim API",
    description="""
## Dashboard Sim - 実験結果の参照API

ダッシュボードメカニズムのシミュレーション結果（persist=true で保存した実行）を参照します。

### 主な機能
- 📋 **実行一覧**: 保存済みの実行と要約指標
- 📈 **ステージ記録**: エージェント・ステージごとの入札・推定価値・支払い・残高
- 🎲 **スイープ集計**: シードごとの残高最大値と上界違反

### 技術スタック
- FastAPI + SQLAlchemy + SQLite
- numpy による数値シミュレーション
    """,
    version="1.0.0",
    license_info={
        "name": "MIT",
    },
)


# ========== Pydantic Schemas ==========

class HealthResponse(BaseModel):
    """ヘルスチェック応答"""
    status: str = Field(..., description="ステータス", example="ok")
    service: str = Field(..., description="サービス名", example="Dashboard Sim API")
    version: str = Field(..., description="バージョン", example="1.0.0")


class RunResponse(BaseModel):
    """実行の要約"""
    id: int = Field(..., description="実行ID", example=1)
    name: str = Field(..., description="実験名", example="static-nash")
    sweep_name: Optional[str] = Field(None, description="スイープ名")
    seed: int = Field(..., description="シード", example=0)
    format: str = Field(..., description="支払い形式", example="winner_pays_bid")
    stages: int = Field(..., description="ステージ数", example=20)
    status: str = Field(..., description="ok / violation / error", example="ok")
    max_abs_balance: Optional[float] = Field(None, description="台帳残高の最大絶対値")
    started_at: Optional[datetime] = Field(None, description="開始日時")
    finished_at: Optional[datetime] = Field(None, description="終了日時")


class RunDetailResponse(RunResponse):
    """実行の詳細（設定を含む）"""
    config: dict = Field(..., description="実験設定")
    error: Optional[str] = Field(None, description="違反・エラーの内容")
    output_dir: Optional[str] = Field(None, description="出力ディレクトリ")


class AgentMetrics(BaseModel):
    agent: int
    final_ledger_balance: float
    max_abs_ledger_balance: float
    final_outstanding_balance: float
    inconsistency: float


class MetricsResponse(BaseModel):
    """実行の集計指標（stage_rows から再計算）"""
    run_id: int
    stages: int
    agents: List[AgentMetrics]


class StageRowResponse(BaseModel):
    stage: int
    agent: int
    value: float
    bid: float
    inferred_value: float
    alloc_prob: float
    realized: int
    payment: float
    truthful_payment: float
    residual: float
    resolved: float
    balance: float


class SweepRowResponse(BaseModel):
    seed: int
    run_id: Optional[int]
    max_abs_balance: float
    bound: Optional[float]
    violated: bool
    status: str


class SweepResponse(BaseModel):
    """スイープ集計"""
    name: str
    runs: int
    violations: int
    violation_fraction: float
    results: List[SweepRowResponse]


def _run_or_404(db: Session, run_id: int) -> ExperimentRun:
    run = db.query(ExperimentRun).filter_by(id=run_id).first()
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    return run


def _run_summary(run: ExperimentRun) -> dict:
    return {
        "id": run.id,
        "name": run.name,
        "sweep_name": run.sweep_name,
        "seed": run.seed,
        "format": run.format,
        "stages": run.stages,
        "status": run.status,
        "max_abs_balance": run.max_abs_balance,
        "started_at": run.started_at,
        "finished_at": run.finished_at,
    }


# ========== REST API Endpoints ==========

@app.get(
    "/api/health",
    response_model=HealthResponse,
    tags=["System"],
    summary="ヘルスチェック",
    description="APIサーバーの稼働状態を確認します。"
)
def health_check():
    return {
        "status": "ok",
        "service": "Dashboard Sim API",
        "version": "1.0.0"
    }


@app.get(
    "/api/runs",
    response_model=List[RunResponse],
    tags=["Runs"],
    summary="保存済みの実行一覧",
)
def list_runs(
    name: Optional[str] = Query(None, description="実験名で絞り込み"),
    db: Session = Depends(get_db),
):
    """新しい順に返す"""
    query = db.query(ExperimentRun)
    if name:
        query = query.filter(ExperimentRun.name == name)
    return [_run_summary(r) for r in query.order_by(ExperimentRun.id.desc()).all()]


@app.get(
    "/api/runs/{run_id}",
    response_model=RunDetailResponse,
    tags=["Runs"],
    summary="実行の詳細",
)
def get_run(run_id: int = Path(..., description="実行ID"), db: Session = Depends(get_db)):
    run = _run_or_404(db, run_id)
    return {
        **_run_summary(run),
        "config": json.loads(run.config_json),
        "error": run.error,
        "output_dir": run.output_dir,
    }


@app.get(
    "/api/runs/{run_id}/metrics",
    response_model=MetricsResponse,
    tags=["Runs"],
    summary="エージェントごとの残高と誘因不整合",
)
def get_run_metrics(run_id: int = Path(..., description="実行ID"), db: Session = Depends(get_db)):
    """
    ## 集計指標

    - 台帳残高（最終値・最大絶対値）
    - 未精算残高 Σ(真実の支払い − 期待支払い)
    - 誘因不整合 |B⁽ᵗ⁾|/t
    """
    run = _run_or_404(db, run_id)
    agents = []
    agent_ids = [a for (a,) in db.query(StageRow.agent).filter_by(run_id=run.id).distinct().order_by(StageRow.agent)]
    for agent in agent_ids:
        rows = (
            db.query(StageRow)
            .filter_by(run_id=run.id, agent=agent)
            .order_by(StageRow.stage)
            .all()
        )
        expected = expected_payment([r.bid for r in rows], [r.alloc_prob for r in rows], run.format)
        outstanding = float(outstanding_from_payments([r.truthful_payment for r in rows], expected)[-1])
        agents.append({
            "agent": agent,
            "final_ledger_balance": rows[-1].balance,
            "max_abs_ledger_balance": max(abs(r.balance) for r in rows),
            "final_outstanding_balance": outstanding,
            "inconsistency": abs(outstanding) / len(rows),
        })
    return {"run_id": run.id, "stages": run.stages, "agents": agents}


@app.get(
    "/api/runs/{run_id}/stages",
    response_model=List[StageRowResponse],
    tags=["Runs"],
    summary="ステージ記録",
)
def get_run_stages(
    run_id: int = Path(..., description="実行ID"),
    agent: Optional[int] = Query(None, ge=0, description="エージェント番号で絞り込み"),
    db: Session = Depends(get_db),
):
    run = _run_or_404(db, run_id)
    query = db.query(StageRow).filter_by(run_id=run.id)
    if agent is not None:
        query = query.filter(StageRow.agent == agent)
    rows = query.order_by(StageRow.stage, StageRow.agent).all()
    return [
        {
            "stage": r.stage,
            "agent": r.agent,
            "value": r.value,
            "bid": r.bid,
            "inferred_value": r.inferred_value,
            "alloc_prob": r.alloc_prob,
            "realized": r.realized,
            "payment": r.payment,
            "truthful_payment": r.truthful_payment,
            "residual": r.residual,
            "resolved": r.resolved,
            "balance": r.balance,
        }
        for r in rows
    ]


@app.get(
    "/api/sweeps/{name}",
    response_model=SweepResponse,
    tags=["Sweeps"],
    summary="スイープ集計",
)
def get_sweep(name: str = Path(..., description="スイープ名"), db: Session = Depends(get_db)):
    count = db.query(func.count(SweepResult.id)).filter(SweepResult.sweep_name == name).scalar()
    if not count:
        raise HTTPException(status_code=404, detail="Sweep not found")
    rows = db.query(SweepResult).filter_by(sweep_name=name).order_by(SweepResult.seed).all()
    violations = sum(1 for r in rows if r.violated)
    return {
        "name": name,
        "runs": len(rows),
        "violations": violations,
        "violation_fraction": violations / len(rows),
        "results": [
            {
                "seed": r.seed,
                "run_id": r.run_id,
                "max_abs_balance": r.max_abs_balance,
                "bound": r.bound,
                "violated": bool(r.violated),
                "status": r.status,
            }
            for r in rows
        ],
    }
