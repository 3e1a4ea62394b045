from datetime import datetime
from sqlalchemy import Column, Integer, String, Text, DateTime, Float, ForeignKey, Boolean, Index
from sqlalchemy.ext.declarative import declarative_base
from sqlalchemy.orm import relationship

Base = declarative_base()


class ExperimentRun(Base):
    """実験の1回の実行（設定とシード）テーブル"""
    __tablename__ = 'experiment_runs'

    id = Column(Integer, primary_key=True, autoincrement=True)
    name = Column(String(255), nullable=False, comment='実験名（設定の name）')
    sweep_name = Column(String(255), nullable=True, comment='sweep 実行時のスイープ名')
    seed = Column(Integer, nullable=False)
    format = Column(String(32), nullable=False, comment='winner_pays_bid / all_pay')
    stages = Column(Integer, nullable=False)
    config_json = Column(Text, nullable=False, comment='実験設定（JSON）')
    status = Column(String(32), nullable=False, default='running', comment='running / ok / violation / error')
    error = Column(Text, nullable=True, comment='違反・エラーの内容')
    max_abs_balance = Column(Float, nullable=True, comment='台帳残高の最大絶対値')
    inconsistency = Column(Float, nullable=True, comment='誘因不整合 |B|/t の最大値')
    output_dir = Column(Text, nullable=True)
    started_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime, nullable=True)

    # リレーションシップ
    stage_rows = relationship('StageRow', back_populates='run', cascade='all, delete-orphan')

    __table_args__ = (
        Index('idx_run_name_seed', 'name', 'seed'),
        Index('idx_run_sweep', 'sweep_name'),
    )


class StageRow(Base):
    """エージェント・ステージごとの記録（trace.csv と同じ列）テーブル"""
    __tablename__ = 'stage_rows'

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey('experiment_runs.id', ondelete='CASCADE'), nullable=False)
    stage = Column(Integer, nullable=False)
    agent = Column(Integer, nullable=False)
    value = Column(Float, nullable=False)
    bid = Column(Float, nullable=False)
    inferred_value = Column(Float, nullable=False)
    alloc_prob = Column(Float, nullable=False)
    realized = Column(Integer, nullable=False)
    payment = Column(Float, nullable=False)
    truthful_payment = Column(Float, nullable=False, comment='真実メカニズムの支払い（影）')
    residual = Column(Float, nullable=False)
    resolved = Column(Float, nullable=False)
    balance = Column(Float, nullable=False)

    # リレーションシップ
    run = relationship('ExperimentRun', back_populates='stage_rows')

    __table_args__ = (
        Index('idx_stage_run_agent', 'run_id', 'agent', 'stage'),
    )


class SweepResult(Base):
    """スイープのシードごとの集計テーブル"""
    __tablename__ = 'sweep_results'

    id = Column(Integer, primary_key=True, autoincrement=True)
    sweep_name = Column(String(255), nullable=False)
    seed = Column(Integer, nullable=False)
    run_id = Column(Integer, ForeignKey('experiment_runs.id', ondelete='SET NULL'), nullable=True)
    max_abs_balance = Column(Float, nullable=False)
    bound = Column(Float, nullable=True, comment='比較した上界（該当しなければ NULL）')
    violated = Column(Boolean, default=False, comment='上界違反フラグ')
    status = Column(String(32), nullable=False, default='ok')
    created_at = Column(DateTime, default=datetime.utcnow)

    __table_args__ = (
        Index('idx_sweep_name_seed', 'sweep_name', 'seed'),
    )
