"""Initial migration - experiment runs, stage rows, sweep results

Revision ID: 001
Revises: 
Create Date: 2026-10-18 00:00:00.000000

"""
from typing import Sequence, Union

from alembic import op
import sqlalchemy as sa


# revision identifiers, used by Alembic.
revision: str = '001'
down_revision: Union[str, None] = None
branch_labels: Union[str, Sequence[str], None] = None
depends_on: Union[str, Sequence[str], None] = None


def upgrade() -> None:
    # Create experiment_runs table
    op.create_table(
        'experiment_runs',
        sa.Column('id', sa.Integer(), autoincrement=True, nullable=False),
        sa.Column('name', sa.String(length=255), nullable=False),
        sa.Column('sweep_name', sa.String(length=255), nullable=True),
        sa.Column('seed', sa.Integer(), nullable=False),
        sa.Column('format', sa.String(length=32), nullable=False),
        sa.Column('stages', sa.Integer(), nullable=False),
        sa.Column('config_json', sa.Text(), nullable=False),
        sa.Column('status', sa.String(length=32), nullable=False),
        sa.Column('error', sa.Text(), nullable=True),
        sa.Column('max_abs_balance', sa.Float(), nullable=True),
        sa.Column('inconsistency', sa.Float(), nullable=True),
        sa.Column('output_dir', sa.Text(), nullable=True),
        sa.Column('started_at', sa.DateTime(), nullable=True),
        sa.Column('finished_at', sa.DateTime(), nullable=True),
        sa.PrimaryKeyConstraint('id')
    )
    op.create_index('idx_run_name_seed', 'experiment_runs', ['name', 'seed'], unique=False)
    op.create_index('idx_run_sweep', 'experiment_runs', ['sweep_name'], unique=False)

    # Create stage_rows table
    op.create_table(
        'stage_rows',
        sa.Column('id', sa.Integer(), autoincrement=True, nullable=False),
        sa.Column('run_id', sa.Integer(), nullable=False),
        sa.Column('stage', sa.Integer(), nullable=False),
        sa.Column('agent', sa.Integer(), nullable=False),
        sa.Column('value', sa.Float(), nullable=False),
        sa.Column('bid', sa.Float(), nullable=False),
        sa.Column('inferred_value', sa.Float(), nullable=False),
        sa.Column('alloc_prob', sa.Float(), nullable=False),
        sa.Column('realized', sa.Integer(), nullable=False),
        sa.Column('payment', sa.Float(), nullable=False),
        sa.Column('truthful_payment', sa.Float(), nullable=False),
        sa.Column('residual', sa.Float(), nullable=False),
        sa.Column('resolved', sa.Float(), nullable=False),
        sa.Column('balance', sa.Float(), nullable=False),
        sa.ForeignKeyConstraint(['run_id'], ['experiment_runs.id'], ondelete='CASCADE'),
        sa.PrimaryKeyConstraint('id')
    )
    op.create_index('idx_stage_run_agent', 'stage_rows', ['run_id', 'agent', 'stage'], unique=False)

    # Create sweep_results table
    op.create_table(
        'sweep_results',
        sa.Column('id', sa.Integer(), autoincrement=True, nullable=False),
        sa.Column('sweep_name', sa.String(length=255), nullable=False),
        sa.Column('seed', sa.Integer(), nullable=False),
        sa.Column('run_id', sa.Integer(), nullable=True),
        sa.Column('max_abs_balance', sa.Float(), nullable=False),
        sa.Column('bound', sa.Float(), nullable=True),
        sa.Column('violated', sa.Boolean(), nullable=True),
        sa.Column('status', sa.String(length=32), nullable=False),
        sa.Column('created_at', sa.DateTime(), nullable=True),
        sa.ForeignKeyConstraint(['run_id'], ['experiment_runs.id'], ondelete='SET NULL'),
        sa.PrimaryKeyConstraint('id')
    )
    op.create_index('idx_sweep_name_seed', 'sweep_results', ['sweep_name', 'seed'], unique=False)


def downgrade() -> None:
    op.drop_index('idx_sweep_name_seed', table_name='sweep_results')
    op.drop_table('sweep_results')
    op.drop_index('idx_stage_run_agent', table_name='stage_rows')
    op.drop_table('stage_rows')
    op.drop_index('idx_run_sweep', table_name='experiment_runs')
    op.drop_index('idx_run_name_seed', table_name='experiment_runs')
    op.drop_table('experiment_runs')
