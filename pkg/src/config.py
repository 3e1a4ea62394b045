from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """環境変数から設定を読み込むクラス"""

    # Database
    DATABASE_URL: str = "sqlite:///./dashboard_sim.db"

    # Rule grid
    GRID_SIZE: int = 1025  # knots, uniform in value
    MIN_SLOPE: float = 1e-9
    NO_WIN_THRESHOLD: float = 1e-12

    # Tolerances (vmax に対する相対値)
    INVERT_TOL: float = 1e-10
    ROUND_TRIP_TOL: float = 1e-6
    FOC_TOL: float = 1e-5
    FD_DIVISOR: int = 4096  # h = vmax / FD_DIVISOR
    NASH_GAP_TOL: float = 1e-3

    # Rebalancing
    GAMMA_HIGH: float = 1 - 1e-4
    GAMMA_LOW: float = 1e-4
    EXPONENT_CAP: float = 1e4
    DEAD_BAND: float = 0.0  # |B| <= c * v の間はリバランスしない

    # Single-call
    SINGLECALL_ETA_FACTOR: float = 0.9  # eta = factor * rho * avg_alloc

    # Agents
    HEDGE_ARMS: int = 257

    # Worker
    OUTPUT_DIR: str = "./runs"
    SWEEP_WORKERS: int = 4
    PROGRESS_EVERY: int = 1000  # stages

    # Debug
    DEBUG: bool = False

    class Config:
        env_file = ".env"
        case_sensitive = True


settings = Settings()
