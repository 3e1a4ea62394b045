from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from src.config import settings


def _engine_options(url: str) -> dict:
    """SQLite はプール設定を持たないので接続オプションだけ渡す"""
    if url.startswith("sqlite"):
        return {"connect_args": {"check_same_thread": False}}
    return {"pool_size": 10, "max_overflow": 20}


engine = create_engine(
    settings.DATABASE_URL,
    pool_pre_ping=True,
    echo=settings.DEBUG,
    **_engine_options(settings.DATABASE_URL)
)

SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)


def get_db():
    """データベースセッションのジェネレータ"""
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()
