import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

from sqlalchemy.engine import Engine
from sqlmodel import SQLModel, Session, create_engine, select

from app.config import settings
from app.models import StageLog, StageName, StageStatus

logger = logging.getLogger(__name__)


def ledger_url(out_dir: Path) -> str:
    # Priority: Env Var > ledger next to the run outputs
    return settings.LEDGER_URL or f"sqlite:///{Path(out_dir) / 'ledger.db'}"


def create_ledger_engine(url: str) -> Engine:
    # check_same_thread=False is needed only for SQLite
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    return create_engine(url, connect_args=connect_args)


def init_db(engine: Engine):
    """Create the ledger tables if missing"""
    SQLModel.metadata.create_all(engine)


@contextmanager
def get_db(engine: Engine) -> Iterator[Session]:
    with Session(engine) as session:
        yield session


def audit_log(session: Session, seed: int, stage: StageName, status: StageStatus,
              tag: str = "", item_count: int = 0, detail: str = "") -> StageLog:
    entry = StageLog(seed=seed, stage=stage, tag=tag, status=status, item_count=item_count, detail=detail)
    session.add(entry)
    session.commit()
    session.refresh(entry)
    logger.info("[%s%s] %s (%d items) %s", stage.value, f":{tag}" if tag else "", status.value, item_count, detail)
    return entry


def stage_history(session: Session, stage: Optional[StageName] = None) -> list[StageLog]:
    query = select(StageLog).order_by(StageLog.id)
    if stage is not None:
        query = query.where(StageLog.stage == stage)
    return list(session.exec(query).all())
