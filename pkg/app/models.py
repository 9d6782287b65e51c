from typing import Optional
from datetime import datetime
from enum import Enum
from sqlmodel import Field, SQLModel, Column, Index
from sqlalchemy import DateTime


class AttackFamily(str, Enum):
    FGSM = "fgsm"
    PGD = "pgd"
    CW = "cw"


class RefineMode(str, Enum):
    CHERRY_PICK = "cherry_pick"
    HELD_OUT = "held_out"


class StageName(str, Enum):
    GEN_DATA = "gen-data"
    TRAIN = "train"
    BUILD_REFERENCE = "build-reference"
    ATTACK = "attack"
    EXTRACT = "extract"
    COMPARE = "compare"
    REPORT = "report"


class StageStatus(str, Enum):
    STARTED = "started"
    COMPLETED = "completed"
    TARGET_MISSED = "target_missed"
    FAILED = "failed"


class StageLog(SQLModel, table=True):
    """Append-only audit trail of pipeline stages"""
    id: Optional[int] = Field(default=None, primary_key=True)
    seed: int = Field(index=True)
    stage: StageName = Field(index=True)
    tag: str = Field(default="", max_length=64, index=True)
    status: StageStatus = Field(index=True)
    item_count: int = 0
    detail: str = ""
    timestamp: datetime = Field(default_factory=datetime.utcnow, sa_column=Column(DateTime, default=datetime.utcnow, index=True))

    __table_args__ = (
        Index('idx_stagelog_stage_tag', 'stage', 'tag'),
        Index('idx_stagelog_seed_timestamp', 'seed', 'timestamp'),
    )
