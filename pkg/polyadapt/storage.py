"""SQLite storage of ablation runs using SQLAlchemy."""
from __future__ import annotations

from datetime import datetime, timezone
from pathlib import Path

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, declarative_base, relationship, sessionmaker

Base = declarative_base()


def _now() -> datetime:
    return datetime.now(timezone.utc)


class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True)
    variant = Column(String, nullable=False)
    seed = Column(Integer, nullable=False)
    status = Column(String, default="ok")
    error = Column(String)
    overall_wer = Column(Float)
    best_update = Column(Integer)
    best_dev_loss_update = Column(Integer)
    trainable_params = Column(Integer)
    checkpoint = Column(String)
    timestamp = Column(DateTime, default=_now)

    results = relationship("LanguageResult", back_populates="run", cascade="all, delete-orphan")


class LanguageResult(Base):
    __tablename__ = "language_results"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    lang = Column(String, nullable=False)
    tier = Column(String, nullable=False)
    wer = Column(Float, nullable=False)
    substitutions = Column(Integer)
    deletions = Column(Integer)
    insertions = Column(Integer)
    ref_len = Column(Integer)
    truncated = Column(Integer)

    run = relationship("Run", back_populates="results")


class PretrainArtifact(Base):
    __tablename__ = "pretrain_artifacts"

    kind = Column(String, primary_key=True)
    path = Column(String, nullable=False)
    sha256 = Column(String, nullable=False)
    final_loss = Column(Float)


def init_db(db_path: str | Path) -> Engine:
    url = db_path if str(db_path).startswith("sqlite:") else f"sqlite:///{Path(db_path)}"
    engine = create_engine(url, future=True)
    Base.metadata.create_all(engine)
    return engine


def session_factory(engine: Engine) -> sessionmaker[Session]:
    return sessionmaker(bind=engine, autoflush=False, autocommit=False, expire_on_commit=False)
