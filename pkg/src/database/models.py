"""SQLAlchemy models for the experiment-directory artifact registry."""

from datetime import datetime
from typing import List, Optional

from sqlalchemy import DateTime, ForeignKey, Integer, String, Text, UniqueConstraint, func
from sqlalchemy.orm import DeclarativeBase, Mapped, mapped_column, relationship


class Base(DeclarativeBase):
    """Base class for all models."""
    pass


class Run(Base):
    """One CLI invocation against an experiment directory."""

    __tablename__ = "runs"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    command: Mapped[str] = mapped_column(String(50), nullable=False)  # gen, pipeline, ablate, bench
    config_hash: Mapped[str] = mapped_column(String(64), nullable=False, index=True)
    seed: Mapped[int] = mapped_column(Integer, nullable=False)
    status: Mapped[str] = mapped_column(String(20), default="running")  # running, done, failed
    failed_stage: Mapped[Optional[str]] = mapped_column(String(50), nullable=True)
    message: Mapped[Optional[str]] = mapped_column(Text, nullable=True)

    started_at: Mapped[datetime] = mapped_column(DateTime(timezone=True), server_default=func.now())
    finished_at: Mapped[Optional[datetime]] = mapped_column(DateTime(timezone=True), nullable=True)

    artifacts: Mapped[List["Artifact"]] = relationship("Artifact", back_populates="run")

    def __repr__(self) -> str:
        return f"<Run(id={self.id}, command={self.command}, status={self.status})>"


class Artifact(Base):
    """A file produced by a stage, keyed by kind and name."""

    __tablename__ = "artifacts"
    __table_args__ = (UniqueConstraint("kind", "name", name="uq_artifact_kind_name"),)

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    kind: Mapped[str] = mapped_column(String(20), nullable=False)  # dataset, checkpoint, log, report
    name: Mapped[str] = mapped_column(String(255), nullable=False)
    path: Mapped[str] = mapped_column(String(500), nullable=False)  # relative to the experiment dir
    sha256: Mapped[str] = mapped_column(String(64), nullable=False)
    config_hash: Mapped[str] = mapped_column(String(64), nullable=False)
    stage: Mapped[Optional[str]] = mapped_column(String(50), nullable=True)
    run_id: Mapped[Optional[int]] = mapped_column(ForeignKey("runs.id", ondelete="SET NULL"), nullable=True)

    created_at: Mapped[datetime] = mapped_column(DateTime(timezone=True), server_default=func.now())
    updated_at: Mapped[datetime] = mapped_column(
        DateTime(timezone=True), server_default=func.now(), onupdate=func.now()
    )

    run: Mapped[Optional["Run"]] = relationship("Run", back_populates="artifacts")

    def __repr__(self) -> str:
        return f"<Artifact(kind={self.kind}, name={self.name}, sha={self.sha256[:8]})>"
