"""Artifact registry repository for an experiment directory."""

import hashlib
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

from sqlalchemy import select
from sqlalchemy.ext.asyncio import AsyncSession, async_sessionmaker, create_async_engine

from src.database.models import Artifact, Base, Run

logger = logging.getLogger(__name__)


def file_sha256(path: Path) -> str:
    """SHA-256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Repository:
    """Async database repository."""

    def __init__(self, database_url: str, root: Path):
        self.root = Path(root).resolve()
        self.engine = create_async_engine(database_url, echo=False)
        self.async_session = async_sessionmaker(
            self.engine, class_=AsyncSession, expire_on_commit=False
        )

    async def init_db(self) -> None:
        """Initialize database tables."""
        async with self.engine.begin() as conn:
            await conn.run_sync(Base.metadata.create_all)
        logger.debug("Registry tables created")

    async def close(self) -> None:
        """Close database connection."""
        await self.engine.dispose()

    # ===== Run Methods =====

    async def start_run(self, command: str, config_hash: str, seed: int) -> Run:
        """Record a new run in the running state."""
        async with self.async_session() as session:
            run = Run(command=command, config_hash=config_hash, seed=seed)
            session.add(run)
            await session.commit()
            await session.refresh(run)
            logger.debug(f"Started run {run.id} ({command})")
            return run

    async def finish_run(self, run_id: int, status: str = "done", failed_stage: Optional[str] = None,
                         message: Optional[str] = None) -> None:
        """Mark a run as finished."""
        async with self.async_session() as session:
            run = await session.get(Run, run_id)
            if run:
                run.status = status
                run.failed_stage = failed_stage
                run.message = message
                run.finished_at = datetime.now(timezone.utc)
                await session.commit()

    async def get_runs(self) -> List[Run]:
        async with self.async_session() as session:
            result = await session.execute(select(Run).order_by(Run.id))
            return list(result.scalars().all())

    # ===== Artifact Methods =====

    async def get_artifact(self, kind: str, name: str) -> Optional[Artifact]:
        """Get an artifact by kind and name."""
        async with self.async_session() as session:
            result = await session.execute(
                select(Artifact).where(Artifact.kind == kind).where(Artifact.name == name)
            )
            return result.scalar_one_or_none()

    async def register_artifact(self, kind: str, name: str, path: Path, config_hash: str,
                                stage: Optional[str] = None, run_id: Optional[int] = None) -> Artifact:
        """Insert or update an artifact with the current file hash."""
        path = Path(path)
        sha = file_sha256(path)
        relative = path.resolve().relative_to(self.root).as_posix()
        async with self.async_session() as session:
            result = await session.execute(
                select(Artifact).where(Artifact.kind == kind).where(Artifact.name == name)
            )
            artifact = result.scalar_one_or_none()
            if artifact is None:
                artifact = Artifact(kind=kind, name=name, path=relative, sha256=sha,
                                    config_hash=config_hash, stage=stage, run_id=run_id)
                session.add(artifact)
            else:
                artifact.path = relative
                artifact.sha256 = sha
                artifact.config_hash = config_hash
                artifact.stage = stage
                artifact.run_id = run_id
            await session.commit()
            await session.refresh(artifact)
            logger.debug(f"Registered {kind} artifact {name} ({sha[:12]})")
            return artifact

    async def is_current(self, kind: str, name: str, config_hash: str) -> bool:
        """True when the artifact exists for this config and its file is unchanged."""
        artifact = await self.get_artifact(kind, name)
        if artifact is None or artifact.config_hash != config_hash:
            return False
        path = self.root / artifact.path
        if not path.exists():
            logger.warning(f"Registered {kind} artifact {name} is missing on disk")
            return False
        if file_sha256(path) != artifact.sha256:
            logger.warning(f"{kind} artifact {name} changed on disk since it was registered")
            return False
        return True

    async def get_artifacts(self, kind: Optional[str] = None) -> List[Artifact]:
        async with self.async_session() as session:
            query = select(Artifact).order_by(Artifact.id)
            if kind is not None:
                query = query.where(Artifact.kind == kind)
            result = await session.execute(query)
            return list(result.scalars().all())
