"""Experiment directory: layout, config snapshot, artifact reuse and run bookkeeping."""

import json
import logging
import shutil
from contextlib import asynccontextmanager, contextmanager
from pathlib import Path
from typing import AsyncIterator, Callable, Dict, Iterable, Iterator, Optional

from src.config import (
    ConfigError,
    ExperimentConfig,
    Settings,
    experiment_hash,
    get_settings,
    parse_experiment_config,
)
from src.database.repository import Repository
from src.services import synthdata
from src.services.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.services.synthdata import Dataset
from src.services.training import StageResult

logger = logging.getLogger(__name__)

SNAPSHOT_NAME = "config.json"


class ArtifactMissingError(Exception):
    """A required dataset or checkpoint is not present."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(message)


class VerificationFailed(Exception):
    """At least one self-check failed."""

    def __init__(self, message: str, failed: Optional[list] = None):
        self.message = message
        self.failed = failed or []
        super().__init__(message)


class ExperimentDir:
    """One experiment's output directory and its artifact registry."""

    def __init__(self, root: Path, config: ExperimentConfig, force: bool = False,
                 settings: Optional[Settings] = None):
        self.root = Path(root)
        self.config = config
        self.force = force
        self.settings = settings or get_settings()
        self.hash = experiment_hash(config)
        self.repository: Optional[Repository] = None
        self.run_id: Optional[int] = None
        self.current_stage: Optional[str] = None

    # ===== Layout =====

    def dataset_dir(self, name: str) -> Path:
        return self.root / "datasets" / name

    def checkpoint_path(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.ckpt"

    def log_path(self, name: str) -> Path:
        return self.root / "logs" / f"{name}.jsonl"

    def report_path(self, name: str) -> Path:
        path = self.root / "reports" / name
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def arm_dir(self, arm: str) -> Path:
        return self.root / "arms" / arm

    # ===== Lifecycle =====

    def _check_snapshot(self) -> None:
        snapshot = self.root / SNAPSHOT_NAME
        if not snapshot.exists():
            return
        try:
            previous = experiment_hash(parse_experiment_config(snapshot.read_text(encoding="utf-8"), str(snapshot)))
        except ConfigError:
            previous = None
        if previous == self.hash:
            return
        if not self.force:
            raise ConfigError(
                f"{self.root} holds an experiment with a different config; use --force to replace it"
            )
        logger.warning(f"Clearing {self.root}: config changed and --force given")
        for child in self.root.iterdir():
            if child.is_dir():
                shutil.rmtree(child)
            else:
                child.unlink()

    async def open(self, command: str) -> None:
        """Create the layout, snapshot the config and start a registry run."""
        self.root.mkdir(parents=True, exist_ok=True)
        self._check_snapshot()
        payload = self.config.model_dump(mode="json", by_alias=True)
        (self.root / SNAPSHOT_NAME).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")

        self.repository = Repository(self.settings.registry_url(self.root), self.root)
        await self.repository.init_db()
        run = await self.repository.start_run(command, self.hash, self.config.seed)
        self.run_id = run.id
        logger.info(f"Experiment {self.root} (config {self.hash[:12]}, seed {self.config.seed})")

    async def close(self, status: str = "done", message: Optional[str] = None) -> None:
        if self.repository is None:
            return
        failed_stage = self.current_stage if status == "failed" else None
        await self.repository.finish_run(self.run_id, status, failed_stage, message)
        await self.repository.close()
        self.repository = None

    @asynccontextmanager
    async def running(self, command: str) -> AsyncIterator["ExperimentDir"]:
        """Open for a command; the run is marked failed if the body raises."""
        await self.open(command)
        try:
            yield self
        except Exception as e:
            await self.close("failed", getattr(e, "message", str(e)))
            raise
        await self.close("done")

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """Name the running stage in logs and in the registry on failure."""
        self.current_stage = name
        logger.info(f"Stage {name}: started")
        try:
            yield
        except Exception as e:
            logger.error(f"Stage {name} failed: {e}")
            raise
        logger.info(f"Stage {name}: done")

    # ===== Artifacts =====

    async def reusable(self, kind: str, name: str) -> bool:
        return not self.force and await self.repository.is_current(kind, name, self.hash)

    async def register(self, kind: str, name: str, path: Path, stage: Optional[str] = None) -> None:
        await self.repository.register_artifact(kind, name, path, self.hash, stage=stage, run_id=self.run_id)

    async def datasets(self, names: Iterable[str], generate: bool = True) -> Dict[str, Dataset]:
        """Load registered datasets, generating missing ones when allowed."""
        world_cfg = self.config.world_config()
        world = None
        loaded = {}
        for name in names:
            directory = self.dataset_dir(name)
            if await self.reusable("dataset", name) and await self.reusable("dataset", f"{name}/data"):
                loaded[name] = synthdata.read_dataset(directory)
                logger.info(f"Reusing dataset {name} ({loaded[name].count} samples)")
                continue
            if not generate:
                raise ArtifactMissingError(f"dataset {name} missing in {self.root}; run gen or pass --gen")
            world = world or synthdata.build_world(world_cfg)
            dataset = synthdata.generate(name, world_cfg, self.config.data, world=world)
            manifest = synthdata.write_dataset(dataset, directory)
            await self.register("dataset", name, manifest, stage="gen")
            await self.register("dataset", f"{name}/data", directory / synthdata.DATA_NAME, stage="gen")
            loaded[name] = dataset
        return loaded

    async def checkpoint(self, name: str, producer: Callable[[Path], StageResult],
                         path: Optional[Path] = None, log_path: Optional[Path] = None) -> Checkpoint:
        """Reuse a registered checkpoint or produce, save and register it."""
        path = path or self.checkpoint_path(name)
        log_path = log_path or self.log_path(name)
        if await self.reusable("checkpoint", name):
            logger.info(f"Reusing checkpoint {name}")
            return load_checkpoint(path)
        result = producer(log_path)
        save_checkpoint(result.checkpoint, path)
        await self.register("checkpoint", name, path, stage=result.checkpoint.stage)
        await self.register("log", name, log_path, stage=result.checkpoint.stage)
        return result.checkpoint

    def existing_checkpoint(self, name: str) -> Checkpoint:
        path = self.checkpoint_path(name)
        if not path.exists():
            raise ArtifactMissingError(f"checkpoint {name} missing in {self.root}; run pipeline first")
        return load_checkpoint(path)

    async def write_report(self, name: str, text: str) -> Path:
        path = self.report_path(name)
        path.write_text(text, encoding="utf-8")
        await self.register("report", name, path)
        logger.info(f"Wrote {path}")
        return path
