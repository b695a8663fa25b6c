"""Distillation-weight ablation with and without predistillation."""

import asyncio
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from src.cli.experiment import ExperimentDir
from src.cli.handlers import common
from src.cli.reports import ablation_csv, dump_json, task_label
from src.config import ConfigError, DEGRADED_TASKS, ExperimentConfig, TASK_NAMES
from src.services import training
from src.services.checkpoint import Checkpoint, save_checkpoint
from src.services.evaluation import EvalReport, retrieval_accuracy
from src.services.synthdata import Dataset

logger = logging.getLogger(__name__)

ABLATION_DATASETS = ("pretrain", "holdout", "unlabeled", "finetune", "degraded")
TASK_LABELS = TASK_NAMES + [f"degraded:{TASK_NAMES[t]}" for t in DEGRADED_TASKS]


@dataclass
class Arm:
    """One (lambda, predistill) configuration and its outcome."""
    name: str
    lambda_: float
    predistill: bool
    status: str = "pending"
    error: Optional[str] = None
    reports: List[EvalReport] = field(default_factory=list)
    retrieval: Optional[float] = None

    def task_scores(self) -> Dict[str, Tuple[float, float]]:
        return {
            task_label(report, result.name): (result.mean, result.std)
            for report in self.reports for result in report.tasks
        }

    def summary(self) -> Dict:
        return {
            "arm": self.name,
            "lambda": self.lambda_,
            "predistill": self.predistill,
            "status": self.status,
            "error": self.error,
            "retrieval": self.retrieval,
            "tasks": {label: {"mean_auc": mean, "std_auc": std} for label, (mean, std) in self.task_scores().items()},
        }


def arm_name(lambda_: float, predistill: bool) -> str:
    return f"lambda-{lambda_:g}-{'predistill' if predistill else 'fresh'}"


def run_arm(cfg: ExperimentConfig, arm: Arm, teacher: Checkpoint, init: Optional[Checkpoint],
            data: Dict[str, Dataset], directory: Path, config_hash: str) -> Arm:
    """Distill, evaluate and score one arm; failures are recorded, not raised."""
    try:
        result = training.run_vlcd(cfg, teacher, init, data["pretrain"], lambda_=arm.lambda_,
                                   log_path=directory / "log.jsonl")
        save_checkpoint(result.checkpoint, directory / "student.ckpt")
        arm.reports = [
            common.evaluate(cfg, result.checkpoint, data["finetune"], config_hash),
            common.evaluate(cfg, result.checkpoint, data["degraded"], config_hash),
        ]
        arm.retrieval = retrieval_accuracy(result.checkpoint, data["holdout"], cfg.eval.retrieval_batch)
        arm.status = "done"
    except Exception as e:
        logger.error(f"Arm {arm.name} failed: {e}")
        arm.status = "failed"
        arm.error = getattr(e, "message", str(e))
    return arm


class AblateHandler:
    """Handler for the ablate subcommand."""

    def __init__(self, experiment: ExperimentDir):
        self.experiment = experiment
        self.config = experiment.config

    async def _run_arms(self, arms: List[Arm], teacher: Checkpoint, init: Optional[Checkpoint],
                        data: Dict[str, Dataset], jobs: int) -> List[Arm]:
        exp = self.experiment

        def arguments(arm: Arm):
            return (self.config, arm, teacher, init if arm.predistill else None, data,
                    exp.arm_dir(arm.name), exp.hash)

        if jobs <= 1:
            return [run_arm(*arguments(arm)) for arm in arms]

        loop = asyncio.get_running_loop()
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [loop.run_in_executor(pool, run_arm, *arguments(arm)) for arm in arms]
            return list(await asyncio.gather(*futures))

    async def ablate_command(self, lambdas: Sequence[float], predistill_modes: Sequence[bool] = (True, False),
                             jobs: int = 1) -> List[Arm]:
        """Run every arm sharing one teacher and write ablation.csv."""
        if not lambdas:
            raise ConfigError("ablation needs at least one lambda", "lambdas")
        exp = self.experiment

        with exp.stage("data"):
            data = await exp.datasets(ABLATION_DATASETS, generate=True)
        with exp.stage("teacher"):
            teacher = await common.train_teacher(exp, data["pretrain"])
        init = None
        if any(predistill_modes):
            with exp.stage("predistill"):
                init = await common.predistill_student(exp, teacher, data["unlabeled"])

        arms = [
            Arm(name=arm_name(lam, mode), lambda_=lam, predistill=mode)
            for mode in predistill_modes for lam in lambdas
        ]
        logger.info(f"Running {len(arms)} ablation arms with {jobs} job(s)")
        with exp.stage("arms"):
            arms = await self._run_arms(arms, teacher, init, data, jobs)

        for arm in arms:
            if arm.status == "done":
                await exp.register("checkpoint", f"arm/{arm.name}", exp.arm_dir(arm.name) / "student.ckpt",
                                   stage="vlcd")

        await exp.write_report("ablation.csv", ablation_csv(arms, TASK_LABELS))
        await exp.write_report("ablation_summary.json", dump_json({
            "config_hash": exp.hash,
            "seed": self.config.seed,
            "arms": [arm.summary() for arm in arms],
        }))

        failed = [arm.name for arm in arms if arm.status != "done"]
        if failed:
            logger.warning(f"{len(failed)} arm(s) failed: {', '.join(failed)}")
        for arm in arms:
            retrieval = "failed" if arm.retrieval is None else f"{arm.retrieval:.3f}"
            print(f"{arm.name}: {arm.status}, retrieval@1 {retrieval}")
        return arms
