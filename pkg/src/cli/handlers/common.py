"""Stage helpers shared by the pipeline, ablation and bench handlers."""

import logging
from typing import Dict, List, Optional

from src.cli.experiment import ExperimentDir
from src.config import ExperimentConfig
from src.numerics.rng import Rng
from src.services import training
from src.services.benchmark import BenchReport, build_report
from src.services.checkpoint import Checkpoint
from src.services.encoders import EncoderParams, init_params
from src.services.evaluation import EvalReport, evaluate_five_splits, mean_feature_cosine
from src.services.synthdata import Dataset

logger = logging.getLogger(__name__)


async def train_teacher(experiment: ExperimentDir, pretrain: Dataset) -> Checkpoint:
    cfg = experiment.config
    return await experiment.checkpoint(
        "teacher", lambda log: training.run_teacher_pretrain(cfg, pretrain, log_path=log)
    )


async def predistill_student(experiment: ExperimentDir, teacher: Checkpoint, unlabeled: Dataset) -> Checkpoint:
    cfg = experiment.config
    return await experiment.checkpoint(
        "predistill", lambda log: training.run_predistill(cfg, teacher, unlabeled, log_path=log)
    )


def student_name(predistill: bool) -> str:
    """Checkpoint name of the main distilled student."""
    return "vlcd" if predistill else "vlcd-fresh"


async def distill_student(experiment: ExperimentDir, teacher: Checkpoint, init: Optional[Checkpoint],
                          pretrain: Dataset) -> Checkpoint:
    cfg = experiment.config
    return await experiment.checkpoint(
        student_name(init is not None),
        lambda log: training.run_vlcd(cfg, teacher, init, pretrain, log_path=log),
    )


def evaluate(cfg: ExperimentConfig, encoder: Checkpoint, dataset: Dataset, config_hash: str) -> EvalReport:
    """Five-split probe evaluation with the configured protocol."""
    return evaluate_five_splits(
        encoder, dataset, cfg.probe, cfg.seed,
        splits=cfg.eval.splits, test_fraction=cfg.eval.test_fraction, config_hash=config_hash,
    )


def predistill_agreement(cfg: ExperimentConfig, teacher: Checkpoint, student: Checkpoint,
                         holdout: Dataset) -> Dict[str, float]:
    """Mean teacher/student cosine on held-out unlabeled images, before and after predistillation."""
    seed = training.run_seed(cfg, cfg.stage_config("predistill"))
    before = mean_feature_cosine(teacher, training.fresh_student(cfg, seed), holdout.x)
    after = mean_feature_cosine(teacher, student, holdout.x)
    logger.info(f"Predistillation feature agreement: {before:.4f} -> {after:.4f}")
    return {"cos_before": before, "cos_after": after}


def alt_students(cfg: ExperimentConfig) -> List[EncoderParams]:
    """Freshly initialized alternative students; throughput does not depend on trained values."""
    return [init_params(spec, Rng(cfg.seed).spawn(f"{spec.name}-init")) for spec in cfg.alt_students]


def bench(cfg: ExperimentConfig, teacher: Checkpoint, student: Checkpoint, config_hash: str) -> BenchReport:
    return build_report(
        teacher.params,
        [student.params, *alt_students(cfg)],
        batch=cfg.eval.bench_batch,
        repeats=cfg.eval.bench_repeats,
        seed=cfg.seed,
        config_hash=config_hash,
    )
