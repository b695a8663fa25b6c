"""Full protocol: teacher, predistillation, distillation, evaluation, benchmark."""

import logging
from typing import Any, Dict, List, Optional

from src.cli.experiment import ExperimentDir
from src.cli.handlers import common
from src.cli.reports import comparison_csv, dump_json, results_csv
from src.services import training
from src.services.checkpoint import Checkpoint
from src.services.evaluation import EvalReport, retrieval_accuracy
from src.services.synthdata import DATASET_NAMES, Dataset
from src.utils.formatting import mean_std, table

logger = logging.getLogger(__name__)


class PipelineHandler:
    """Handler for the pipeline subcommand."""

    def __init__(self, experiment: ExperimentDir):
        self.experiment = experiment
        self.config = experiment.config

    def _evaluate_both(self, encoder: Checkpoint, data: Dict[str, Dataset]) -> List[EvalReport]:
        return [
            common.evaluate(self.config, encoder, data["finetune"], self.experiment.hash),
            common.evaluate(self.config, encoder, data["degraded"], self.experiment.hash),
        ]

    async def _compare(self, teacher: Checkpoint, student: Checkpoint, predistilled: bool,
                       data: Dict[str, Dataset]) -> Dict[str, Any]:
        """Train the baselines under the same budget and evaluate every method."""
        cfg, exp = self.config, self.experiment
        pretrain = data["pretrain"]
        students = {
            "no-kd": await exp.checkpoint(
                "no-kd", lambda log: training.run_no_kd(cfg, teacher, None, pretrain, log_path=log)),
            "kd-baseline": await exp.checkpoint(
                "kd-baseline", lambda log: training.run_kd_baseline(cfg, teacher, None, pretrain, log_path=log)),
            "nd-class": await exp.checkpoint(
                "nd-class", lambda log: training.run_class_nd(cfg, teacher, None, pretrain, log_path=log)),
        }
        if predistilled:
            students["vlcd-no-predistill"] = await common.distill_student(exp, teacher, None, pretrain)

        methods = {"teacher": teacher, **students, "vlcd": student}
        reports = {name: self._evaluate_both(encoder, data) for name, encoder in methods.items()}
        await exp.write_report("comparison.csv", comparison_csv(reports))
        return {
            name: {
                "retrieval": retrieval_accuracy(encoder, data["holdout"], cfg.eval.retrieval_batch),
                "results": [report.to_dict() for report in reports[name]],
            }
            for name, encoder in methods.items()
        }

    async def pipeline_command(self, generate: bool = False, predistill: bool = True,
                               compare: bool = False) -> Dict[str, Any]:
        """Run every stage in order and write summary.json and results.csv."""
        cfg, exp = self.config, self.experiment

        with exp.stage("data"):
            data = await exp.datasets(DATASET_NAMES, generate=generate)

        with exp.stage("teacher"):
            teacher = await common.train_teacher(exp, data["pretrain"])

        init: Optional[Checkpoint] = None
        agreement = None
        if predistill:
            with exp.stage("predistill"):
                init = await common.predistill_student(exp, teacher, data["unlabeled"])
                agreement = common.predistill_agreement(cfg, teacher, init, data["unlabeled-holdout"])

        with exp.stage("vlcd"):
            student = await common.distill_student(exp, teacher, init, data["pretrain"])

        with exp.stage("evaluate"):
            reports = self._evaluate_both(student, data)
            retrieval = {
                "teacher": retrieval_accuracy(teacher, data["holdout"], cfg.eval.retrieval_batch),
                "student": retrieval_accuracy(student, data["holdout"], cfg.eval.retrieval_batch),
            }

        with exp.stage("bench"):
            bench = common.bench(cfg, teacher, student, exp.hash)
            await exp.write_report("bench.json", bench.to_json())
            await exp.write_report("bench.csv", bench.to_csv())

        comparison = None
        if compare:
            with exp.stage("compare"):
                comparison = await self._compare(teacher, student, predistill, data)

        vlcd_cfg = cfg.stage_config("vlcd")
        summary = {
            "config_hash": exp.hash,
            "seed": cfg.seed,
            "defaults": {"lambda": vlcd_cfg.lambda_, "alpha": vlcd_cfg.alpha, "tau": vlcd_cfg.tau},
            "datasets": {name: dataset.count for name, dataset in data.items()},
            "teacher": {"name": teacher.spec.name, "loss_digest": teacher.loss_digest},
            "student": {"name": student.spec.name, "init": student.init, "loss_digest": student.loss_digest},
            "predistill": agreement,
            "retrieval": retrieval,
            "results": [report.to_dict() for report in reports],
            "comparison": comparison,
        }
        await exp.write_report("results.csv", results_csv(reports))
        await exp.write_report("summary.json", dump_json(summary))

        rows = [
            [report.dataset, result.name, mean_std(result.mean, result.std)]
            for report in reports for result in report.tasks
        ]
        print(table(["dataset", "task", "AUC (mean ± std)"], rows))
        print(f"retrieval@1 teacher {retrieval['teacher']:.3f}, student {retrieval['student']:.3f}")
        return summary
