"""Efficiency benchmark of the teacher against the trained student."""

import logging

from src.cli.experiment import ArtifactMissingError, ExperimentDir
from src.cli.handlers import common
from src.services.benchmark import BenchReport
from src.utils.formatting import table

logger = logging.getLogger(__name__)


class BenchHandler:
    """Handler for the bench subcommand."""

    def __init__(self, experiment: ExperimentDir):
        self.experiment = experiment

    def _student(self):
        for predistill in (True, False):
            try:
                return self.experiment.existing_checkpoint(common.student_name(predistill))
            except ArtifactMissingError:
                continue
        raise ArtifactMissingError(f"no distilled student checkpoint in {self.experiment.root}; run pipeline first")

    async def bench_command(self) -> BenchReport:
        """Measure teacher and students; writes bench.json and bench.csv."""
        exp = self.experiment
        teacher = exp.existing_checkpoint("teacher")
        student = self._student()

        with exp.stage("bench"):
            report = common.bench(exp.config, teacher, student, exp.hash)
        await exp.write_report("bench.json", report.to_json())
        await exp.write_report("bench.csv", report.to_csv())

        rows = []
        for entry in report.entries:
            row = entry.row()
            rows.append([
                entry.model, entry.params, row["param_note"], entry.flops, row["flops_note"],
                f"{entry.throughput:.0f}", row["speed_note"],
            ])
        print(table(["model", "params", "", "flops", "", "samples/s", ""], rows))
        return report
