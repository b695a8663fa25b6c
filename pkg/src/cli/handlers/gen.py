"""Dataset generation command."""

import logging
from typing import Dict

from src.cli.experiment import ExperimentDir
from src.services.synthdata import DATASET_NAMES, Dataset
from src.utils.formatting import table

logger = logging.getLogger(__name__)


class GenHandler:
    """Handler for the gen subcommand."""

    def __init__(self, experiment: ExperimentDir):
        self.experiment = experiment

    async def gen_command(self) -> Dict[str, Dataset]:
        """Generate (or reuse) every dataset and print their counts."""
        with self.experiment.stage("gen"):
            datasets = await self.experiment.datasets(DATASET_NAMES, generate=True)

        rows = []
        for name, dataset in datasets.items():
            tasks = ",".join(str(t) for t in dataset.tasks) or "-"
            rows.append([name, dataset.kind, dataset.count, dataset.image_dim, tasks])
        print(table(["dataset", "kind", "count", "image_dim", "tasks"], rows))
        return datasets
