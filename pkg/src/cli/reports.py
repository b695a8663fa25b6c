"""CSV and JSON rendering of evaluation, comparison and ablation results."""

import csv
import io
import json
from typing import Any, Dict, List, Sequence

from src.services.evaluation import EvalReport

RESULTS_FIELDS = ["dataset", "task", "mean_auc", "std_auc", "n_splits", "config_hash", "seed"]
COMPARISON_FIELDS = ["method", "dataset", "task", "mean_auc", "std_auc", "config_hash", "seed"]
ABLATION_FIELDS = ["arm", "lambda", "predistill", "task", "mean_auc", "std_auc"]


def number(value: float) -> str:
    """Shortest round-tripping text of a float."""
    return repr(float(value))


def task_label(report: EvalReport, name: str) -> str:
    """Clean tasks keep their name; degraded ones are prefixed, e.g. 'degraded:task-2'."""
    return name if report.dataset == "finetune" else f"{report.dataset}:{name}"


def _csv(fields: Sequence[str], rows: List[Dict[str, Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buffer.getvalue()


def results_csv(reports: Sequence[EvalReport]) -> str:
    rows = []
    for report in reports:
        for result in report.tasks:
            rows.append({
                "dataset": report.dataset,
                "task": result.name,
                "mean_auc": number(result.mean),
                "std_auc": number(result.std),
                "n_splits": len(result.aucs),
                "config_hash": report.config_hash,
                "seed": report.seed,
            })
    return _csv(RESULTS_FIELDS, rows)


def comparison_csv(methods: Dict[str, Sequence[EvalReport]]) -> str:
    rows = []
    for method, reports in methods.items():
        for report in reports:
            for result in report.tasks:
                rows.append({
                    "method": method,
                    "dataset": report.dataset,
                    "task": result.name,
                    "mean_auc": number(result.mean),
                    "std_auc": number(result.std),
                    "config_hash": report.config_hash,
                    "seed": report.seed,
                })
    return _csv(COMPARISON_FIELDS, rows)


def ablation_csv(arms: Sequence[Any], task_labels: Sequence[str]) -> str:
    """One row per arm per task; failed arms carry 'failed' in the metric columns."""
    rows = []
    for arm in arms:
        scores = arm.task_scores()
        for label in task_labels:
            mean, std = scores.get(label, ("failed", "failed"))
            rows.append({
                "arm": arm.name,
                "lambda": number(arm.lambda_),
                "predistill": str(arm.predistill).lower(),
                "task": label,
                "mean_auc": mean if isinstance(mean, str) else number(mean),
                "std_auc": std if isinstance(std, str) else number(std),
            })
    return _csv(ABLATION_FIELDS, rows)


def dump_json(payload: Dict[str, Any]) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
