"""Frozen-encoder evaluation: linear probes, AUC-ROC, retrieval and feature agreement."""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.special import expit, log_expit
from scipy.stats import rankdata

from src.config import TASK_NAMES, ProbeConfig
from src.numerics.tensor import ContractError, DegenerateLabelError, DimensionError, unit_rows
from src.services.checkpoint import Checkpoint
from src.services.encoders import EncoderParams, infer
from src.services.synthdata import Dataset, split_random

logger = logging.getLogger(__name__)

__all__ = [
    "DegenerateLabelError",
    "EvalReport",
    "ProbeModel",
    "TaskResult",
    "auc_roc",
    "evaluate_five_splits",
    "extract_features",
    "mean_feature_cosine",
    "retrieval_accuracy",
    "train_logreg",
]

Encoder = Union[Checkpoint, EncoderParams]

ARMIJO_C = 1e-4
MIN_STEP = 1e-16


def _params(encoder: Encoder) -> EncoderParams:
    return encoder.params if isinstance(encoder, Checkpoint) else encoder


@dataclass
class ProbeModel:
    """Logistic-regression probe; ``center``/``scale`` are set when standardizing."""
    weights: np.ndarray
    bias: float
    objective_history: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    center: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None

    def scores(self, features: np.ndarray) -> np.ndarray:
        """Decision values w . f + b."""
        if self.center is not None:
            features = (features - self.center) / self.scale
        return features @ self.weights + self.bias


@dataclass
class TaskResult:
    """Per-split AUCs of one task with their mean and sample std."""
    task: int
    name: str
    aucs: List[Tuple[int, float]]

    @property
    def values(self) -> np.ndarray:
        return np.array([auc for _, auc in self.aucs])

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def std(self) -> float:
        return float(self.values.std(ddof=1)) if len(self.aucs) > 1 else 0.0


@dataclass
class EvalReport:
    """Linear-probe results for one encoder on one dataset."""
    encoder: str
    dataset: str
    tasks: List[TaskResult]
    config_hash: str
    seed: int
    n_splits: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "encoder": self.encoder,
            "dataset": self.dataset,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "n_splits": self.n_splits,
            "tasks": [
                {**asdict(result), "mean_auc": result.mean, "std_auc": result.std}
                for result in self.tasks
            ],
        }


def extract_features(encoder: Encoder, data: Union[Dataset, np.ndarray]) -> np.ndarray:
    """Frozen forward pass over every sample."""
    params = _params(encoder)
    x = data.x if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    try:
        return infer(params, x)
    except DimensionError as e:
        raise ContractError(f"extract_features: {e.message}")


def _require_both_classes(op: str, labels: np.ndarray) -> None:
    positives = int(labels.sum())
    if positives == 0 or positives == labels.size:
        raise DegenerateLabelError(f"{op}: labels contain a single class")


def _objective(features: np.ndarray, labels: np.ndarray, w: np.ndarray, b: float, c: float) -> float:
    z = features @ w + b
    data_term = -np.sum(labels * log_expit(z) + (1.0 - labels) * log_expit(-z))
    return float(data_term + 0.5 * np.dot(w, w) / c)


def train_logreg(features: np.ndarray, labels: np.ndarray, cfg: ProbeConfig) -> ProbeModel:
    """Full-batch gradient descent with Armijo backtracking on the penalized log loss.

    Objective: sum_i logloss(y_i, sigmoid(w . f_i + b)) + ||w||^2 / (2C);
    the bias is not penalized. Accepted steps never increase the objective.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if features.ndim != 2 or features.shape[0] != labels.size:
        raise ContractError(f"train_logreg: features {features.shape} do not match {labels.size} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractError("train_logreg: labels must be 0/1")
    if labels.size < 2:
        raise DegenerateLabelError("train_logreg: need at least two samples")
    _require_both_classes("train_logreg", labels)

    center = scale = None
    if cfg.standardize:
        center = features.mean(axis=0)
        scale = features.std(axis=0)
        scale[scale == 0.0] = 1.0
        features = (features - center) / scale

    w = np.zeros(features.shape[1])
    b = 0.0
    value = _objective(features, labels, w, b, cfg.c)
    history = [value]
    # 1 / Lipschitz bound of the gradient as the first trial step
    step = 1.0 / (0.25 * (np.sum(features ** 2) + labels.size) + 1.0 / cfg.c)
    converged = False
    iteration = 0

    for iteration in range(1, cfg.max_iter + 1):
        residual = expit(features @ w + b) - labels
        grad_w = features.T @ residual + w / cfg.c
        grad_b = float(residual.sum())
        grad_sq = float(np.dot(grad_w, grad_w) + grad_b * grad_b)
        if np.sqrt(grad_sq) <= cfg.tol * max(1.0, abs(value)):
            converged = True
            break

        trial = step * 2.0
        while True:
            new_w = w - trial * grad_w
            new_b = b - trial * grad_b
            new_value = _objective(features, labels, new_w, new_b, cfg.c)
            if new_value <= value - ARMIJO_C * trial * grad_sq:
                break
            trial *= 0.5
            if trial < MIN_STEP:
                break
        if trial < MIN_STEP or new_value > value:
            converged = True
            break

        w, b, step = new_w, new_b, trial
        improvement = value - new_value
        value = new_value
        history.append(value)
        if improvement <= cfg.tol * max(1.0, abs(value)):
            converged = True
            break

    logger.debug(f"Probe stopped after {iteration} iterations, objective {value:.6f}")
    return ProbeModel(weights=w, bias=b, objective_history=history, iterations=iteration,
                      converged=converged, center=center, scale=scale)


def auc_roc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size != labels.size:
        raise ContractError(f"auc_roc: {scores.size} scores for {labels.size} labels")
    positive = labels == 1
    n_pos = int(positive.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelError("auc_roc: labels contain a single class")
    ranks = rankdata(scores, method="average")
    u_stat = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def evaluate_five_splits(encoder: Encoder, dataset: Dataset, probe_cfg: ProbeConfig, seed: int,
                         splits: int = 5, test_fraction: float = 0.2, config_hash: str = "") -> EvalReport:
    """Probe every labeled task on k random splits; AUC measured on the test part."""
    if dataset.kind not in ("finetune", "degraded"):
        raise ContractError(f"evaluate_five_splits needs a finetune or degraded dataset, got {dataset.kind}")
    params = _params(encoder)
    features = extract_features(params, dataset)
    index_splits = split_random(dataset.count, splits, seed, test_fraction, labels=dataset.labels)

    results = {task: TaskResult(task=task, name=TASK_NAMES[task], aucs=[]) for task in dataset.tasks}
    for split_id, split in enumerate(index_splits):
        if np.intersect1d(split.train, split.test).size:
            raise ContractError(f"split {split_id} trains on its own test indices")
        for task in dataset.tasks:
            labels = dataset.task_labels(task)
            probe = train_logreg(features[split.train], labels[split.train], probe_cfg)
            auc = auc_roc(probe.scores(features[split.test]), labels[split.test])
            results[task].aucs.append((split_id, auc))

    report = EvalReport(
        encoder=params.spec.name,
        dataset=dataset.kind,
        tasks=[results[task] for task in dataset.tasks],
        config_hash=config_hash or dataset.config_hash,
        seed=seed,
        n_splits=splits,
    )
    for result in report.tasks:
        logger.info(f"{params.spec.name} on {dataset.kind}/{result.name}: AUC {result.mean:.3f} ± {result.std:.3f}")
    return report


def retrieval_accuracy(encoder: Encoder, holdout: Dataset, batch: int = 100) -> float:
    """Top-1 image-to-text accuracy within consecutive holdout batches.

    A batch counts each image whose own text is the cosine-nearest; the
    trailing partial batch is dropped unless the holdout is smaller than
    one batch.
    """
    if holdout.v is None:
        raise ContractError("retrieval_accuracy needs paired text features")
    features = unit_rows(extract_features(encoder, holdout))
    texts = unit_rows(holdout.v)
    n = holdout.count
    size = min(batch, n)
    correct = counted = 0
    for start in range(0, n - size + 1, size):
        sims = features[start:start + size] @ texts[start:start + size].T
        correct += int(np.sum(np.argmax(sims, axis=1) == np.arange(size)))
        counted += size
    return correct / counted


def mean_feature_cosine(teacher: Encoder, student: Encoder, x: np.ndarray) -> float:
    """Mean cosine between teacher and student features of the same inputs."""
    u_t = unit_rows(extract_features(teacher, x))
    u_s = unit_rows(extract_features(student, x))
    return float(np.mean(np.sum(u_t * u_s, axis=1)))
