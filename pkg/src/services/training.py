"""Training stages: teacher pretraining, predistillation, distillation and baselines.

All stages share one loop: shuffle without replacement, optional
augmentation, tape forward/backward, SGD with momentum under the warmup +
cosine schedule. Randomness comes from role-named sub-streams of the run
seed (``<role>-init``, ``<role>-shuffle``, ``<role>-augment``), so student
runs that differ only in their loss see identical batches.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from src.config import ExperimentConfig, TrainConfig, experiment_hash
from src.numerics.rng import Rng
from src.numerics.tape import Tape, Var
from src.numerics.tensor import ContractError
from src.services import losses
from src.services.checkpoint import Checkpoint, loss_digest
from src.services.encoders import EncoderParams, forward, infer, init_params
from src.services.synthdata import Dataset, augment

logger = logging.getLogger(__name__)

BatchLoss = Callable[[Tape, List[Var], np.ndarray, np.ndarray], losses.LossOutput]


@dataclass
class OptState:
    """Momentum buffers (one per parameter tensor) and the step counter."""
    buffers: List[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "OptState":
        return cls(buffers=[np.zeros_like(p) for p in params])


@dataclass
class StageResult:
    """Final checkpoint, per-step log records and mean loss per epoch."""
    checkpoint: Checkpoint
    history: List[Dict[str, float]] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)

    @property
    def params(self) -> EncoderParams:
        return self.checkpoint.params


def lr_at(config: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Linear warmup from 0, then cosine decay to final_lr at the last step."""
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    if steps_per_epoch < 1:
        raise ContractError(f"steps_per_epoch must be >= 1, got {steps_per_epoch}")
    initial, final = config.initial_lr, config.final_lr
    warmup = config.warmup_epochs * steps_per_epoch
    if step < warmup:
        return initial * step / warmup

    decay_steps = config.max_epochs * steps_per_epoch - 1 - warmup
    if decay_steps <= 0:
        return initial
    t = min(step - warmup, decay_steps)
    return final + (initial - final) * 0.5 * (1.0 + math.cos(math.pi * t / decay_steps))


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptState,
             lr: float, momentum: float, weight_decay: float) -> List[np.ndarray]:
    """buf = momentum * buf + grad + wd * param; param = param - lr * buf."""
    if not (len(params) == len(grads) == len(state.buffers)):
        raise ContractError(f"{len(params)} params, {len(grads)} grads, {len(state.buffers)} buffers")
    updated = []
    for index, (param, grad, buf) in enumerate(zip(params, grads, state.buffers)):
        if not (param.shape == grad.shape == buf.shape):
            raise ContractError(f"tensor {index}: param {param.shape}, grad {grad.shape}, buffer {buf.shape}")
        buf *= momentum
        buf += grad
        if weight_decay:
            buf += weight_decay * param
        updated.append(param - lr * buf)
    state.step += 1
    return updated


def run_seed(cfg: ExperimentConfig, stage_cfg: TrainConfig) -> int:
    return cfg.seed if stage_cfg.seed is None else stage_cfg.seed


def _write_log(path: Optional[Path], history: List[Dict[str, float]]) -> None:
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in history:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def _train_loop(stage: str, params: EncoderParams, stage_cfg: TrainConfig, dataset: Dataset,
                batch_loss: BatchLoss, seed: int, role: str, augment_std: float,
                weight_decay: Optional[float] = None):
    """Optimize a copy of params; returns (params, history, epoch means)."""
    n = dataset.count
    steps_per_epoch = math.ceil(n / stage_cfg.batch_size)
    root = Rng(seed)
    shuffle_rng = root.spawn(f"{role}-shuffle")
    augment_rng = root.spawn(f"{role}-augment")
    wd = stage_cfg.weight_decay if weight_decay is None else weight_decay

    tensors = [t.copy() for t in params.tensors()]
    state = OptState.zeros_like(tensors)
    history, epoch_losses = [], []

    for epoch in range(stage_cfg.max_epochs):
        order = shuffle_rng.permutation(n)
        totals = []
        for start in range(0, n, stage_cfg.batch_size):
            idx = order[start:start + stage_cfg.batch_size]
            x = dataset.x[idx]
            if stage_cfg.augment:
                x = augment(x, augment_rng, augment_std)

            lr = lr_at(stage_cfg, state.step, steps_per_epoch)
            tape = Tape()
            leaves = [tape.leaf(t) for t in tensors]
            out = batch_loss(tape, leaves, x, idx)
            tape.backward(out.total)
            grads = tape.gradients(leaves)

            record = {"step": state.step, "epoch": epoch, "lr": lr, "total": out.value, **out.breakdown}
            history.append(record)
            totals.append(out.value)
            logger.debug(f"[{stage}] step {state.step} lr {lr:.5f} loss {out.value:.5f}")
            tensors = sgd_step(tensors, grads, state, lr, stage_cfg.momentum, wd)

        epoch_losses.append(float(np.mean(totals)))
        logger.info(f"[{stage}] epoch {epoch + 1}/{stage_cfg.max_epochs}: loss {epoch_losses[-1]:.4f}")

    return EncoderParams.from_tensors(params.spec, tensors), history, epoch_losses


def _finish(stage: str, cfg: ExperimentConfig, stage_cfg: TrainConfig, seed: int, params: EncoderParams,
            history, epoch_losses, log_path: Optional[Path], init: str, extra: Optional[Dict] = None) -> StageResult:
    _write_log(log_path, history)
    ckpt = Checkpoint(
        params=params,
        stage=stage,
        seed=seed,
        epoch=stage_cfg.max_epochs,
        config_hash=experiment_hash(cfg),
        config=stage_cfg.model_dump(mode="json", by_alias=True),
        loss_digest=loss_digest(history),
        init=init,
        extra=extra or {},
    )
    return StageResult(checkpoint=ckpt, history=history, epoch_losses=epoch_losses)


def _require_kind(op: str, dataset: Dataset, kind: str) -> None:
    if dataset.kind != kind:
        raise ContractError(f"{op} needs a {kind} dataset, got {dataset.kind}")


def _require_teacher(op: str, teacher: Checkpoint) -> None:
    if teacher.stage != "teacher":
        raise ContractError(f"{op} needs a teacher checkpoint, got stage {teacher.stage}")


def run_teacher_pretrain(cfg: ExperimentConfig, dataset: Dataset, log_path: Optional[Path] = None) -> StageResult:
    """Contrastive pretraining of the teacher on image/text pairs."""
    _require_kind("run_teacher_pretrain", dataset, "pretrain")
    stage_cfg = cfg.stage_config("teacher")
    seed = run_seed(cfg, stage_cfg)
    params = init_params(cfg.teacher, Rng(seed).spawn("teacher-init"))
    loss_params = losses.LossParams.from_train_config(stage_cfg)

    def batch_loss(tape, leaves, x, idx):
        u = forward(leaves, tape.constant(x), cfg.teacher)
        return losses.vlcp_loss(losses.BatchFeatures(v=dataset.v[idx], u_t=u), loss_params, "teacher")

    logger.info(f"Pretraining teacher {cfg.teacher.name} on {dataset.count} pairs")
    params, history, epoch_losses = _train_loop(
        "teacher", params, stage_cfg, dataset, batch_loss, seed, "teacher", cfg.world.augment_std
    )
    return _finish("teacher", cfg, stage_cfg, seed, params, history, epoch_losses, log_path, init="fresh")


def fresh_student(cfg: ExperimentConfig, seed: int) -> EncoderParams:
    """Student initialization shared by every student stage of a run."""
    return init_params(cfg.student, Rng(seed).spawn("student-init"))


def run_predistill(cfg: ExperimentConfig, teacher: Checkpoint, dataset: Dataset,
                   log_path: Optional[Path] = None) -> StageResult:
    """Student pulled toward teacher features on unlabeled images.

    The objective is lambda * (1 - mean cos(u_t, u_s)) alone; lambda also
    scales the weight-decay term, so lambda = 0 leaves the student fixed.
    """
    _require_teacher("run_predistill", teacher)
    _require_kind("run_predistill", dataset, "unlabeled")
    stage_cfg = cfg.stage_config("predistill")
    seed = run_seed(cfg, stage_cfg)
    params = fresh_student(cfg, seed)
    lam = stage_cfg.lambda_

    def batch_loss(tape, leaves, x, idx):
        u_s = forward(leaves, tape.constant(x), cfg.student)
        u_t = infer(teacher.params, x)
        term = losses.feature_distill_loss(losses.BatchFeatures(u_s=u_s, u_t=u_t))
        return losses.LossOutput(total=tape.scale(term.total, lam), breakdown=term.breakdown)

    logger.info(f"Predistilling {cfg.student.name} on {dataset.count} unlabeled images (lambda={lam})")
    params, history, epoch_losses = _train_loop(
        "predistill", params, stage_cfg, dataset, batch_loss, seed, "predistill", cfg.world.augment_std,
        weight_decay=lam * stage_cfg.weight_decay,
    )
    return _finish("predistill", cfg, stage_cfg, seed, params, history, epoch_losses, log_path, init="fresh")


def _student_start(op: str, cfg: ExperimentConfig, student_init: Optional[Checkpoint], seed: int):
    if student_init is None:
        return fresh_student(cfg, seed), "fresh"
    if student_init.spec.layer_shapes != cfg.student.layer_shapes:
        raise ContractError(
            f"{op}: init {student_init.spec.name} has layers {student_init.spec.layer_shapes}, "
            f"student needs {cfg.student.layer_shapes}"
        )
    return student_init.params.copy(), student_init.stage


def _distill(stage: str, cfg: ExperimentConfig, teacher: Checkpoint, student_init: Optional[Checkpoint],
             dataset: Dataset, lambda_: Optional[float], log_path: Optional[Path]) -> StageResult:
    op = f"run[{stage}]"
    _require_teacher(op, teacher)
    _require_kind(op, dataset, "pretrain")
    stage_cfg = cfg.stage_config(stage)
    if lambda_ is not None:
        stage_cfg = stage_cfg.model_copy(update={"lambda_": lambda_})
    seed = run_seed(cfg, stage_cfg)
    params, init = _student_start(op, cfg, student_init, seed)
    loss_params = losses.LossParams.from_train_config(stage_cfg)

    def batch_loss(tape, leaves, x, idx):
        u_s = forward(leaves, tape.constant(x), cfg.student)
        batch = losses.BatchFeatures(
            v=dataset.v[idx],
            u_s=u_s,
            u_t=infer(teacher.params, x),
            class_ids=None if dataset.concepts is None else dataset.concepts[idx],
        )
        if stage == "vlcd":
            return losses.vlcd_total(batch, loss_params)
        if stage == "kd-baseline":
            return losses.feature_kd_total(batch, loss_params)
        if stage == "nd-class":
            return losses.class_nd_total(batch, loss_params)
        return losses.vlcp_loss(batch, loss_params)

    logger.info(f"Training {cfg.student.name} [{stage}] from {init} init, lambda={stage_cfg.lambda_}")
    params, history, epoch_losses = _train_loop(
        stage, params, stage_cfg, dataset, batch_loss, seed, "student", cfg.world.augment_std
    )
    return _finish(stage, cfg, stage_cfg, seed, params, history, epoch_losses, log_path, init=init,
                   extra={"lambda": stage_cfg.lambda_})


def run_vlcd(cfg: ExperimentConfig, teacher: Checkpoint, student_init: Optional[Checkpoint],
             dataset: Dataset, lambda_: Optional[float] = None, log_path: Optional[Path] = None) -> StageResult:
    """Student contrastive loss plus lambda times text-anchored norm distillation."""
    return _distill("vlcd", cfg, teacher, student_init, dataset, lambda_, log_path)


def run_kd_baseline(cfg: ExperimentConfig, teacher: Checkpoint, student_init: Optional[Checkpoint],
                    dataset: Dataset, lambda_: Optional[float] = None,
                    log_path: Optional[Path] = None) -> StageResult:
    """Student contrastive loss plus lambda times unanchored cosine distillation."""
    return _distill("kd-baseline", cfg, teacher, student_init, dataset, lambda_, log_path)


def run_no_kd(cfg: ExperimentConfig, teacher: Checkpoint, student_init: Optional[Checkpoint],
              dataset: Dataset, log_path: Optional[Path] = None) -> StageResult:
    """Student contrastive loss only."""
    return _distill("no-kd", cfg, teacher, student_init, dataset, None, log_path)


def run_class_nd(cfg: ExperimentConfig, teacher: Checkpoint, student_init: Optional[Checkpoint],
                 dataset: Dataset, lambda_: Optional[float] = None,
                 log_path: Optional[Path] = None) -> StageResult:
    """Student contrastive loss plus class-anchored norm distillation over concept ids."""
    if dataset.concepts is None:
        raise ContractError("run_class_nd needs concept ids")
    return _distill("nd-class", cfg, teacher, student_init, dataset, lambda_, log_path)
