"""Tests for the learning-rate schedule, the optimizer and the training stages."""

import json
import math

import numpy as np
import pytest

from src.config import ExperimentConfig, TrainConfig
from src.numerics import ContractError
from src.services import evaluation, synthdata, training
from src.services.checkpoint import to_bytes


def with_stage(config: ExperimentConfig, stage: str, **fields) -> ExperimentConfig:
    """Copy of config with one training block updated."""
    block = getattr(config.train, stage).model_copy(update=fields)
    return config.model_copy(update={"train": config.train.model_copy(update={stage: block})})


def tensor_bytes(params):
    return [t.tobytes() for t in params.tensors()]


# ===== Schedule and optimizer =====

def test_lr_schedule_examples():
    cfg = TrainConfig(initial_lr=0.1, final_lr=0.0, max_epochs=10, warmup_epochs=1)
    assert training.lr_at(cfg, 0, 4) == 0.0
    assert training.lr_at(cfg, 4, 4) == pytest.approx(0.1)
    assert training.lr_at(cfg, 39, 4) == pytest.approx(0.0, abs=1e-15)

    midpoint = TrainConfig(initial_lr=0.1, final_lr=0.0, max_epochs=1, warmup_epochs=0)
    assert training.lr_at(midpoint, 1, 3) == pytest.approx(0.05)


def test_lr_schedule_is_monotone_after_warmup():
    cfg = TrainConfig(max_epochs=6, warmup_epochs=2)
    rates = [training.lr_at(cfg, step, 5) for step in range(30)]
    assert all(a <= b for a, b in zip(rates[:10], rates[1:11]))
    assert all(a >= b for a, b in zip(rates[10:], rates[11:]))


def test_lr_schedule_rejects_bad_arguments():
    cfg = TrainConfig()
    with pytest.raises(ContractError):
        training.lr_at(cfg, -1, 4)
    with pytest.raises(ContractError):
        training.lr_at(cfg, 0, 0)


def test_sgd_step_examples():
    params = [np.array([[1.0]])]
    state = training.OptState.zeros_like(params)
    params = training.sgd_step(params, [np.array([[1.0]])], state, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert params[0][0, 0] == pytest.approx(0.9)
    params = training.sgd_step(params, [np.array([[1.0]])], state, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert params[0][0, 0] == pytest.approx(0.71)
    assert state.step == 2


def test_sgd_step_with_zero_gradient_keeps_params():
    params = [np.array([[0.3, -2.0]])]
    state = training.OptState.zeros_like(params)
    out = training.sgd_step(params, [np.zeros((1, 2))], state, lr=0.5, momentum=0.9, weight_decay=0.0)
    np.testing.assert_array_equal(out[0], params[0])


def test_sgd_step_rejects_shape_mismatch():
    params = [np.zeros((2, 2))]
    with pytest.raises(ContractError):
        training.sgd_step(params, [np.zeros((2, 3))], training.OptState.zeros_like(params), 0.1, 0.9, 0.0)


# ===== Teacher =====

def test_teacher_needs_paired_data(config, datasets):
    with pytest.raises(ContractError):
        training.run_teacher_pretrain(config, datasets["unlabeled"])


def test_teacher_first_loss_near_log_batch():
    cfg = with_stage(ExperimentConfig(), "teacher", max_epochs=1)
    stage_cfg = cfg.stage_config("teacher")
    assert (stage_cfg.tau, stage_cfg.batch_size) == (0.1, 32)
    pairs = synthdata.generate("pretrain", cfg.world_config(), cfg.data)
    result = training.run_teacher_pretrain(cfg, pairs)
    assert result.history[0]["total"] == pytest.approx(math.log(32), rel=0.2)


def test_teacher_run_is_deterministic(config, datasets, teacher):
    again = training.run_teacher_pretrain(config, datasets["pretrain"]).checkpoint
    assert to_bytes(again) == to_bytes(teacher)
    assert teacher.stage == "teacher" and teacher.epoch == 2


# ===== Predistillation =====

def test_predistill_contracts(config, datasets, teacher):
    with pytest.raises(ContractError):
        training.run_predistill(config, teacher, datasets["pretrain"])
    student = training.run_no_kd(config, teacher, None, datasets["pretrain"]).checkpoint
    with pytest.raises(ContractError):
        training.run_predistill(config, student, datasets["unlabeled"])


def test_predistill_with_zero_lambda_keeps_init(config, datasets, teacher):
    cfg = with_stage(config, "predistill", lambda_=0.0)
    result = training.run_predistill(cfg, teacher, datasets["unlabeled"])
    seed = training.run_seed(cfg, cfg.stage_config("predistill"))
    assert tensor_bytes(result.params) == tensor_bytes(training.fresh_student(cfg, seed))


def test_predistill_writes_log(config, datasets, teacher, tmp_path):
    log = tmp_path / "logs" / "predistill.jsonl"
    result = training.run_predistill(config, teacher, datasets["unlabeled"], log_path=log)
    records = [json.loads(line) for line in log.read_text(encoding="utf-8").splitlines()]
    assert len(records) == len(result.history) == math.ceil(64 / 16)
    assert {"step", "epoch", "lr", "total", "l_dist"} <= set(records[0])


# ===== Distillation stages =====

def test_distillation_leaves_teacher_untouched(config, datasets, teacher):
    before = tensor_bytes(teacher.params)
    training.run_vlcd(config, teacher, None, datasets["pretrain"], lambda_=1.0)
    assert tensor_bytes(teacher.params) == before


def test_vlcd_with_zero_lambda_matches_no_kd(config, datasets, teacher):
    vlcd = training.run_vlcd(config, teacher, None, datasets["pretrain"], lambda_=0.0)
    plain = training.run_no_kd(config, teacher, None, datasets["pretrain"])
    assert tensor_bytes(vlcd.params) == tensor_bytes(plain.params)
    assert [r["total"] for r in vlcd.history] == [r["total"] for r in plain.history]


def test_kd_baseline_with_zero_lambda_matches_no_kd(config, datasets, teacher):
    kd = training.run_kd_baseline(config, teacher, None, datasets["pretrain"], lambda_=0.0)
    plain = training.run_no_kd(config, teacher, None, datasets["pretrain"])
    assert tensor_bytes(kd.params) == tensor_bytes(plain.params)


def test_vlcd_step_total_is_task_plus_weighted_norm_term(config, datasets, teacher):
    result = training.run_vlcd(config, teacher, None, datasets["pretrain"], lambda_=0.5)
    for record in result.history:
        assert record["total"] == pytest.approx(record["l_t"] + 0.5 * record["l_gnd"], rel=1e-12, abs=1e-12)
    assert result.checkpoint.extra == {"lambda": 0.5}


def test_logged_lr_follows_schedule(config, datasets, teacher):
    result = training.run_vlcd(config, teacher, None, datasets["pretrain"])
    stage_cfg = config.stage_config("vlcd")
    for record in result.history:
        assert record["lr"] == training.lr_at(stage_cfg, record["step"], 4)


def test_zero_learning_rate_keeps_init(config, datasets, teacher):
    cfg = with_stage(config, "vlcd", initial_lr=0.0, final_lr=0.0, weight_decay=0.0)
    result = training.run_vlcd(cfg, teacher, None, datasets["pretrain"])
    seed = training.run_seed(cfg, cfg.stage_config("vlcd"))
    assert tensor_bytes(result.params) == tensor_bytes(training.fresh_student(cfg, seed))


def test_vlcd_starts_from_predistilled_student(config, datasets, teacher):
    predistilled = training.run_predistill(config, teacher, datasets["unlabeled"]).checkpoint
    result = training.run_vlcd(config, teacher, predistilled, datasets["pretrain"])
    assert result.checkpoint.init == "predistill"
    fresh = training.run_vlcd(config, teacher, None, datasets["pretrain"])
    assert fresh.checkpoint.init == "fresh"
    assert tensor_bytes(result.params) != tensor_bytes(fresh.params)


def test_vlcd_contracts(config, datasets, teacher):
    with pytest.raises(ContractError):
        training.run_vlcd(config, teacher, None, datasets["unlabeled"])
    with pytest.raises(ContractError):
        training.run_vlcd(config, teacher, teacher, datasets["pretrain"])
    student = training.run_no_kd(config, teacher, None, datasets["pretrain"]).checkpoint
    with pytest.raises(ContractError):
        training.run_vlcd(config, student, None, datasets["pretrain"])


def test_class_baseline_runs(config, datasets, teacher):
    result = training.run_class_nd(config, teacher, None, datasets["pretrain"], lambda_=1.0)
    assert result.checkpoint.stage == "nd-class"
    assert "l_nd" in result.history[0]


# ===== Trends on frozen seeds =====

@pytest.mark.slow
def test_predistill_raises_feature_agreement(config, datasets, teacher):
    seed = training.run_seed(config, config.stage_config("predistill"))
    start = training.fresh_student(config, seed)
    trained = training.run_predistill(config, teacher, datasets["unlabeled"]).params
    x = datasets["unlabeled-holdout"].x
    assert evaluation.mean_feature_cosine(teacher, trained, x) > evaluation.mean_feature_cosine(teacher, start, x)


@pytest.mark.slow
def test_vlcd_retrieval_not_worse_than_no_kd():
    vlcd_scores, plain_scores = [], []
    for seed in (1, 2, 3):
        cfg = ExperimentConfig(seed=seed)
        world = synthdata.build_world(cfg.world_config())
        pairs = synthdata.generate("pretrain", cfg.world_config(), cfg.data, world=world)
        holdout = synthdata.generate("holdout", cfg.world_config(), cfg.data, world=world)
        teacher = training.run_teacher_pretrain(cfg, pairs).checkpoint
        vlcd = training.run_vlcd(cfg, teacher, None, pairs).checkpoint
        plain = training.run_no_kd(cfg, teacher, None, pairs).checkpoint
        vlcd_scores.append(evaluation.retrieval_accuracy(vlcd, holdout))
        plain_scores.append(evaluation.retrieval_accuracy(plain, holdout))
    assert np.mean(vlcd_scores) >= np.mean(plain_scores)


@pytest.mark.slow
def test_teacher_task_loss_decreases():
    cfg = ExperimentConfig()
    pairs = synthdata.generate("pretrain", cfg.world_config(), cfg.data)
    result = training.run_teacher_pretrain(cfg, pairs)
    assert len(result.epoch_losses) == 50
    assert result.epoch_losses[-1] < result.epoch_losses[0]
    assert result.history[-1]["l_t"] < result.history[0]["l_t"]


@pytest.mark.slow
def test_kd_baseline_agrees_with_teacher_more_than_no_kd():
    cfg = ExperimentConfig()
    pairs = synthdata.generate("pretrain", cfg.world_config(), cfg.data)
    teacher = training.run_teacher_pretrain(cfg, pairs).checkpoint
    kd = training.run_kd_baseline(cfg, teacher, None, pairs).checkpoint
    plain = training.run_no_kd(cfg, teacher, None, pairs).checkpoint
    assert kd.stage == "kd-baseline"
    assert evaluation.mean_feature_cosine(teacher, kd, pairs.x) > evaluation.mean_feature_cosine(teacher, plain, pairs.x)


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason="fixed text anchors make l_gnd a direct retrieval objective; see DESIGN.md")
def test_large_lambda_does_not_help_retrieval():
    large_scores, small_scores = [], []
    for seed in (1, 2, 3):
        cfg = ExperimentConfig(seed=seed)
        world = synthdata.build_world(cfg.world_config())
        pairs = synthdata.generate("pretrain", cfg.world_config(), cfg.data, world=world)
        holdout = synthdata.generate("holdout", cfg.world_config(), cfg.data, world=world)
        teacher = training.run_teacher_pretrain(cfg, pairs).checkpoint
        small = training.run_vlcd(cfg, teacher, None, pairs, lambda_=0.1).checkpoint
        large = training.run_vlcd(cfg, teacher, None, pairs, lambda_=10.0).checkpoint
        small_scores.append(evaluation.retrieval_accuracy(small, holdout))
        large_scores.append(evaluation.retrieval_accuracy(large, holdout))
    assert np.mean(large_scores) <= np.mean(small_scores)
