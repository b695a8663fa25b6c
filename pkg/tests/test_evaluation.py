"""Tests for feature extraction, the logistic probe, AUC and retrieval."""

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score

from src.config import EncoderSpec, ProbeConfig
from src.numerics import ContractError, DegenerateLabelError
from src.numerics.rng import Rng
from src.services import evaluation
from src.services.encoders import EncoderParams, init_params
from src.services.synthdata import Dataset


def zero_encoder(spec: EncoderSpec) -> EncoderParams:
    params = init_params(spec, Rng(0))
    return EncoderParams(spec, [np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])


def identity_encoder(dim: int) -> EncoderParams:
    spec = EncoderSpec(name="identity", input_dim=dim, hidden=(), output_dim=dim)
    return EncoderParams(spec, [np.eye(dim)], [np.zeros((1, dim))])


def brute_force_auc(scores, labels) -> float:
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


# ===== Features =====

def test_extract_features(config, datasets):
    finetune = datasets["finetune"]
    zeros = evaluation.extract_features(zero_encoder(config.student), finetune)
    np.testing.assert_array_equal(zeros, np.zeros((finetune.count, 8)))

    params = init_params(config.student, Rng(1))
    first = evaluation.extract_features(params, finetune)
    assert first.tobytes() == evaluation.extract_features(params, finetune.x).tobytes()
    with pytest.raises(ContractError):
        evaluation.extract_features(params, np.ones((3, 5)))


# ===== Probe =====

def test_separable_probe_reaches_full_auc():
    rng = Rng(2)
    features = np.vstack([rng.normal((50, 2)) + 4.0, rng.normal((50, 2)) - 4.0])
    labels = np.r_[np.ones(50), np.zeros(50)]
    probe = evaluation.train_logreg(features, labels, ProbeConfig())
    assert evaluation.auc_roc(probe.scores(features), labels) == 1.0


def test_probe_on_noise_stays_near_chance():
    rng = Rng(3)
    features = rng.normal((500, 2))
    labels = (rng.uniform(500) < 0.5).astype(np.float64)
    probe = evaluation.train_logreg(features, labels, ProbeConfig())
    assert 0.45 <= evaluation.auc_roc(probe.scores(features), labels) <= 0.65


def test_probe_objective_never_increases():
    rng = Rng(4)
    features = rng.normal((200, 6))
    labels = (features[:, 0] + 0.5 * rng.normal(200) > 0).astype(np.float64)
    probe = evaluation.train_logreg(features, labels, ProbeConfig(max_iter=300))
    history = np.array(probe.objective_history)
    assert np.all(np.diff(history) <= 0.0)


def test_probe_weight_norm_grows_with_c():
    rng = Rng(5)
    features = rng.normal((200, 4))
    labels = (features @ np.array([1.0, -1.0, 0.5, 0.0]) + rng.normal(200) > 0).astype(np.float64)
    norms = [
        np.linalg.norm(evaluation.train_logreg(features, labels, ProbeConfig(c=c)).weights)
        for c in (0.01, 0.1, 1.0, 10.0)
    ]
    assert all(a <= b + 1e-9 for a, b in zip(norms, norms[1:]))


def test_probe_matches_reference_solver():
    rng = Rng(6)
    features = rng.normal((300, 3))
    labels = (features @ np.array([1.5, -0.5, 0.2]) + rng.normal(300) > 0).astype(np.float64)
    probe = evaluation.train_logreg(features, labels, ProbeConfig(c=1.0, max_iter=5000, tol=1e-12))
    reference = LogisticRegression(C=1.0, tol=1e-12, max_iter=10000).fit(features, labels)
    np.testing.assert_allclose(probe.weights, reference.coef_[0], atol=1e-3)
    assert probe.bias == pytest.approx(reference.intercept_[0], abs=1e-3)


def test_probe_rejects_single_class():
    with pytest.raises(DegenerateLabelError):
        evaluation.train_logreg(np.ones((10, 2)), np.zeros(10), ProbeConfig())


def test_standardized_probe_scores_raw_features():
    rng = Rng(7)
    features = rng.normal((100, 2)) * np.array([100.0, 0.01])
    labels = (features[:, 1] > 0).astype(np.float64)
    probe = evaluation.train_logreg(features, labels, ProbeConfig(standardize=True))
    assert evaluation.auc_roc(probe.scores(features), labels) > 0.95


# ===== AUC =====

def test_auc_examples():
    assert evaluation.auc_roc([0.1, 0.2, 0.3, 0.4], [0, 0, 1, 1]) == 1.0
    assert evaluation.auc_roc([0.4, 0.3, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert evaluation.auc_roc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5
    assert evaluation.auc_roc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_matches_reference_and_brute_force():
    rng = Rng(8)
    for trial in range(50):
        n = 20 + trial
        scores = np.round(rng.normal(n), 1)
        labels = (rng.uniform(n) < 0.4).astype(int)
        labels[:2] = [0, 1]
        auc = evaluation.auc_roc(scores, labels)
        assert auc == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)
        assert auc == pytest.approx(brute_force_auc(scores, labels), abs=1e-12)


def test_auc_invariances():
    rng = Rng(9)
    scores = rng.normal(60)
    labels = (rng.uniform(60) < 0.5).astype(int)
    labels[:2] = [0, 1]
    auc = evaluation.auc_roc(scores, labels)
    assert evaluation.auc_roc(np.exp(3.0 * scores), labels) == pytest.approx(auc, abs=1e-12)
    assert evaluation.auc_roc(-scores, labels) == pytest.approx(1.0 - auc, abs=1e-12)


def test_auc_contracts():
    with pytest.raises(DegenerateLabelError):
        evaluation.auc_roc([0.1, 0.2], [1, 1])
    with pytest.raises(ContractError):
        evaluation.auc_roc([0.1, 0.2, 0.3], [0, 1])


# ===== Split protocol =====

def test_zero_encoder_scores_exactly_chance(config, datasets):
    report = evaluation.evaluate_five_splits(zero_encoder(config.student), datasets["finetune"], config.probe, seed=1)
    assert [result.task for result in report.tasks] == [0, 1, 2, 3, 4]
    for result in report.tasks:
        assert len(result.aucs) == 5
        assert result.mean == 0.5 and result.std == 0.0


def test_split_evaluation_is_repeatable(config, datasets, teacher):
    first = evaluation.evaluate_five_splits(teacher, datasets["finetune"], config.probe, seed=3)
    second = evaluation.evaluate_five_splits(teacher, datasets["finetune"], config.probe, seed=3)
    assert first.to_dict() == second.to_dict()
    for result in first.tasks:
        assert all(0.0 <= auc <= 1.0 for _, auc in result.aucs)


def test_degraded_evaluation_covers_two_tasks(config, datasets, teacher):
    report = evaluation.evaluate_five_splits(teacher, datasets["degraded"], config.probe, seed=0)
    assert [result.task for result in report.tasks] == [2, 3]
    assert report.to_dict()["dataset"] == "degraded"


def test_split_evaluation_needs_labeled_data(config, datasets, teacher):
    with pytest.raises(ContractError):
        evaluation.evaluate_five_splits(teacher, datasets["pretrain"], config.probe, seed=0)


# ===== Retrieval and agreement =====

def test_retrieval_with_aligned_features_is_perfect():
    v = Rng(10).normal((40, 8))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    holdout = Dataset(kind="pretrain", x=v, v=v, seed=0, config_hash="")
    assert evaluation.retrieval_accuracy(identity_encoder(8), holdout, batch=10) == 1.0


def test_retrieval_on_unrelated_features_is_near_chance():
    rng = Rng(11)
    holdout = Dataset(kind="pretrain", x=rng.normal((1000, 8)), v=rng.normal((1000, 8)), seed=0, config_hash="")
    assert evaluation.retrieval_accuracy(identity_encoder(8), holdout, batch=100) == pytest.approx(0.01, abs=0.05)


def test_retrieval_needs_text(config, datasets, teacher):
    with pytest.raises(ContractError):
        evaluation.retrieval_accuracy(teacher, datasets["unlabeled"])


def test_feature_cosine_with_itself_is_one(datasets, teacher):
    x = datasets["unlabeled-holdout"].x
    assert evaluation.mean_feature_cosine(teacher, teacher, x) == pytest.approx(1.0, abs=1e-12)
