"""Shared fixtures: a tiny experiment configuration and artifacts built from it."""

import json
from pathlib import Path
from typing import Dict

import pytest

from src.config import ExperimentConfig, Settings
from src.services import synthdata, training
from src.services.checkpoint import Checkpoint

TINY_CONFIG = {
    "seed": 7,
    "output_dir": "tiny",
    "world": {"concepts": 4, "image_dim": 8, "text_dim": 8, "attributes": 5, "unlabeled_concepts": 4},
    "data": {"pretrain": 64, "unlabeled": 64, "finetune": 60, "degraded": 30, "holdout": 20},
    "teacher": {"name": "teacher-mlp", "input_dim": 8, "hidden": [16, 16], "output_dim": 8},
    "student": {"name": "student-mlp", "input_dim": 8, "hidden": [8], "output_dim": 8},
    "alt_students": [{"name": "student-wide", "input_dim": 8, "hidden": [12], "output_dim": 8}],
    "train": {
        "teacher": {"stage": "teacher", "max_epochs": 2, "warmup_epochs": 1, "batch_size": 16},
        "predistill": {"stage": "predistill", "max_epochs": 1, "warmup_epochs": 0, "batch_size": 16,
                       "augment": False},
        "vlcd": {"stage": "vlcd", "max_epochs": 2, "warmup_epochs": 1, "batch_size": 16},
    },
    "probe": {"max_iter": 200},
    "eval": {"retrieval_batch": 10, "bench_batch": 8, "bench_repeats": 3},
}


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run frozen-seed trend tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_config(**overrides) -> ExperimentConfig:
    """The tiny experiment, optionally with top-level sections replaced."""
    payload = {**TINY_CONFIG, **overrides}
    return ExperimentConfig.model_validate(payload)


@pytest.fixture(scope="session")
def make_config():
    return tiny_config


@pytest.fixture(scope="session")
def config() -> ExperimentConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def world(config):
    return synthdata.build_world(config.world_config())


@pytest.fixture(scope="session")
def datasets(config, world) -> Dict[str, synthdata.Dataset]:
    """Every named dataset of the tiny experiment (treat as read-only)."""
    world_cfg = config.world_config()
    return {name: synthdata.generate(name, world_cfg, config.data, world=world) for name in synthdata.DATASET_NAMES}


@pytest.fixture(scope="session")
def teacher(config, datasets) -> Checkpoint:
    return training.run_teacher_pretrain(config, datasets["pretrain"]).checkpoint


@pytest.fixture
def config_file(tmp_path) -> Path:
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG, indent=2), encoding="utf-8")
    return path


@pytest.fixture
def settings(tmp_path) -> Settings:
    return Settings(runs_dir=str(tmp_path / "runs"))
