"""
Shared fixtures: `src/` on sys.path, a tiny experiment config and its data.
"""
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from ctc_lab.models.config import TrainConfig  # noqa: E402
from ctc_lab.services.pipeline import load_experiment_data  # noqa: E402

CONFIG_DIR = ROOT / "configs"

TINY = {
    "data": {
        "shared_dim": 3,
        "source_private_dim": 3,
        "target_private_dim": 3,
        "source_classes": 3,
        "target_classes": 2,
        "train_samples": 96,
        "test_samples": 64,
        "noise_std": 0.1,
        "seed": 0,
    },
    "model": {"hidden_dims": [16], "rep_dim": 8, "seed": 0},
    "stage1": {"epochs": 2, "batch_size": 32, "lr_init": 0.05, "alpha": 0.5},
    "stage2": {"epochs": 2, "batch_size": 32, "lr_init": 0.005},
    "eval": {"probe_steps": 30, "probe_batch_size": 32, "probe_decay_steps": [10, 20]},
    "mi": {"enabled": False},
}


def make_config(**sections) -> TrainConfig:
    """TINY with per-section updates, e.g. make_config(stage1={"alpha": 0})."""
    raw = {name: dict(values) for name, values in TINY.items()}
    for name, updates in sections.items():
        raw[name].update(updates)
    return TrainConfig(**raw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> TrainConfig:
    return make_config()


@pytest.fixture
def tiny_data(tiny_config):
    return load_experiment_data(tiny_config.data)
