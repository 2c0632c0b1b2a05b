"""
Shared fixtures: tiny supernet shapes, tiny datasets and throwaway run
directories. Everything here runs in well under a second.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pytest

from data.generate_synthetic_data import synth_dataset
from data.load_data import split_dataset
from utils.common.logger import APP_LOGGER_NAME
from utils.nas.search_space import LayerSpec, SupernetConfig
from workflows.models import validate_experiment_config
from workflows.nodes.shared import RunContext, clear_dataset_cache

TINY_SIZE = 16
TINY_CLASSES = 3


def tiny_config_dict(output_dir: str = "runs/test") -> Dict[str, Any]:
    """Experiment config small enough for every pipeline stage to run in a test."""
    return {
        "seed": 0,
        "output_dir": output_dir,
        "dataset": {"count": 48, "classes": TINY_CLASSES, "channels": 3, "height": TINY_SIZE,
                    "width": TINY_SIZE, "noise": 0.05, "valid_fraction": 0.25},
        "supernet": {
            "input_shape": [3, TINY_SIZE, TINY_SIZE],
            "stem_channels": 4,
            "layers": [{"c_in": 4, "c_out": 8, "stride": 2}, {"c_in": 8, "c_out": 8, "stride": 1}],
            "num_classes": TINY_CLASSES,
        },
        "search": {"epochs": 2, "batch_size": 12, "alpha_freeze_epochs": 1, "max_steps_per_epoch": 2},
        "latency_predictor": {"n_pairs": 60, "epochs": 5, "batch_size": 16, "hidden": [16, 8]},
        "train": {"epochs": 2, "grafting_epochs": 1, "batch_size": 12, "lr": 0.05},
        "elastic": {"r_min": 8, "r_max": 16, "step": 8, "n_calib": 16},
        "verify": {"n_samples": 8},
        "ablation": {"seeds": [0], "search_epochs": 1, "train_epochs": 1, "max_steps_per_epoch": 1,
                     "strategies": ["gdas_single", "sandwich"], "fixed_lambdas": [0.0]},
    }


@pytest.fixture
def tiny_supernet_cfg() -> SupernetConfig:
    return SupernetConfig(
        input_shape=(3, TINY_SIZE, TINY_SIZE),
        stem_channels=4,
        layers=[LayerSpec(c_in=4, c_out=8, stride=2), LayerSpec(c_in=8, c_out=8, stride=1)],
        num_classes=TINY_CLASSES,
    )


@pytest.fixture
def tiny_config():
    return validate_experiment_config(tiny_config_dict())


@pytest.fixture
def tiny_dataset():
    return synth_dataset(seed=0, classes=TINY_CLASSES, count=48, channels=3, height=TINY_SIZE,
                         width=TINY_SIZE, noise=0.05)


@pytest.fixture
def tiny_split(tiny_dataset):
    return split_dataset(tiny_dataset, 0.25, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def run_context(tmp_path: Path):
    clear_dataset_cache()
    config = validate_experiment_config(tiny_config_dict(str(tmp_path)))
    yield RunContext(config=config, output_dir=tmp_path)
    clear_dataset_cache()


@pytest.fixture
def app_caplog(caplog):
    """caplog wired to the application logger, which does not propagate to root."""
    app_logger = logging.getLogger(APP_LOGGER_NAME)
    app_logger.addHandler(caplog.handler)
    caplog.set_level(logging.INFO, logger=APP_LOGGER_NAME)
    yield caplog
    app_logger.removeHandler(caplog.handler)


@pytest.fixture
def tiny_config_file(tmp_path: Path) -> Path:
    path = tmp_path / "experiment_config.json"
    path.write_text(json.dumps(tiny_config_dict(str(tmp_path / "run"))))
    return path
