# conftest.py
# Shared fixtures: small toy streams, quick trainer settings, one trained toy run per session

from pathlib import Path

import pytest
import yaml

from data_tasks import make_toy_stream
from trainer import TrainerConfig, run_stream

TOY_EPOCHS = 30


@pytest.fixture(scope="session")
def toy_stream():
    """3 tasks x 2 Gaussian classes, 40 train / 10 test points per class."""
    return make_toy_stream(n_tasks=3, classes_per_task=2, samples_per_class=50, seed=7)


@pytest.fixture
def quick_cfg():
    return TrainerConfig(epochs=3, batch_size=32, lr=0.05, seed=3)


@pytest.fixture(scope="session")
def toy_cfg():
    return TrainerConfig(epochs=TOY_EPOCHS, batch_size=32, lr=0.05, seed=3)


@pytest.fixture(scope="session")
def trained_toy(toy_stream, toy_cfg):
    """Full 3-task run without a results directory (models kept in memory)."""
    return run_stream(toy_stream, toy_cfg, "mlp-toy")


def write_config(path: Path, output_dir: Path, **sections) -> Path:
    """Small toy experiment config; keyword sections are merged over the base dict."""
    config = {
        "name": "toy",
        "seed": 7,
        "output_dir": str(output_dir),
        "dataset": {"id": "toy", "n_tasks": 3, "classes_per_task": 2, "samples_per_class": 50},
        "backbone": "mlp-toy",
        "trainer": {"epochs": TOY_EPOCHS, "batch_size": 32, "lr": 0.05, "augment": {"policy": "none"}},
        "evaluation": {
            "score_methods": [
                "msp", "odin", "energy", "entropy", "msp_bc",
                "cedl_vacuity", "cedl_dissonance", "cedl_dissonance_inv", "cedl_combined",
            ],
        },
    }
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(config.get(key), dict):
            config[key] = {**config[key], **value}
        else:
            config[key] = value
    path.write_text(yaml.safe_dump(config))
    return path


@pytest.fixture(scope="session")
def toy_run_dir(tmp_path_factory):
    """One end-to-end `run` of the toy config, shared by the experiment/plot tests."""
    from experiment import cmd_run

    root = tmp_path_factory.mktemp("toy_run")
    config = write_config(root / "toy.yaml", root / "results")
    return cmd_run(config)
