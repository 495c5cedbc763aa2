import numpy as np
import pytest
import yaml

from src.repository.datasets import synth_blobs

tiny_experiment = {
    "name": "tiny",
    "seed": 3,
    "runs": 1,
    "dataset": {"kind": "blobs", "num_classes": 4, "per_class": 20, "test_per_class": 10, "dim": 5},
    "partition": {"scheme": "iid", "clients": 4},
    "model": {"arch": "mlp"},
    "training": {
        "rounds": 2,
        "local_epochs": 1,
        "batch_size": 16,
        "optimizer": {"kind": "adam", "learning_rate": 0.01},
    },
    "attack": {"kind": "label_flip", "source_class": 0, "target_class": 1, "malicious_clients": [0]},
    "botpa": {"num_intermediate": 1, "surrogate_epochs": 2, "per_class_sample_cap": 10},
    "aggregator": {"kind": "fedavg"},
}


@pytest.fixture()
def blobs():
    return synth_blobs(num_classes=4, per_class=15, dim=6, spread=0.5, seed=11)


@pytest.fixture()
def experiment_data():
    return yaml.safe_load(yaml.safe_dump(tiny_experiment))


@pytest.fixture()
def config_file(tmp_path, experiment_data):
    path = tmp_path / "experiment.yaml"
    path.write_text(yaml.safe_dump(experiment_data), encoding="utf-8")
    return path


@pytest.fixture()
def rng():
    return np.random.default_rng(2024)
