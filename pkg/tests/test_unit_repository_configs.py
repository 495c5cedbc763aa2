import pytest
import yaml

from src.repository.configs import dump_config, parse_config, validate_config, with_overrides
from src.services.errors import ConfigError


def test_defaults_are_filled(tmp_path):
    path = tmp_path / "minimal.yaml"
    path.write_text("name: minimal\n", encoding="utf-8")
    cfg = parse_config(path)
    assert cfg.training.batch_size == 64
    assert cfg.training.rounds == 25
    assert cfg.aggregator.flame_lambda == 1e-3
    assert cfg.metrics.to_round == cfg.training.rounds
    assert cfg.attack is None


def test_resolved_config_reloads(tmp_path, experiment_data):
    cfg = validate_config(experiment_data)
    path = tmp_path / "resolved.yaml"
    path.write_text(dump_config(cfg), encoding="utf-8")
    assert parse_config(path) == cfg
    assert cfg.botpa.contrib_checkpoint_epoch == 1


@pytest.mark.parametrize(
    "change, key",
    [
        ({"attack": {"source_class": 1, "target_class": 1}}, "attack"),
        ({"botpa": {"num_intermediate": 3}}, "num_intermediate"),
        ({"training": {"batch": 32}}, "training.batch"),
        ({"aggregator": {"kind": "krum", "f_byzantine": 1}}, "krum"),
        ({"metrics": {"from_round": 3}}, "metrics window"),
        ({"attack": {"malicious_clients": [9]}}, "malicious_clients"),
    ],
)
def test_invalid_configs_name_the_key(experiment_data, change, key):
    for section, values in change.items():
        experiment_data.setdefault(section, {}).update(values)
    with pytest.raises(ConfigError) as info:
        validate_config(experiment_data)
    assert key in str(info.value)


def test_botpa_needs_an_attack(experiment_data):
    experiment_data["attack"] = {"kind": "none"}
    with pytest.raises(ConfigError):
        validate_config(experiment_data)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "absent.yaml")
    broken = tmp_path / "broken.yaml"
    broken.write_text("dataset: [unclosed\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        parse_config(broken)
    listed = tmp_path / "list.yaml"
    listed.write_text(yaml.safe_dump([1, 2]), encoding="utf-8")
    with pytest.raises(ConfigError):
        parse_config(listed)


def test_overrides_revalidate(experiment_data):
    cfg = validate_config(experiment_data)
    updated = with_overrides(cfg, {"botpa.num_intermediate": 2, "partition.scheme": "dirichlet"})
    assert updated.botpa.num_intermediate == 2
    assert updated.partition.scheme == "dirichlet"
    assert cfg.botpa.num_intermediate == 1
    with pytest.raises(ConfigError):
        with_overrides(cfg, {"botpa.num_intermediate": 5})
    with pytest.raises(ConfigError):
        with_overrides(cfg.model_copy(update={"sweep": None}), {"sweep.axis": "N"})
