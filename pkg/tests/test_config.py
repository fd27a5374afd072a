import json

import pytest

from dgprune.config import ExperimentConfig, PretrainConfig, dump_config, from_dict, load_config
from dgprune.exceptions import ConfigError


def test_defaults_round_trip_through_yaml(tmp_path):
    cfg = ExperimentConfig()
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg


def test_json_config_with_nested_sections(tmp_path):
    doc = {"seeds": [3, 4], "held_out_domain": 0,
           "pretrain": {"method": "coral", "coral_lambda": 0.5},
           "pruning": {"criterion": "ior", "ior": {"alpha": 2.0},
                       "schedule": {"target_remaining_ratio": 0.3}}}
    (tmp_path / "c.json").write_text(json.dumps(doc))
    cfg = load_config(tmp_path / "c.json")
    assert cfg.seeds == (3, 4) and cfg.pretrain.coral_lambda == 0.5
    assert cfg.pruning.ior.alpha == 2.0 and cfg.pruning.schedule.target_remaining_ratio == 0.3
    assert cfg.pruning.schedule.interval_minibatches == 30


@pytest.mark.parametrize("doc, needle", [
    ({"sedes": [1]}, "sedes"),
    ({"pruning": {"schedule": {"interval": 3}}}, "config.pruning.schedule"),
    ({"pretrain": {"method": "dro"}}, "method"),
    ({"pruning": {"criterion": "magnitude"}}, "criterion"),
    ({"seeds": []}, "seeds"),
    ({"held_out_domain": 7}, "held_out_domain"),
    ({"pretrain": []}, "expected a mapping"),
    ({"data": {"rhos": [0.1, 2.0, 0.3]}}, "rho"),
])
def test_schema_violations_are_named(doc, needle):
    with pytest.raises(ConfigError, match=needle):
        from_dict(ExperimentConfig, doc)


def test_arch_and_data_must_agree():
    with pytest.raises(ConfigError, match="n_classes"):
        from_dict(ExperimentConfig, {"arch": {"n_classes": 5}})


def test_unparsable_file(tmp_path):
    (tmp_path / "bad.yaml").write_text("seeds: [1, 2\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(tmp_path / "bad.yaml")


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "empty.yaml").write_text("")
    assert load_config(tmp_path / "empty.yaml") == ExperimentConfig()


def test_pretrain_validation():
    with pytest.raises(ConfigError):
        PretrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        PretrainConfig(mixup_alpha=0.0)
