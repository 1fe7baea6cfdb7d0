import dataclasses

import pytest

from protoseg.config import (
    ConfigError,
    EncoderConfig,
    ExperimentSpec,
    InferenceConfig,
    LowRankAdapterSpec,
    PrototypeConfig,
    RunConfig,
    TrainConfig,
    config_digest,
    config_from_dict,
    config_to_dict,
    encoder_from_dict,
    load_config,
    save_config,
)


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.prototype.window == (4, 4)
    assert cfg.prototype.coverage_threshold == 0.95
    assert cfg.inference.sections == 3
    assert cfg.inference.connectivity == 8
    assert cfg.train.optimizer.kind == "sgd"
    assert cfg.train.reg_weight == 1.0
    assert cfg.ttt.iterations == 100


def test_yaml_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.experiment.organ_groups = {"lower": [1, 4], "upper": [2, 3]}
    cfg.encoder.feature_upsample = (64, 64)
    path = save_config(cfg, tmp_path / "cfg.yaml")
    back = load_config(path)
    assert config_to_dict(back) == config_to_dict(cfg)
    assert config_digest(back) == config_digest(cfg)


def test_digest_sensitive_to_changes():
    a = RunConfig()
    b = RunConfig()
    b.train.episodes = a.train.episodes + 1
    assert config_digest(a) != config_digest(b)
    assert len(config_digest(a)) == 12


def test_yaml_lists_become_tuples(tmp_path):
    (tmp_path / "c.yaml").write_text(
        "prototype:\n  window: [2, 2]\nencoder:\n  train_resolution: [48, 48]\n"
    )
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.prototype.window == (2, 2)
    assert cfg.encoder.train_resolution == (48, 48)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown RunConfig keys"):
        config_from_dict({"not_a_field": 1})
    with pytest.raises(ConfigError, match="unknown TrainConfig keys"):
        config_from_dict({"train": {"episodes": 5, "optimiser": {}}})


def test_unknown_backbone():
    with pytest.raises(ConfigError, match="unknown backbone"):
        EncoderConfig(backbone="resnet50").validate()


def test_unknown_input_mode():
    with pytest.raises(ConfigError, match="unknown input_mode"):
        EncoderConfig(input_mode="stack_5slice").validate()


def test_lora_requires_vit():
    cfg = EncoderConfig(backbone="dilated_cnn", lora=LowRankAdapterSpec())
    with pytest.raises(ConfigError, match="foundation_vit_large"):
        cfg.validate()


def test_lora_target_names():
    with pytest.raises(ConfigError, match="unknown lora targets"):
        LowRankAdapterSpec(target_blocks=("q", "z")).validate()
    LowRankAdapterSpec(target_blocks=("q", "k", "v", "o")).validate()


def test_window_positive():
    with pytest.raises(ConfigError):
        PrototypeConfig(window=(0, 4)).validate()


def test_coverage_threshold_range():
    with pytest.raises(ConfigError):
        PrototypeConfig(coverage_threshold=1.5).validate()


def test_connectivity_values():
    with pytest.raises(ConfigError):
        InferenceConfig(connectivity=6).validate()
    InferenceConfig(connectivity=4).validate()


def test_sections_positive():
    with pytest.raises(ConfigError):
        InferenceConfig(sections=0).validate()


def test_organ_groups_disjoint():
    spec = ExperimentSpec(organ_groups={"a": [1, 2], "b": [2, 3]})
    with pytest.raises(ConfigError, match="overlap"):
        spec.validate()


def test_unknown_variant():
    spec = ExperimentSpec(variants=("base", "oracle"))
    with pytest.raises(ConfigError, match="unknown variant"):
        spec.validate()


def test_episodes_positive():
    with pytest.raises(ConfigError):
        TrainConfig(episodes=0).validate()


def test_encoder_from_dict_round_trip():
    cfg = EncoderConfig(feature_upsample=(24, 24))
    back = encoder_from_dict(config_to_dict(cfg))
    assert back == cfg


def test_replace_keeps_validation():
    spec = dataclasses.replace(ExperimentSpec(), variants=("ttt",))
    spec.validate()
