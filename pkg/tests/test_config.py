from pathlib import Path

import pytest

from bevkd.config import ConfigError, ExperimentConfig, PartitionSpec, dump_config, load_config


def test_defaults_validate():
    cfg = ExperimentConfig().validate()
    assert cfg.partition.total == cfg.student_channels


def test_yaml_round_trip(tmp_path):
    cfg = ExperimentConfig().replace(**{"world.k_pts": 123.0, "switches.use_partition": True, "seed": 4})
    dump_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg and back.digest() == cfg.digest()


def test_partial_file_keeps_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("student:\n  epochs: 3\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.student.epochs == 3 and cfg.teacher.epochs == ExperimentConfig().teacher.epochs


def test_unknown_key_names_field_and_line(tmp_path):
    (tmp_path / "c.yaml").write_text("seed: 1\nloss:\n  lidar_feat: 1.0\n  lambda9: 2\n")
    with pytest.raises(ConfigError) as exc:
        load_config(tmp_path / "c.yaml")
    assert exc.value.field == "loss.lambda9" and exc.value.line == 4


def test_wrong_type(tmp_path):
    (tmp_path / "c.yaml").write_text("teacher:\n  epochs: many\n")
    with pytest.raises(ConfigError, match="teacher.epochs"):
        load_config(tmp_path / "c.yaml")


def test_yaml_syntax_error_reports_line(tmp_path):
    (tmp_path / "c.yaml").write_text("seed: 1\nworld: [1, 2\n")
    with pytest.raises(ConfigError) as exc:
        load_config(tmp_path / "c.yaml")
    assert exc.value.line is not None


@pytest.mark.parametrize("key,value,field", [
    ("loss.lidar_feat", -1.0, "loss.lidar_feat"),
    ("grid.tau", 1.5, "grid.tau"),
    ("switches.label_encoder_variant", "magic", "switches.label_encoder_variant"),
    ("model.adapter_layers", 5, "model.adapter_layers"),
    ("world.extent", 0.0, "world.extent"),
])
def test_invalid_values(key, value, field):
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig().replace(**{key: value}).validate()
    assert exc.value.field == field


def test_empty_lidar_group_with_lidar_distillation_is_rejected():
    cfg = ExperimentConfig().replace(**{"partition.lidar": 0, "switches.use_partition": True,
                                        "switches.use_lidar_distill": True})
    with pytest.raises(ConfigError, match="partition.lidar"):
        cfg.validate()


def test_partition_ratios():
    p = PartitionSpec.from_ratio(1, 3, 2, total=24)
    assert (p.lidar, p.label, p.image) == (4, 12, 8)
    assert p.ranges == {"image": (0, 8), "lidar": (8, 12), "label": (12, 24)}
    with pytest.raises(ConfigError):
        PartitionSpec.from_ratio(1, 1, 1, total=10)


def test_digest_tracks_content():
    a = ExperimentConfig()
    assert a.digest() == ExperimentConfig().digest()
    assert a.digest() != a.replace(seed=1).digest()


@pytest.mark.parametrize("name", ["default.yaml", "smoke.yaml"])
def test_shipped_configs_load(name):
    path = Path(__file__).resolve().parents[1] / "configs" / name
    cfg = load_config(path)
    if name == "default.yaml":
        assert cfg == ExperimentConfig()
