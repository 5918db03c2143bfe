import pytest
import yaml

from utils.config import (
    DEFAULT_CONFIG_PATH,
    PipelineConfig,
    dump_yaml,
    fingerprint,
    get_value,
    load_config,
    to_dict,
    with_value,
)
from utils.errors import ConfigError


def test_defaults_file_matches_dataclass_defaults():
    assert load_config() == PipelineConfig()
    assert DEFAULT_CONFIG_PATH.exists()


def test_unknown_key_names_dotted_path(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("fuser:\n  head: 3\n")
    with pytest.raises(ConfigError, match=r"fuser\.head"):
        load_config(path)


def test_file_overrides_merge_per_section(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("fuser:\n  order: CR\ntrain:\n  epochs: 5\n")
    config = load_config(path)
    assert config.fuser.order == "CR" and config.fuser.heads == 2
    assert config.train.epochs == 5 and config.train.lr == pytest.approx(3e-3)


def test_missing_file_and_bad_yaml(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.yaml")
    broken = tmp_path / "broken.yaml"
    broken.write_text("grid: [unclosed\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(broken)


def test_type_errors_are_reported():
    with pytest.raises(ConfigError, match="train.epochs"):
        load_config(overrides={"train.epochs": "ten"})
    with pytest.raises(ConfigError, match="radar.augment"):
        load_config(overrides={"radar.augment": 1})


@pytest.mark.parametrize("key, value", [
    ("radar.frames", 2),
    ("fuser.kind", "transformer"),
    ("fuser.order", "XY"),
    ("lss.variant", "bevdepth"),
    ("eval.recall_points", 20),
    ("scenes.p_xray", 1.5),
    ("train.lr", 0.0),
    ("grid.cell_size", 0.3),
])
def test_invalid_values_are_rejected(key, value):
    with pytest.raises(ConfigError, match=key.split(".")[0]):
        load_config(overrides={key: value})


def test_pyramid_needs_divisible_grid():
    # 32 cells is not a multiple of lcm(1, 2, 3) = 6
    with pytest.raises(ConfigError, match="not divisible"):
        load_config(overrides={"fuser.scale_mode": "literal"})
    config = load_config(overrides={"fuser.scale_mode": "literal", "fuser.fp_layers": 2})
    assert config.fuser.fp_layers == 2


def test_with_value_and_get_value():
    config = with_value(PipelineConfig(), "scenes.counts", {"car": 2, "pedestrian": 0, "cyclist": 0})
    assert get_value(config, "scenes.counts")["car"] == 2
    assert get_value(PipelineConfig(), "scenes.counts")["car"] == 1
    with pytest.raises(ConfigError, match="unknown"):
        get_value(config, "fuser.depth")


def test_dump_yaml_reloads_to_the_same_config(tmp_path):
    config = load_config(overrides={"seed": 9, "fuser.merge": "concat"})
    path = tmp_path / "effective.yaml"
    path.write_text(dump_yaml(config))
    assert load_config(path) == config
    assert yaml.safe_load(dump_yaml(config)) == to_dict(config)


def test_fingerprint_is_stable_and_respects_exclusions():
    a = PipelineConfig()
    b = with_value(a, "seed", 5)
    assert fingerprint(a) == fingerprint(PipelineConfig())
    assert fingerprint(a) != fingerprint(b)
    assert fingerprint(a, exclude=("seed",)) == fingerprint(b, exclude=("seed",))
    assert len(fingerprint(a)) == 64
