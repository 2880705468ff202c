import logging

import pytest

from surrogate_cv.config import default_configuration, load_configuration, merge_config, setup_logging
from surrogate_cv.errors import ConfigError


def test_defaults_are_shipped():
    config = default_configuration()
    assert config["estimation"]["delta"] == 0.1
    assert config["mcf"]["hidden_layers"] == [32, 32]
    assert config["columns"]["g_prefix"] == "G_"


def test_user_file_merged_over_defaults(write_text):
    path = write_text("override.yaml", "mcf:\n  max_epochs: 10\nestimation:\n  delta: 0.05\n")
    config = load_configuration(path, configure_logging=False)
    assert config["mcf"]["max_epochs"] == 10
    assert config["mcf"]["early_stop_patience"] == 50
    assert config["estimation"]["delta"] == 0.05


def test_merge_does_not_mutate_inputs():
    base = {"a": {"b": 1, "c": 2}}
    merged = merge_config(base, {"a": {"b": 5}})
    assert merged == {"a": {"b": 5, "c": 2}}
    assert base == {"a": {"b": 1, "c": 2}}


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_configuration(str(tmp_path / "absent.yaml"), configure_logging=False)


def test_invalid_yaml(write_text):
    with pytest.raises(ConfigError, match="Invalid YAML"):
        load_configuration(write_text("bad.yaml", "mcf: [unclosed\n"), configure_logging=False)


def test_top_level_must_be_mapping(write_text):
    with pytest.raises(ConfigError, match="mapping"):
        load_configuration(write_text("list.yaml", "- 1\n- 2\n"), configure_logging=False)


def test_logging_level_applied():
    setup_logging({"logging": {"level": "debug"}})
    assert logging.getLogger().level == logging.DEBUG
    setup_logging({"logging": {"level": "INFO"}})


def test_unknown_logging_level():
    with pytest.raises(ConfigError, match="VERBOSE"):
        setup_logging({"logging": {"level": "verbose"}})
