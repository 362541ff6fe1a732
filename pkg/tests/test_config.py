"""Tests for experiment config files and setting precedence."""

import pytest

from src.config import load_config_file, merge_settings, parse_list
from src.exceptions import ConfigError


def test_load_config_file_parses_typed_values(tmp_path):
    """Test that list, int, float and string keys are parsed."""
    path = tmp_path / "study.env"
    path.write_text("sites=10,30\nsigma2=2.5, 5\nreplications=20\nmu1=7\nestimators=pooled,distributed\nout=runs\n")

    values = load_config_file(str(path))

    assert values == {
        "sites": [10, 30],
        "sigma2": [2.5, 5.0],
        "replications": 20,
        "mu1": 7.0,
        "estimators": ["pooled", "distributed"],
        "out": "runs",
    }


def test_no_config_file_gives_no_values():
    """Test that omitting the file yields an empty mapping."""
    assert load_config_file(None) == {}


def test_unknown_key_is_rejected(tmp_path):
    """Test that a typo in a key names the key and the file."""
    path = tmp_path / "bad.env"
    path.write_text("replicatons=20\n")

    with pytest.raises(ConfigError) as excinfo:
        load_config_file(str(path))

    assert excinfo.value.context["key"] == "replicatons"
    assert excinfo.value.context["path"] == str(path)


def test_bad_value_and_missing_file(tmp_path):
    """Test that unparsable values and missing files raise config errors."""
    path = tmp_path / "bad.env"
    path.write_text("replications=many\n")

    with pytest.raises(ConfigError):
        load_config_file(str(path))
    with pytest.raises(ConfigError):
        load_config_file(str(tmp_path / "missing.env"))


def test_overrides_win_unless_none():
    """Test that CLI values replace file values and None keeps them."""
    merged = merge_settings({"seed": 1, "sites": [10]}, {"seed": 7, "sites": None, "out": "x"})

    assert merged == {"seed": 7, "sites": [10], "out": "x"}


def test_parse_list():
    """Test comma separated CLI values."""
    assert parse_list("10, 30,", int) == [10, 30]
    assert parse_list(None, float) is None
