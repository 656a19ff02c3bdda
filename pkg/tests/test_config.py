from pathlib import Path

import pytest

import config


def test_hub_path_precedence(monkeypatch):
    monkeypatch.delenv("DATAPALLET_HUB", raising=False)
    assert config.resolve_hub_path() == Path(config.DEFAULT_HUB_PATH)
    monkeypatch.setenv("DATAPALLET_HUB", "/srv/hub")
    assert config.resolve_hub_path() == Path("/srv/hub")
    assert config.resolve_hub_path("/flag/hub") == Path("/flag/hub")


@pytest.mark.parametrize("value, expected", [
    ("1", True), ("true", True), ("YES", True), (" on ", True),
    ("0", False), ("", False), ("nope", False),
])
def test_env_flag(monkeypatch, value, expected):
    monkeypatch.setenv("DATAPALLET_DETERMINISTIC", value)
    assert config.env_flag("DATAPALLET_DETERMINISTIC") is expected
    assert config.resolve_deterministic(None) is expected
    assert config.resolve_deterministic(False) is False
    assert config.resolve_deterministic(True) is True


def test_workdir(monkeypatch, tmp_path):
    monkeypatch.delenv("DATAPALLET_WORKDIR", raising=False)
    assert config.resolve_workdir().name == "datapallet-runs"
    monkeypatch.setenv("DATAPALLET_WORKDIR", str(tmp_path))
    assert config.resolve_workdir() == tmp_path
    assert config.resolve_workdir("/explicit") == Path("/explicit")


def test_bad_numbers_fall_back(monkeypatch):
    monkeypatch.setenv("DATAPALLET_LOCK_TIMEOUT", "soon")
    monkeypatch.setenv("DATAPALLET_BENCH_TRIALS", "many")
    assert config._env_float("DATAPALLET_LOCK_TIMEOUT", 30.0) == 30.0
    assert config._env_int("DATAPALLET_BENCH_TRIALS", 1000) == 1000
    monkeypatch.setenv("DATAPALLET_BENCH_TRIALS", "7")
    assert config._env_int("DATAPALLET_BENCH_TRIALS", 1000) == 7
