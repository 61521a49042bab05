import pytest
from pydantic import ValidationError

from matching.config import Settings


def test_defaults(monkeypatch):
    monkeypatch.delenv("DISPATCH_BLOCK_SIZE", raising=False)
    settings = Settings.from_env()
    assert settings.block_size == 1024
    assert settings.exact_dp_max_n == 20
    assert settings.max_scaled_supply == 10**8


def test_environment_overrides(monkeypatch):
    monkeypatch.setenv("DISPATCH_BLOCK_SIZE", "64")
    monkeypatch.setenv("DISPATCH_LOG_LEVEL", "DEBUG")
    settings = Settings.from_env()
    assert settings.block_size == 64
    assert settings.log_level == "DEBUG"


def test_bad_override_is_rejected(monkeypatch):
    monkeypatch.setenv("DISPATCH_EXACT_DP_MAX_N", "many")
    with pytest.raises(ValidationError):
        Settings.from_env()


def test_settings_are_frozen():
    settings = Settings()
    with pytest.raises(ValidationError):
        settings.block_size = 1
