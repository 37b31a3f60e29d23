from __future__ import annotations

from pathlib import Path

import pytest

from box6d.config import Settings, load_config, parse_config_text, with_overrides
from box6d.exceptions import ConfigFormatError, ConfigValueError, DatasetIOError
from box6d.schemas import PipelineConfig


def test_defaults_without_a_file() -> None:
    config = load_config(None)

    assert config == PipelineConfig()
    assert config.dimsearch.tau_px == 10.0
    assert config.dimsearch.early_stop_enabled is True


def test_config_file_overrides_nested_fields(tmp_path: Path) -> None:
    path = tmp_path / "box6d.conf"
    path.write_text(
        "# search\n"
        "dimsearch.tau_px = 4\n"
        "\n"
        "scenegen.dims_min = 0.1, 0.2, 0.3   # meters\n"
        "scenegen.camera.width = 320\n"
        "scenegen.background_depth = none\n",
        encoding="utf-8",
    )

    config = load_config(path)

    assert config.dimsearch.tau_px == 4.0
    assert config.scenegen.dims_min == (0.1, 0.2, 0.3)
    assert config.scenegen.camera.width == 320
    assert config.scenegen.background_depth is None


def test_every_malformed_line_is_reported() -> None:
    text = "garbage\ndimsearch.tau_px = 3\ntau_px = 3\n\ndimsearch.nope = 1\ndimsearch.tau_px = 5\n"

    with pytest.raises(ConfigFormatError) as exc_info:
        parse_config_text(text)

    errors = exc_info.value.errors
    assert [e.line_number for e in errors] == [1, 3, 5, 6]
    assert "unknown key 'dimsearch.nope'" in errors[2].message
    assert "duplicate" in errors[3].message


def test_out_of_range_value_names_the_field(tmp_path: Path) -> None:
    path = tmp_path / "box6d.conf"
    path.write_text("dimsearch.t_max = 0\n", encoding="utf-8")

    with pytest.raises(ConfigValueError) as exc_info:
        load_config(path)

    assert exc_info.value.field == "dimsearch.t_max"


def test_inverted_scale_bounds_are_rejected() -> None:
    with pytest.raises(ConfigValueError):
        with_overrides(
            PipelineConfig(), {"dimsearch.bounds_lo": (2.0, 2.0, 2.0), "dimsearch.bounds_hi": (1.0, 1.0, 1.0)}
        )


def test_missing_config_file(tmp_path: Path) -> None:
    with pytest.raises(DatasetIOError):
        load_config(tmp_path / "absent.conf")


def test_overrides_return_a_new_config() -> None:
    base = PipelineConfig()

    updated = with_overrides(base, {"depthfilter.enabled": False, "dimsearch.tau_px": 2.5})

    assert updated.depthfilter.enabled is False
    assert updated.dimsearch.tau_px == 2.5
    assert base.depthfilter.enabled is True


def test_unknown_override_key() -> None:
    with pytest.raises(ConfigValueError) as exc_info:
        with_overrides(PipelineConfig(), {"dimsearch.tau": 1.0})

    assert exc_info.value.field == "dimsearch.tau"


def test_settings_read_the_environment(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("BOX6D_JOBS", "3")
    monkeypatch.setenv("BOX6D_LOG_LEVEL", "DEBUG")

    settings = Settings()

    assert settings.jobs == 3
    assert settings.log_level == "DEBUG"
    assert settings.results_filename == "results.csv"
