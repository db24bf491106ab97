"""
Tests for configuration, error mapping and helper utilities
"""

import logging

import pytest

from app.utils.config import Settings, load_config_file, merge_overrides, validate_settings
from app.utils.errors import (
    EmptyCorpus,
    ParseError,
    ToolkitError,
    UsageError,
    ValidationError,
    exit_code_for,
    handle_service_error,
)
from app.utils.helpers import format_duration, is_nfc, nfc, parallel_map
from app.utils.logger import LogExecution


class TestExitCodes:
    """Exception to exit code mapping"""

    def test_mapping(self):
        assert exit_code_for(UsageError("bad flag")) == 1
        assert exit_code_for(EmptyCorpus()) == 2
        assert exit_code_for(ParseError("oops", line=3)) == 2
        assert exit_code_for(ToolkitError("x", error_code="INTERNAL_ERROR")) == 3
        assert exit_code_for(RuntimeError("x")) == 3

    def test_parse_error_carries_line(self):
        error = ParseError("unterminated string", line=12, source="a.TextGrid")
        assert error.line == 12
        assert error.message == "a.TextGrid: unterminated string (line 12)"

    def test_handle_service_error_wraps_unexpected(self):
        @handle_service_error
        def stage():
            raise KeyError("k")

        with pytest.raises(ToolkitError) as exc:
            stage()
        assert exc.value.error_code == "INTERNAL_ERROR"
        assert exit_code_for(exc.value) == 3

    def test_handle_service_error_keeps_toolkit_errors(self):
        @handle_service_error
        def stage():
            raise EmptyCorpus("manifest")

        with pytest.raises(EmptyCorpus):
            stage()


class TestConfig:
    """Settings and flat TOML config files"""

    def test_validate_settings(self):
        validate_settings(Settings())
        with pytest.raises(ValidationError):
            validate_settings(Settings(IPA_ASR_JOBS=0))
        with pytest.raises(ValidationError):
            validate_settings(Settings(LOG_LEVEL="chatty"))

    def test_load_flat_file(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text('beam = 20\nalpha = 0.5\nmanifest = "m.jsonl"\n', encoding="utf-8")
        assert load_config_file(str(path)) == {"beam": 20, "alpha": 0.5, "manifest": "m.jsonl"}
        assert load_config_file(None) == {}

    def test_nested_tables_rejected(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("[decode]\nbeam = 20\n", encoding="utf-8")
        with pytest.raises(ParseError):
            load_config_file(str(path))

    def test_missing_and_invalid_files(self, tmp_path):
        with pytest.raises(ParseError):
            load_config_file(str(tmp_path / "absent.toml"))
        bad = tmp_path / "bad.toml"
        bad.write_text("beam = = 3\n", encoding="utf-8")
        with pytest.raises(ParseError):
            load_config_file(str(bad))

    def test_flags_override_file_values(self):
        merged = merge_overrides({"beam": 20, "alpha": 0.5}, {"beam": 5, "alpha": None, "beta": 1.0})
        assert merged == {"beam": 5, "alpha": 0.5, "beta": 1.0}


class TestHelpers:
    """Helper utilities"""

    def test_nfc(self):
        decomposed = "e\u0301"
        assert not is_nfc(decomposed)
        assert nfc(decomposed) == "\u00e9"
        assert is_nfc(nfc(decomposed))

    def test_parallel_map_keeps_order(self):
        items = [-3, 1, -4, 1, -5, 9, -2, 6]
        assert parallel_map(abs, items, jobs=1) == [3, 1, 4, 1, 5, 9, 2, 6]
        assert parallel_map(abs, items, jobs=2) == [3, 1, 4, 1, 5, 9, 2, 6]

    def test_format_duration(self):
        assert format_duration(12.34) == "12.3s"
        assert format_duration(90) == "1.5m"
        assert format_duration(5400) == "1.5h"
        assert format_duration(172800) == "2.0d"

    def test_log_execution(self, caplog):
        logger = logging.getLogger("stage")
        with caplog.at_level(logging.INFO, logger="stage"):
            with LogExecution(logger, "ingest"):
                pass
            with pytest.raises(ValueError):
                with LogExecution(logger, "decode"):
                    raise ValueError("broken")
        messages = [r.getMessage() for r in caplog.records]
        assert messages[0] == "Starting ingest"
        assert messages[1].startswith("Completed ingest in ")
        assert messages[3].startswith("Failed decode after ")
