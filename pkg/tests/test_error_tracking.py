"""Tests for settings, error tracking and report rendering."""

import json
import logging

import numpy as np

from windowquant.config import Settings, settings
from windowquant.error_tracking import ErrorLogHandler, install_error_tracking, log_error
from windowquant.reporting import SCHEMA_VERSION, dumps_document, render_summary


class TestSettings:
    def test_defaults(self):
        assert settings.ALPHA == 2.0
        assert settings.WINDOW_SIZE == 32
        assert settings.TOKEN_CAP == 16384
        assert settings.SIMILARITY == "cosine"
        assert isinstance(Settings.SEED, int)


class TestLogError:
    def test_appends_json_lines(self, tmp_path):
        path = tmp_path / "errors.jsonl"
        log_error(path, "ERROR", "windowquant.cli", "first")
        log_error(path, "ERROR", "windowquant.cli", "x" * 5000, tb="trace", extra={"k": 1})
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert [e["message"][:5] for e in lines] == ["first", "xxxxx"]
        assert len(lines[1]["message"]) == 2000
        assert lines[1]["traceback"] == "trace"
        assert lines[1]["extra"] == {"k": 1}

    def test_unwritable_path_is_swallowed(self, tmp_path):
        log_error(tmp_path / "missing" / "errors.jsonl", "ERROR", "src", "msg")


class TestErrorLogHandler:
    def test_records_errors_only(self, tmp_path):
        path = tmp_path / "errors.jsonl"
        log = logging.getLogger("windowquant.tests.handler")
        handler = ErrorLogHandler(path)
        log.addHandler(handler)
        try:
            log.warning("not recorded")
            try:
                raise ValueError("boom")
            except ValueError:
                log.exception("Decode failed for layer %d", 3)
        finally:
            log.removeHandler(handler)
        (entry,) = [json.loads(line) for line in path.read_text().splitlines()]
        assert entry["message"] == "Decode failed for layer 3"
        assert "ValueError: boom" in entry["traceback"]
        assert entry["extra"]["funcName"] == "test_records_errors_only"

    def test_install_is_idempotent(self, tmp_path):
        package_logger = logging.getLogger("windowquant")
        path = tmp_path / "errors.jsonl"
        first = install_error_tracking(path)
        try:
            assert install_error_tracking(path) is first
            assert sum(isinstance(h, ErrorLogHandler) for h in package_logger.handlers) == 1
            logging.getLogger("windowquant.pipeline").error("cap exceeded")
            assert "cap exceeded" in path.read_text()
        finally:
            package_logger.removeHandler(first)

    def test_not_installed_without_path(self):
        assert install_error_tracking() is None


class TestReporting:
    def test_documents_are_sorted_json(self):
        text = dumps_document({"b": np.float64(1.5), "a": np.int64(2), "c": np.arange(2)})
        assert list(json.loads(text)) == ["a", "b", "c"]
        assert json.loads(text)["c"] == [0, 1]
        assert SCHEMA_VERSION == 1

    def test_bench_summary(self):
        row = {
            "frames": 8, "batch": 1, "window_size": 4, "bytes_total": 100, "bytes_saved": 20,
            "average_bit_width": 3.5, "decode_tokens_per_sec": 120.0,
        }
        out = render_summary("bench", {"rows": [row]})
        assert out.splitlines()[0].startswith("frames")
        assert "3.500" in out
