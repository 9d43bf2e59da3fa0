from __future__ import annotations

import logging

from dtn.log import parse_filter
from dtn.log import setup_logging


def test_parse_filter_bare_level():
    assert parse_filter("debug") == {"dtn": logging.DEBUG}


def test_parse_filter_module_directives():
    assert parse_filter("warning, dtn.training=debug,,dtn.mpo=nonsense") == {
        "dtn": logging.WARNING,
        "dtn.training": logging.DEBUG,
    }


def test_verbosity_levels(monkeypatch):
    monkeypatch.delenv("DTN_LOG", raising=False)
    setup_logging(-3)
    assert logging.getLogger("dtn").level == logging.WARNING
    setup_logging(0)
    assert logging.getLogger("dtn").level == logging.INFO
    setup_logging(2)
    assert logging.getLogger("dtn").level == logging.DEBUG
    assert len(logging.getLogger("dtn").handlers) == 1


def test_environment_wins_over_verbosity(monkeypatch):
    monkeypatch.setenv("DTN_LOG", "error,dtn.bench=debug")
    setup_logging(1)
    assert logging.getLogger("dtn").level == logging.ERROR
    assert logging.getLogger("dtn.bench").level == logging.DEBUG
    logging.getLogger("dtn.bench").setLevel(logging.NOTSET)


def test_log_file_receives_records(tmp_path, monkeypatch):
    monkeypatch.delenv("DTN_LOG", raising=False)
    path = tmp_path / "logs" / "run.log"
    setup_logging(0, path)
    logging.getLogger("dtn.test").info("hello %d", 42)
    for handler in logging.getLogger("dtn").handlers:
        handler.flush()
    assert "dtn.test: hello 42" in path.read_text(encoding="utf-8")
