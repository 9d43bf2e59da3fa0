from __future__ import annotations

import logging
import os
from pathlib import Path

LOG_ENV = "DTN_LOG"
LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"
DATE_FORMAT = "%H:%M:%S"

_VERBOSITY_LEVELS = {
    -1: logging.WARNING,
    0: logging.INFO,
    1: logging.DEBUG,
}


def setup_logging(verbosity: int = 0, log_file: Path | None = None) -> None:
    """Configure the `dtn` logger tree.

    `DTN_LOG` takes precedence over `verbosity`. It accepts a bare level
    (`debug`) or comma separated `module=level` directives, where a bare level
    applies to the whole package (`info,dtn.training=debug`).
    """
    root = logging.getLogger("dtn")
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    level = _VERBOSITY_LEVELS[max(-1, min(1, verbosity))]
    directives = parse_filter(os.environ.get(LOG_ENV, ""))
    root.setLevel(directives.pop("dtn", level))
    for name, module_level in directives.items():
        logging.getLogger(name).setLevel(module_level)

    formatter = logging.Formatter(LOG_FORMAT, DATE_FORMAT)
    stream = logging.StreamHandler()
    stream.setFormatter(formatter)
    root.addHandler(stream)

    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)

    root.propagate = False


def parse_filter(spec: str) -> dict[str, int]:
    directives: dict[str, int] = {}
    for raw in spec.split(","):
        raw = raw.strip()
        if not raw:
            continue
        if "=" in raw:
            name, _, level_name = raw.partition("=")
            name = name.strip()
        else:
            name, level_name = "dtn", raw
        level = logging.getLevelName(level_name.strip().upper())
        if not isinstance(level, int):
            continue
        directives[name] = level
    return directives
