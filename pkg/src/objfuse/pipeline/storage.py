"""Report persistence: atomic JSON writes and report discovery."""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, List, Union

from pydantic import ValidationError

from .config import RunReport

logger = logging.getLogger(__name__)

AGGREGATE_FILES = {"aggregate.json"}


def write_json_atomic(path: Union[str, Path], payload: Any) -> Path:
    """Write JSON through a temp file in the same directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".json.tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        os.replace(tmp_name, path)
    except Exception:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path


def write_report(report: RunReport, path: Union[str, Path]) -> Path:
    return write_json_atomic(path, report.model_dump(mode="json"))


def load_report(path: Union[str, Path]) -> RunReport:
    with open(path, "r", encoding="utf-8") as f:
        return RunReport.model_validate(json.load(f))


def load_reports(runs_dir: Union[str, Path]) -> List[RunReport]:
    """Every run report under a directory, in path order; unreadable files are skipped."""
    runs_dir = Path(runs_dir)
    if not runs_dir.is_dir():
        raise FileNotFoundError(f"Runs directory not found: {runs_dir}")
    reports = []
    for path in sorted(runs_dir.rglob("*.json")):
        if path.name in AGGREGATE_FILES:
            continue
        try:
            reports.append(load_report(path))
        except (json.JSONDecodeError, ValidationError) as e:
            logger.warning(f"Skipping {path}: not a run report ({e.__class__.__name__})")
    logger.info(f"Loaded {len(reports)} run reports from {runs_dir}")
    return reports
