"""
Result persistence for flow runs.

Each run directory holds trace.csv, manifest.json, summary.txt and
events.jsonl. A sweep directory also holds index.json with one entry per
amplitude.
"""
import csv
import json
import logging
import math
import os
import time
from datetime import datetime, timezone
from typing import Any, Dict, List, Mapping, Optional

from app.services.flow import FlowTrace

logger = logging.getLogger(__name__)

TRACE_FILE = "trace.csv"
MANIFEST_FILE = "manifest.json"
SUMMARY_FILE = "summary.txt"
EVENTS_FILE = "events.jsonl"
INDEX_FILE = "index.json"


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def format_float(value: float) -> str:
    """repr-exact float text, so identical runs give identical bytes."""
    if isinstance(value, float) and math.isnan(value):
        return "nan"
    return "%.17g" % value


def write_trace_csv(directory: str, trace: FlowTrace) -> str:
    """Write one row per sample in the fixed column order. Returns the file path."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, TRACE_FILE)
    columns = trace.columns
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for record in trace.records:
            row = record.to_row()
            writer.writerow([format_float(row[name]) for name in columns])
    logger.debug(f"[STORE] wrote {len(trace.records)} rows to {path}")
    return path


def read_trace_csv(path: str) -> List[Dict[str, float]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [{key: float(value) for key, value in row.items()} for row in csv.DictReader(f)]


def write_json(path: str, payload: Any) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False)


def write_manifest(directory: str, manifest: Dict[str, Any]) -> str:
    path = os.path.join(directory, MANIFEST_FILE)
    write_json(path, manifest)
    return path


def read_manifest(directory: str) -> Dict[str, Any]:
    with open(os.path.join(directory, MANIFEST_FILE), "r", encoding="utf-8") as f:
        return json.load(f)


def write_summary(directory: str, lines: List[str]) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, SUMMARY_FILE)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return path


class EventLog:
    """Append-only stage log, one JSON object per line."""

    def __init__(self, directory: str, seed: int):
        os.makedirs(directory, exist_ok=True)
        self.path = os.path.join(directory, EVENTS_FILE)
        self._seed = seed
        self._start_ns = time.time_ns()
        self.records: List[Dict[str, Any]] = []
        # a rerun into the same directory starts a fresh log
        open(self.path, "w", encoding="utf-8").close()

    def begin(self, stage: str) -> None:
        self._append(stage, "begin")

    def end(self, stage: str, extra: Optional[Mapping[str, Any]] = None) -> None:
        self._append(stage, "end", extra)

    def fail(self, stage: str, extra: Optional[Mapping[str, Any]] = None) -> None:
        self._append(stage, "fail", extra)

    def _append(self, stage: str, status: str, extra: Optional[Mapping[str, Any]] = None) -> None:
        record = {
            "ts_utc": utc_now(),
            "stage": stage,
            "status": status,
            "seed": self._seed,
            "elapsed_ns": time.time_ns() - self._start_ns,
        }
        if extra:
            record.update(extra)
        self.records.append(record)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_index(directory: str) -> List[Dict]:
    """
    Read the sweep index of a directory.

    Returns:
        List of run entries, empty if the index is missing or unreadable
    """
    path = os.path.join(directory, INDEX_FILE)
    if not os.path.exists(path):
        return []

    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        logger.error(f"[ERROR] Failed to parse {path}: {e}")
        return []

    if not isinstance(data, list):
        logger.warning(f"[WARN] Index {path} is not a list, starting a new one")
        return []
    return data


def write_index(directory: str, entries: List[Dict]) -> bool:
    """
    Write the sweep index in one go, sorted by amplitude.

    Args:
        directory: Sweep root
        entries: One dictionary per run with at least ``run`` and ``amplitude``;
            a later entry replaces an earlier one with the same run name
    """
    if any("run" not in entry for entry in entries):
        logger.error("[ERROR] Index entry needs a 'run' name")
        return False

    by_run = {entry["run"]: entry for entry in entries}
    ordered = sorted(by_run.values(), key=lambda item: item.get("amplitude", 0.0))
    try:
        write_json(os.path.join(directory, INDEX_FILE), ordered)
        return True
    except OSError as e:
        logger.error(f"[ERROR] Failed to write sweep index: {e}")
        return False
