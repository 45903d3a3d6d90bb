"""CSV-based tracking database for pipeline stages.

Each stage run is keyed by a hash of its inputs and its configuration, so a
completed stage is skipped when it is run again on the same inputs.
"""
import csv
import hashlib
import logging
from datetime import datetime
from pathlib import Path
from typing import Iterable, Optional, Union

logger = logging.getLogger(__name__)

CSV_HEADERS = [
    "stage_key",
    "stage",
    "inputs_hash",
    "config_hash",
    "output_path",
    "started_at",
    "completed_at",
    "status",
    "error_message",
    "failure_count",
]


def hash_inputs(paths: Iterable[Union[str, Path]]) -> str:
    """SHA-256 over the relative names and bytes of files (directories recursed)."""
    digest = hashlib.sha256()
    for root in sorted(Path(p) for p in paths):
        files = sorted(f for f in root.rglob("*") if f.is_file()) if root.is_dir() else [root]
        for file_path in files:
            name = file_path.relative_to(root).as_posix() if root.is_dir() else file_path.name
            digest.update(name.encode("utf-8"))
            digest.update(file_path.read_bytes())
    return digest.hexdigest()


def hash_text(lines: Iterable[str]) -> str:
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def stage_key(stage: str, inputs_hash: str, config_hash: str) -> str:
    return hashlib.sha256(f"{stage}|{inputs_hash}|{config_hash}".encode("utf-8")).hexdigest()[:16]


class StageTracker:
    """Manages the CSV record of stage runs in a run directory."""

    def __init__(self, csv_path: Union[str, Path]):
        self.csv_path = Path(csv_path)
        self._ensure_csv_exists()

    def _ensure_csv_exists(self) -> None:
        """Create CSV file with headers if it doesn't exist."""
        if not self.csv_path.exists():
            self.csv_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.csv_path, "w", newline="", encoding="utf-8") as f:
                writer = csv.DictWriter(f, fieldnames=CSV_HEADERS)
                writer.writeheader()
            logger.debug(f"Created stage tracker: {self.csv_path}")

    def _read_all_records(self) -> list[dict]:
        if not self.csv_path.exists():
            return []
        with open(self.csv_path, "r", encoding="utf-8") as f:
            return list(csv.DictReader(f))

    def _write_all_records(self, records: list[dict]) -> None:
        with open(self.csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_HEADERS)
            writer.writeheader()
            writer.writerows(records)

    def get_record(self, key: str) -> Optional[dict]:
        for record in self._read_all_records():
            if record["stage_key"] == key:
                return record
        return None

    def is_completed(self, key: str) -> bool:
        """True if the stage completed and its output still exists."""
        record = self.get_record(key)
        if record is None or record.get("status") != "completed":
            return False
        output = record.get("output_path", "")
        return bool(output) and Path(output).exists()

    def record_start(self, key: str, stage: str, inputs_hash: str, config_hash: str,
                     output_path: Union[str, Path]) -> None:
        records = self._read_all_records()
        # Another stage writing to the same place invalidates earlier completions there.
        for other in records:
            if other["stage_key"] != key and other["output_path"] == str(output_path) \
                    and other["status"] == "completed":
                other["status"] = "superseded"
        record = next((r for r in records if r["stage_key"] == key), None)
        if record is None:
            record = {header: "" for header in CSV_HEADERS}
            record["stage_key"] = key
            record["failure_count"] = "0"
            records.append(record)
        record.update({
            "stage": stage,
            "inputs_hash": inputs_hash,
            "config_hash": config_hash,
            "output_path": str(output_path),
            "started_at": datetime.now().isoformat(),
            "completed_at": "",
            "status": "running",
        })
        self._write_all_records(records)
        logger.debug(f"Recorded start of {stage} ({key})")

    def record_completion(self, key: str) -> bool:
        """
        Record a successful stage run.

        Returns:
            True if there were previous failures that were resolved, False otherwise
        """
        records = self._read_all_records()
        for record in records:
            if record["stage_key"] == key:
                had_failures = int(record.get("failure_count") or 0) > 0
                record["completed_at"] = datetime.now().isoformat()
                record["status"] = "completed"
                record["error_message"] = ""
                record["failure_count"] = "0"
                self._write_all_records(records)
                logger.debug(f"Recorded completion: {key}")
                return had_failures
        logger.warning(f"Attempted to record completion for unknown stage key: {key}")
        return False

    def record_error(self, key: str, error_message: str, status: str = "failed") -> int:
        """
        Record an error and increment failure count.

        Returns:
            The failure count after this error.
        """
        records = self._read_all_records()
        record = next((r for r in records if r["stage_key"] == key), None)
        if record is None:
            record = {header: "" for header in CSV_HEADERS}
            record["stage_key"] = key
            records.append(record)
        try:
            failure_count = int(record.get("failure_count") or 0)
        except ValueError:
            failure_count = 0
        failure_count += 1
        record["status"] = status
        record["error_message"] = str(error_message)
        record["failure_count"] = str(failure_count)
        self._write_all_records(records)
        logger.debug(f"Recorded error for {key} (failure {failure_count}): {error_message}")
        return failure_count

    def get_records_for_retry(self) -> list[dict]:
        """Stages that failed or were interrupted while running."""
        return [r for r in self._read_all_records() if r.get("status") in ("failed", "running")]

    def get_all_records(self) -> list[dict]:
        return self._read_all_records()
