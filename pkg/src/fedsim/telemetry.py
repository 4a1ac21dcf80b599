"""Structured experiment records and line-oriented sinks.

Canonical format is JSON Lines: one object per record with a ``kind``
discriminator.  A CSV sink (one file per record kind, RFC-4180 quoting) is
provided for spreadsheet use.  Sinks are safe for concurrent appends: each
record is written as a single line under a lock, so lines never tear.
"""

from __future__ import annotations

import csv
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable


class TelemetryError(ValueError):
    """Malformed record or sink misuse."""


@dataclass(frozen=True)
class RoundReport:
    """Global-model metrics for one federation round."""

    round_index: int
    sampled_ids: tuple[int, ...]
    global_loss: float
    global_accuracy: float
    wall_time_ms: int
    aggregator_kind: str = ""


@dataclass(frozen=True)
class AgentRecord:
    """One local-training epoch of one sampled agent."""

    round_index: int
    agent_id: int
    local_epoch: int
    train_loss: float
    train_accuracy: float
    shard_size: int


@dataclass(frozen=True)
class ProfileEntry:
    """One row of a profiler report."""

    action: str
    mean_duration_s: float
    num_calls: int
    total_s: float
    percentage: float


@dataclass(frozen=True)
class RssSample:
    """Process resident-set size observed at the end of a round."""

    round_index: int
    rss_bytes: int


Record = RoundReport | AgentRecord | ProfileEntry | RssSample


def record_to_dict(record: Record) -> dict:
    if isinstance(record, RoundReport):
        return {
            "kind": "round",
            "t": record.round_index,
            "sampled": [int(i) for i in record.sampled_ids],
            "loss": record.global_loss,
            "acc": record.global_accuracy,
            "wall_ms": record.wall_time_ms,
            "agg": record.aggregator_kind,
        }
    if isinstance(record, AgentRecord):
        return {
            "kind": "agent",
            "t": record.round_index,
            "agent": record.agent_id,
            "epoch": record.local_epoch,
            "loss": record.train_loss,
            "acc": record.train_accuracy,
            "shard": record.shard_size,
        }
    if isinstance(record, ProfileEntry):
        return {
            "kind": "profile",
            "action": record.action,
            "mean_s": record.mean_duration_s,
            "calls": record.num_calls,
            "total_s": record.total_s,
            "pct": record.percentage,
        }
    if isinstance(record, RssSample):
        return {"kind": "rss", "t": record.round_index, "rss_bytes": record.rss_bytes}
    raise TelemetryError(f"not a telemetry record: {record!r}")


def record_from_dict(obj: dict) -> Record:
    kind = obj.get("kind")
    try:
        if kind == "round":
            return RoundReport(
                round_index=obj["t"],
                sampled_ids=tuple(obj["sampled"]),
                global_loss=obj["loss"],
                global_accuracy=obj["acc"],
                wall_time_ms=obj["wall_ms"],
                aggregator_kind=obj.get("agg", ""),
            )
        if kind == "agent":
            return AgentRecord(
                round_index=obj["t"],
                agent_id=obj["agent"],
                local_epoch=obj["epoch"],
                train_loss=obj["loss"],
                train_accuracy=obj["acc"],
                shard_size=obj["shard"],
            )
        if kind == "profile":
            return ProfileEntry(
                action=obj["action"],
                mean_duration_s=obj["mean_s"],
                num_calls=obj["calls"],
                total_s=obj["total_s"],
                percentage=obj["pct"],
            )
        if kind == "rss":
            return RssSample(round_index=obj["t"], rss_bytes=obj["rss_bytes"])
    except KeyError as exc:
        raise TelemetryError(f"record of kind {kind!r} missing field {exc}") from None
    raise TelemetryError(f"unknown record kind {kind!r}")


def serialize_line(record: Record) -> str:
    return json.dumps(record_to_dict(record), separators=(",", ":"))


def parse_line(line: str) -> Record:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TelemetryError(f"unparseable record line: {exc}") from None
    return record_from_dict(obj)


class TelemetrySink:
    """Base sink: thread-safe emit / flush / close."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._closed = False

    def emit(self, record: Record) -> None:
        with self._lock:
            if self._closed:
                raise TelemetryError("emit on closed sink")
            self._write(record)

    def _write(self, record: Record) -> None:
        raise NotImplementedError

    def flush(self) -> None:
        pass

    def close(self) -> None:
        with self._lock:
            self._closed = True

    def __enter__(self) -> "TelemetrySink":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


class NullSink(TelemetrySink):
    """Discards every record; experiments behave identically with it."""

    def _write(self, record: Record) -> None:
        pass


class JsonlSink(TelemetrySink):
    """Appends one JSON object per record to a single .jsonl file."""

    def __init__(self, path: str | Path) -> None:
        super().__init__()
        self.path = Path(path)
        self._fh: IO[str] = open(self.path, "a", encoding="utf-8")

    def _write(self, record: Record) -> None:
        self._fh.write(serialize_line(record) + "\n")

    def flush(self) -> None:
        with self._lock:
            if not self._closed:
                self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if not self._closed:
                self._fh.flush()
                self._fh.close()
                self._closed = True


# CSV column order matches the JSONL field order for each kind.
_CSV_FIELDS = {
    "round": ("kind", "t", "sampled", "loss", "acc", "wall_ms", "agg"),
    "agent": ("kind", "t", "agent", "epoch", "loss", "acc", "shard"),
    "profile": ("kind", "action", "mean_s", "calls", "total_s", "pct"),
    "rss": ("kind", "t", "rss_bytes"),
}
_CSV_FILENAMES = {
    "round": "rounds.csv",
    "agent": "agents.csv",
    "profile": "profile.csv",
    "rss": "rss.csv",
}


class CsvSink(TelemetrySink):
    """Writes one CSV file per record kind into a directory."""

    def __init__(self, directory: str | Path) -> None:
        super().__init__()
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._files: dict[str, IO[str]] = {}
        self._writers: dict[str, csv.writer] = {}

    def _writer_for(self, kind: str):
        if kind not in self._writers:
            fh = open(self.directory / _CSV_FILENAMES[kind], "a", newline="", encoding="utf-8")
            writer = csv.writer(fh)
            if fh.tell() == 0:
                writer.writerow(_CSV_FIELDS[kind])
            self._files[kind] = fh
            self._writers[kind] = writer
        return self._writers[kind]

    def _write(self, record: Record) -> None:
        obj = record_to_dict(record)
        kind = obj["kind"]
        row = [
            json.dumps(obj[f], separators=(",", ":")) if isinstance(obj[f], list) else obj[f]
            for f in _CSV_FIELDS[kind]
        ]
        self._writer_for(kind).writerow(row)

    def flush(self) -> None:
        with self._lock:
            if not self._closed:
                for fh in self._files.values():
                    fh.flush()

    def close(self) -> None:
        with self._lock:
            if not self._closed:
                for fh in self._files.values():
                    fh.flush()
                    fh.close()
                self._closed = True


def read_jsonl(path: str | Path) -> list[Record]:
    """Parse every record in a JSONL telemetry file."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(parse_line(line))
    return records


_CSV_CONVERTERS = {
    "t": int,
    "agent": int,
    "epoch": int,
    "shard": int,
    "wall_ms": int,
    "calls": int,
    "rss_bytes": int,
    "loss": float,
    "acc": float,
    "mean_s": float,
    "total_s": float,
    "pct": float,
    "sampled": json.loads,
}


def read_csv_records(path: str | Path) -> list[Record]:
    """Parse one of the per-kind CSV files back into records."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            obj = {
                key: (_CSV_CONVERTERS[key](value) if key in _CSV_CONVERTERS else value)
                for key, value in row.items()
            }
            records.append(record_from_dict(obj))
    return records


def iter_kind(records: Iterable[Record], cls: type) -> list:
    """Convenience filter used by reports and tests."""
    return [r for r in records if isinstance(r, cls)]
