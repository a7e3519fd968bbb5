"""Append-only JSON-lines event log, one file per aggregation cycle.

Each line is a wire object prefixed with ``seq`` and ``ts``::

    {"seq":12,"ts":1700000004000,"event":"NodesUpdate","data":{...}}

Besides the two gateway events the log carries three hub-internal entries:
``Telemetry`` (an accepted reading), ``Checkpoint`` (table and triage state,
always the first line of a file) and ``CycleEnd`` (the cycle was closed at
``ts``). A file therefore replays on its own.
"""

from __future__ import annotations

import errno
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Union

from .protocol import (
    GatewayEvent,
    NodesSnapshot,
    NodeUpdate,
    ProtocolError,
    TelemetryReading,
    encode_event,
    event_from_obj,
    reading_from_obj,
    reading_to_obj,
)

EVENT_TELEMETRY = "Telemetry"
EVENT_CHECKPOINT = "Checkpoint"
EVENT_CYCLE_END = "CycleEnd"

LOG_NAME_RE = re.compile(r"^events-(\d+)\.jsonl$")


class LogError(Exception):
    code = "log_error"


class OrderingError(LogError):
    code = "ordering_error"


class DiskFullError(LogError):
    code = "degraded"


class LogCorruptionError(LogError):
    code = "log_corruption"

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Checkpoint:
    table: dict
    triage: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CycleEnd:
    cycle_start: int
    cycle_end: int


Payload = Union[NodesSnapshot, NodeUpdate, TelemetryReading, Checkpoint, CycleEnd]


@dataclass(frozen=True)
class LogEntry:
    ts: int
    seq: int
    payload: Payload


_ENCODER = json.JSONEncoder(separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def _dumps(obj: Any) -> str:
    return _ENCODER.encode(obj)


def encode_entry(entry: LogEntry) -> str:
    p = entry.payload
    if isinstance(p, (NodesSnapshot, NodeUpdate)):
        body = encode_event(p)
    elif isinstance(p, TelemetryReading):
        body = _dumps({"event": EVENT_TELEMETRY, "data": reading_to_obj(p)})
    elif isinstance(p, Checkpoint):
        body = _dumps({"event": EVENT_CHECKPOINT, "data": {"table": p.table, "triage": p.triage}})
    elif isinstance(p, CycleEnd):
        body = _dumps({"event": EVENT_CYCLE_END, "data": {"cycleStart": p.cycle_start, "cycleEnd": p.cycle_end}})
    else:
        raise TypeError(f"cannot log {type(p).__name__}")
    # body always starts with '{"event":'
    return f'{{"seq":{entry.seq},"ts":{entry.ts},{body[1:]}'


def decode_entry(line: str) -> LogEntry:
    obj = json.loads(line)
    if not isinstance(obj, dict):
        raise ValueError("log line is not an object")
    seq, ts = obj.get("seq"), obj.get("ts")
    if not isinstance(seq, int) or not isinstance(ts, int):
        raise ValueError("missing integer seq/ts")
    name = obj.get("event")
    data = obj.get("data")
    if name == EVENT_TELEMETRY:
        payload: Payload = reading_from_obj(data)
    elif name == EVENT_CHECKPOINT:
        payload = Checkpoint(data["table"], data.get("triage", {}))
    elif name == EVENT_CYCLE_END:
        payload = CycleEnd(int(data["cycleStart"]), int(data["cycleEnd"]))
    else:
        payload = event_from_obj(obj)
    return LogEntry(ts, seq, payload)


def read_log(path: str | os.PathLike, *, strict: bool = True) -> Iterator[LogEntry]:
    """Decode a log file line by line.

    With ``strict=False`` an unparseable *final* line is skipped: it can only be
    a write torn by a crash, and no ack was sent for it.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    last = len(lines)
    for lineno, line in enumerate(lines, 1):
        try:
            yield decode_entry(line)
        except (ValueError, KeyError, TypeError, ProtocolError) as exc:
            if not strict and lineno == last:
                return
            raise LogCorruptionError(lineno, str(exc)) from None


def iter_entries(source: str | os.PathLike | Iterable[LogEntry | str]) -> Iterator[tuple[int, LogEntry]]:
    """(line number, entry) pairs from a path, raw lines or entries."""
    if isinstance(source, (str, os.PathLike)):
        yield from enumerate(read_log(source), 1)
        return
    for lineno, item in enumerate(source, 1):
        if isinstance(item, LogEntry):
            yield lineno, item
            continue
        try:
            yield lineno, decode_entry(item)
        except (ValueError, KeyError, TypeError, ProtocolError) as exc:
            raise LogCorruptionError(lineno, str(exc)) from None


def log_files(log_dir: str | os.PathLike) -> list[Path]:
    """Cycle log files in ``log_dir`` ordered by cycle start."""
    found = []
    for p in Path(log_dir).iterdir():
        m = LOG_NAME_RE.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return [p for _, p in sorted(found)]


class EventLog:
    """Writer for the cycle log files in ``log_dir``.

    Every append is flushed to the OS before returning (and fsynced when
    ``fsync`` is set), so an acked message is always on disk.
    """

    def __init__(self, log_dir: str | os.PathLike, *, fsync: bool = False):
        self.log_dir = Path(log_dir)
        self.fsync = fsync
        self.path: Path | None = None
        self.last_ts: int | None = None
        self.next_seq = 1
        self._fh = None

    def start_file(self, cycle_start: int, checkpoint: Checkpoint) -> Path:
        """Open ``events-<cycle_start>.jsonl`` whose first line is ``checkpoint``.

        The file appears atomically with its checkpoint already in place.
        """
        if self.last_ts is not None and cycle_start < self.last_ts:
            raise OrderingError(f"cycle start {cycle_start} before last entry ts {self.last_ts}")
        entry = LogEntry(cycle_start, self.next_seq, checkpoint)
        path = self.log_dir / f"events-{cycle_start}.jsonl"
        tmp = path.with_suffix(".jsonl.tmp")
        try:
            with open(tmp, "w", encoding="utf-8") as fh:
                fh.write(encode_entry(entry) + "\n")
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
            os.replace(tmp, path)
        except OSError as exc:
            if exc.errno == errno.ENOSPC:
                raise DiskFullError(str(exc)) from exc
            raise
        self.close()
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")
        self.last_ts = cycle_start
        self.next_seq += 1
        return path

    def resume(self, path: Path, last_ts: int, last_seq: int) -> None:
        self.close()
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")
        self.last_ts = last_ts
        self.next_seq = last_seq + 1

    def entry(self, ts: int, payload: Payload) -> LogEntry:
        return LogEntry(ts, self.next_seq, payload)

    def append(self, entry: LogEntry) -> None:
        if self._fh is None:
            raise LogError("log is not open")
        if self.last_ts is not None and entry.ts < self.last_ts:
            raise OrderingError(f"entry ts {entry.ts} before last appended ts {self.last_ts}")
        if entry.seq < self.next_seq:
            raise OrderingError(f"entry seq {entry.seq} not after {self.next_seq - 1}")
        line = encode_entry(entry) + "\n"
        try:
            self._fh.write(line)
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
        except OSError as exc:
            if exc.errno == errno.ENOSPC:
                raise DiskFullError(str(exc)) from exc
            raise
        self.last_ts = entry.ts
        self.next_seq = entry.seq + 1

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
