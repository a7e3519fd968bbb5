"""Cycle aggregation, CSV output, triage flagging and log replay."""

from __future__ import annotations

import enum
import io
import os
from dataclasses import dataclass, field
from typing import IO, Iterable

from .eventlog import Checkpoint, CycleEnd, LogCorruptionError, LogEntry, iter_entries
from .protocol import NodesSnapshot, NodeUpdate, ReadingKind, TelemetryReading
from .session import ClockRegressionError, NodeRecord, SessionError, SessionTable

CSV_HEADER = b"NodeID,connectionTime\n"


@dataclass(frozen=True)
class ConnectivityRecord:
    node_id: str
    connection_time_ms: int
    cycle_start: int
    cycle_end: int

    def to_obj(self) -> dict:
        return {
            "nodeId": self.node_id,
            "connectionTime": self.connection_time_ms,
            "cycleStart": self.cycle_start,
            "cycleEnd": self.cycle_end,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "ConnectivityRecord":
        return cls(obj["nodeId"], obj["connectionTime"], obj["cycleStart"], obj["cycleEnd"])


def process_data(table: SessionTable, now: int) -> tuple[list[ConnectivityRecord], SessionTable]:
    """Close the current cycle at ``now``.

    Credits running connected time, emits one record per node (sorted by node
    id) and returns a new table with every counter reset to zero. Connected
    nodes stay connected from ``now``. The input table is not modified.
    """
    for rec in table:
        if now < rec.last_timestamp:
            raise ClockRegressionError(rec.node_id, now, rec.last_timestamp)
    credited = table.copy().credit_elapsed(now)
    cycle_start = credited.cycle_start if credited.cycle_start is not None else now
    records = [
        ConnectivityRecord(node_id, credited.records[node_id].accumulated_ms, cycle_start, now)
        for node_id in sorted(credited.records)
    ]
    for node_id, rec in credited.records.items():
        if rec.accumulated_ms:
            credited.records[node_id] = NodeRecord(rec.node_id, rec.mdevice_id, rec.status, rec.last_timestamp, 0)
    credited.cycle_start = now
    return records, credited


# --------------------------------------------------------------------------
# CSV


class CsvWriteError(OSError):
    def __init__(self, position: int, cause: BaseException):
        super().__init__(f"CSV write failed after {position} bytes: {cause}")
        self.position = position
        self.__cause__ = cause


def csv_name(cycle_end: int) -> str:
    return f"connectivity-{cycle_end}.csv"


def csv_rows(records: Iterable[ConnectivityRecord]) -> list[bytes]:
    rows = [CSV_HEADER]
    for r in sorted(records, key=lambda r: r.node_id):
        rows.append(f"{r.node_id},{r.connection_time_ms}\n".encode("utf-8"))
    return rows


def render_csv(records: Iterable[ConnectivityRecord]) -> bytes:
    return b"".join(csv_rows(records))


def write_csv(records: Iterable[ConnectivityRecord], sink: str | os.PathLike | IO[bytes]) -> int:
    """Write ``NodeID,connectionTime`` rows, sorted by node id, LF endings.

    ``sink`` is a path or a binary stream. Returns the number of bytes written;
    a failing sink raises :class:`CsvWriteError` carrying the byte position
    reached.
    """
    rows = csv_rows(records)
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            return write_csv_rows(rows, fh)
    return write_csv_rows(rows, sink)


def write_csv_rows(rows: list[bytes], sink: IO[bytes]) -> int:
    pos = 0
    try:
        for row in rows:
            sink.write(row)
            pos += len(row)
        sink.flush()
    except OSError as exc:
        raise CsvWriteError(pos, exc) from exc
    return pos


def read_csv(data: bytes) -> dict[str, int]:
    text = io.StringIO(data.decode("utf-8"), newline="")
    header = text.readline()
    if header.encode() != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {header!r}")
    out = {}
    for line in text:
        node_id, ms = line.rstrip("\n").split(",")
        out[node_id] = int(ms)
    return out


# --------------------------------------------------------------------------
# triage flagging


class Rule(str, enum.Enum):
    FEVER = "fever"
    LOW_OXYGEN = "low_oxygen"
    TACHYCARDIA = "tachycardia"


RULE_FOR_KIND = {
    ReadingKind.TEMPERATURE: Rule.FEVER,
    ReadingKind.OXYGEN_LEVEL: Rule.LOW_OXYGEN,
    ReadingKind.HEART_RATE: Rule.TACHYCARDIA,
}


@dataclass(frozen=True)
class TriageRules:
    fever_c: float = 38.0  # breach at >=
    low_oxygen_pct: float = 92.0  # breach at <
    tachycardia_bpm: float = 120.0  # breach at >
    window: int = 3

    def breaches(self, kind: ReadingKind, value: float) -> bool:
        if kind == ReadingKind.TEMPERATURE:
            return value >= self.fever_c
        if kind == ReadingKind.OXYGEN_LEVEL:
            return value < self.low_oxygen_pct
        return value > self.tachycardia_bpm


@dataclass(frozen=True)
class TriageFlag:
    device_id: str
    rule: Rule
    triggering_values: tuple[tuple[int, float], ...]
    raised_at: int

    def to_obj(self) -> dict:
        return {
            "deviceId": self.device_id,
            "rule": self.rule.value,
            "triggeringValues": [[ts, v] for ts, v in self.triggering_values],
            "raisedAt": self.raised_at,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "TriageFlag":
        values = tuple((int(ts), float(v)) for ts, v in obj["triggeringValues"])
        return cls(obj["deviceId"], Rule(obj["rule"]), values, int(obj["raisedAt"]))


@dataclass
class _Run:
    values: list = field(default_factory=list)
    flagged: bool = False
    last_ts: int | None = None


class TriageTracker:
    """Streaming debounce: a flag once ``window`` consecutive readings of one
    kind breach, then silence until a non-breaching reading resets the run.

    Readings whose ts is not after the previous one of the same device and kind
    are dropped, which also absorbs resends.
    """

    def __init__(self, rules: TriageRules | None = None):
        self.rules = rules or TriageRules()
        self._runs: dict[tuple[str, ReadingKind], _Run] = {}

    def feed(self, r: TelemetryReading) -> TriageFlag | None:
        key = (r.device_id, r.kind)
        run = self._runs.get(key)
        if run is None:
            run = self._runs[key] = _Run()
        if run.last_ts is not None and r.ts <= run.last_ts:
            return None
        run.last_ts = r.ts
        if not self.rules.breaches(r.kind, r.value):
            run.values.clear()
            run.flagged = False
            return None
        run.values.append((r.ts, r.value))
        window = self.rules.window
        if len(run.values) > window:
            del run.values[0]
        if not run.flagged and len(run.values) == window:
            run.flagged = True
            return TriageFlag(r.device_id, RULE_FOR_KIND[r.kind], tuple(run.values), r.ts)
        return None

    def to_obj(self) -> dict:
        return {
            "runs": [
                {
                    "deviceId": dev,
                    "kind": kind.value,
                    "values": [[ts, v] for ts, v in run.values],
                    "flagged": run.flagged,
                    "lastTs": run.last_ts,
                }
                for (dev, kind), run in self._runs.items()
            ]
        }

    @classmethod
    def from_obj(cls, obj: dict, rules: TriageRules | None = None) -> "TriageTracker":
        tracker = cls(rules)
        for o in obj.get("runs", []):
            values = [(int(ts), float(v)) for ts, v in o["values"]]
            tracker._runs[(o["deviceId"], ReadingKind(o["kind"]))] = _Run(values, o["flagged"], o["lastTs"])
        return tracker


def flag_for_testing(readings: Iterable[TelemetryReading], rules: TriageRules | None = None) -> list[TriageFlag]:
    tracker = TriageTracker(rules)
    flags = []
    for r in readings:
        flag = tracker.feed(r)
        if flag is not None:
            flags.append(flag)
    return flags


# --------------------------------------------------------------------------
# log replay


@dataclass
class CycleOutput:
    cycle_start: int
    cycle_end: int
    records: list[ConnectivityRecord]
    flags: list[TriageFlag]


class Replayer:
    """Fold log entries into the session table, triage state and closed cycles.

    ``closed`` is true when the last entry seen was a ``CycleEnd`` marker.
    """

    def __init__(self, rules: TriageRules | None = None):
        self.rules = rules
        self.table = SessionTable()
        self.tracker = TriageTracker(rules)
        self.pending_flags: list[TriageFlag] = []
        self.cycles: list[CycleOutput] = []
        self.closed = False
        self.last_ts: int | None = None
        self.last_seq = 0
        self.entries: list[LogEntry] = []

    def feed(self, lineno: int, entry: LogEntry) -> None:
        if self.last_ts is not None and entry.ts < self.last_ts:
            raise LogCorruptionError(lineno, f"ts {entry.ts} goes backwards from {self.last_ts}")
        self.last_ts = entry.ts
        self.last_seq = entry.seq
        self.entries.append(entry)
        p = entry.payload
        self.closed = False
        try:
            if isinstance(p, (NodesSnapshot, NodeUpdate)):
                self.table.apply(p, entry.ts)
            elif isinstance(p, TelemetryReading):
                flag = self.tracker.feed(p)
                if flag is not None:
                    self.pending_flags.append(flag)
            elif isinstance(p, Checkpoint):
                self.table = SessionTable.from_obj(p.table)
                self.tracker = TriageTracker.from_obj(p.triage, self.rules)
                self.pending_flags = []
                self.entries = [entry]
            elif isinstance(p, CycleEnd):
                records, self.table = process_data(self.table, entry.ts)
                self.cycles.append(CycleOutput(p.cycle_start, entry.ts, records, self.pending_flags))
                self.pending_flags = []
                self.closed = True
        except SessionError as exc:
            raise LogCorruptionError(lineno, str(exc)) from None

    def run(self, source) -> "Replayer":
        for lineno, entry in iter_entries(source):
            self.feed(lineno, entry)
        return self


def replay_log(source) -> SessionTable:
    """Session table obtained by folding a log (path, lines or entries) in order.

    Raises :class:`LogCorruptionError` naming the line where ts goes backwards.
    """
    return Replayer().run(source).table
