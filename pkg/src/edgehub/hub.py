"""The edge hub: ingestion, timestamp-ordered logging, cycle scheduling.

:class:`Hub` is the synchronous core. All session mutations go through its
methods from one thread (the asyncio loop in :mod:`edgehub.server`), which is
what serializes them. The clock is injected so the same code runs on wall time
or on a simulated clock shared with a driver.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

from .aggregate import (
    CsvWriteError,
    CycleOutput,
    Replayer,
    TriageFlag,
    TriageTracker,
    csv_name,
    process_data,
    write_csv,
)
from .config import ClockSource, HubConfig, Mode, SimClock, system_clock
from .eventlog import (
    Checkpoint,
    CycleEnd,
    DiskFullError,
    EventLog,
    LogEntry,
    LogError,
    encode_entry,
    log_files,
    read_log,
)
from .protocol import (
    NodesSnapshot,
    NodeUpdate,
    ProtocolError,
    TelemetryReading,
    decode_event,
    reading_from_obj,
    validate_reading,
)
from .session import SessionError, SessionTable
from .sync import BatchKind, DuplicateBatchError, SyncBatch, SyncQueue

log = logging.getLogger(__name__)

ACK = {"ok": True}


def nack(code: str) -> dict:
    return {"ok": False, "error": code}


@dataclass
class CycleResult:
    cycle: CycleOutput
    csv_path: Path
    csv_ok: bool
    batch_ids: list[str] = field(default_factory=list)

    @property
    def records(self):
        return self.cycle.records

    @property
    def flags(self) -> list[TriageFlag]:
        return self.cycle.flags


class Hub:
    """Edge data-collection service core.

    ``crash_hook`` is called with a stage name at each durability step
    (``"appended"``, ``"applied"``, ``"cycle_logged"``, ``"cycle_csv"``,
    ``"cycle_enqueued"``); fault-injection tests raise from it.
    """

    def __init__(
        self,
        config: HubConfig,
        *,
        clock: Callable[[], int] | None = None,
        queue: SyncQueue | None = None,
        crash_hook: Callable[[str], None] | None = None,
    ):
        self.config = config.validate()
        if clock is None:
            clock = SimClock() if config.clock_source == ClockSource.SIMULATED else system_clock
        self.clock = clock
        self.queue = queue if queue is not None else SyncQueue(config.queue_path)
        self.log = EventLog(config.log_dir, fsync=config.fsync)
        self.config.csv_dir.mkdir(parents=True, exist_ok=True)
        self.table = SessionTable()
        self.tracker = TriageTracker(config.rules)
        self.pending_flags: list[TriageFlag] = []
        self.history: list[CycleResult] = []
        self.crash_hook = crash_hook
        self.degraded = False
        self.started = False
        self.events_total = 0
        self.rejected_messages = 0
        self.rejected_readings = 0
        self.csv_failures = 0
        self.last_cycle_end: int | None = None

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "Hub":
        """Begin a fresh cycle at the current time, or recover from the log dir."""
        files = log_files(self.config.log_dir)
        if files:
            self._recover(files[-1])
        else:
            now = self.clock()
            self.table.cycle_start = now
            self.log.start_file(now, self._checkpoint())
        self.started = True
        return self

    def close(self) -> None:
        self.log.close()
        self.queue.close()

    def _recover(self, path: Path) -> None:
        rep = Replayer(self.config.rules).run(read_log(path, strict=False))
        self.table = rep.table
        self.tracker = rep.tracker
        self.pending_flags = rep.pending_flags
        self.log.resume(path, rep.last_ts, rep.last_seq)
        log.info("recovered %s: %d entries, %d nodes", path.name, len(rep.entries), len(self.table))
        if self.config.mode == Mode.RAW:
            for entry in rep.entries:
                if isinstance(entry.payload, (NodesSnapshot, NodeUpdate, TelemetryReading)):
                    self._enqueue_raw(entry)
        if rep.closed:
            self._finish_cycle(rep.cycles[-1])

    def _checkpoint(self) -> Checkpoint:
        return Checkpoint(self.table.to_obj(), self.tracker.to_obj())

    def _fault(self, point: str) -> None:
        if self.crash_hook is not None:
            self.crash_hook(point)

    # -- scheduling ----------------------------------------------------------

    @property
    def cycle_start(self) -> int:
        return self.table.cycle_start

    @property
    def next_boundary(self) -> int:
        return self.table.cycle_start + self.config.interval_ms

    def tick(self) -> list[CycleResult]:
        """Run every cycle whose boundary is at or before the current time."""
        done = []
        while self.clock() >= self.next_boundary:
            done.append(self.run_cycle(self.next_boundary))
        return done

    def run_cycle(self, boundary: int) -> CycleResult:
        """Close the cycle at ``boundary``: aggregate, log, CSV, enqueue, rotate."""
        records, fresh = process_data(self.table, boundary)
        cycle = CycleOutput(self.table.cycle_start, boundary, records, self.pending_flags)
        self._append(self.log.entry(boundary, CycleEnd(cycle.cycle_start, boundary)))
        self._fault("cycle_logged")
        self.table = fresh
        self.pending_flags = []
        return self._finish_cycle(cycle)

    def _finish_cycle(self, cycle: CycleOutput) -> CycleResult:
        csv_path = self.config.csv_dir / csv_name(cycle.cycle_end)
        csv_ok = False
        for attempt in range(2):
            try:
                write_csv(cycle.records, csv_path)
                csv_ok = True
                break
            except CsvWriteError as exc:
                log.warning("CSV write for cycle %d failed (attempt %d): %s", cycle.cycle_end, attempt + 1, exc)
        if not csv_ok:
            self.csv_failures += 1
        self._fault("cycle_csv")

        batches = []
        aggregated = self.config.mode == Mode.AGGREGATED
        if cycle.records and (aggregated or not csv_ok):
            batches.append((BatchKind.CONNECTIVITY_RECORDS, [r.to_obj() for r in cycle.records]))
        if cycle.flags and aggregated:
            batches.append((BatchKind.TRIAGE_FLAGS, [f.to_obj() for f in cycle.flags]))
        ids = []
        for counter, (kind, payload) in enumerate(batches):
            batch = SyncBatch(f"{self.config.hub_id}-{cycle.cycle_end}-{counter}", kind, payload, cycle.cycle_end)
            try:
                self.queue.enqueue(batch)
            except DuplicateBatchError:
                pass  # already enqueued before a crash
            ids.append(batch.batch_id)
        self._fault("cycle_enqueued")

        try:
            self.log.start_file(cycle.cycle_end, self._checkpoint())
        except DiskFullError:
            self.degraded = True
            log.error("disk full while rotating log; entering degraded mode")
        self.last_cycle_end = cycle.cycle_end
        result = CycleResult(cycle, csv_path, csv_ok, ids)
        self.history.append(result)
        return result

    # -- ingestion -----------------------------------------------------------

    def _append(self, entry: LogEntry) -> None:
        try:
            self.log.append(entry)
        except DiskFullError:
            self.degraded = True
            log.error("disk full; entering degraded mode")
            raise

    def _enqueue_raw(self, entry: LogEntry) -> None:
        batch = SyncBatch(
            f"{self.config.hub_id}-raw-{entry.seq}",
            BatchKind.RAW_EVENTS,
            [json.loads(encode_entry(entry))],
            entry.ts,
        )
        try:
            self.queue.enqueue(batch)
        except DuplicateBatchError:
            pass

    def handle_gateway_message(self, text: str | bytes) -> dict:
        """Decode, stamp, log, then apply one gateway frame; returns the ack frame.

        The log append is flushed before the table changes, so an acked event
        always survives a crash. Rejected frames never touch the table.
        """
        if self.degraded:
            self.rejected_messages += 1
            return nack("degraded")
        try:
            event = decode_event(text)
            now = self.clock()
            self.tick()
            self.table.check_event(event, now)
            entry = self.log.entry(now, event)
            self._append(entry)
            self._fault("appended")
            if self.config.mode == Mode.RAW:
                self._enqueue_raw(entry)
            self.table.apply(event, now)
            self._fault("applied")
        except (ProtocolError, SessionError, LogError) as exc:
            self.rejected_messages += 1
            log.debug("rejected gateway frame: %s", exc)
            return nack(exc.code)
        self.events_total += 1
        return ACK

    def ingest_reading(self, payload: Any) -> tuple[int, dict]:
        """Validate and record one telemetry reading; returns (HTTP status, body)."""
        if self.degraded:
            self.rejected_readings += 1
            return 503, {"accepted": False, "error": "degraded"}
        try:
            if isinstance(payload, TelemetryReading):
                reading = payload
            else:
                obj = json.loads(payload) if isinstance(payload, (str, bytes, bytearray)) else payload
                reading = reading_from_obj(obj)
        except (ValueError, ProtocolError) as exc:
            self.rejected_readings += 1
            field_name = getattr(exc, "field", "body")
            return 422, {"accepted": False, "violations": [{"field": field_name, "code": "malformed", "message": str(exc)}]}
        violations = validate_reading(reading)
        if violations:
            self.rejected_readings += 1
            return 422, {"accepted": False, "violations": [asdict(v) for v in violations]}
        try:
            now = self.clock()
            self.tick()
            entry = self.log.entry(now, reading)
            self._append(entry)
        except LogError as exc:
            self.rejected_readings += 1
            return 503, {"accepted": False, "error": exc.code}
        if self.config.mode == Mode.RAW:
            self._enqueue_raw(entry)
        flag = self.tracker.feed(reading)
        if flag is not None:
            self.pending_flags.append(flag)
        self.events_total += 1
        return 202, {"accepted": True}

    def health(self) -> dict:
        return {
            "status": "degraded" if self.degraded else "ok",
            "events_total": self.events_total,
            "rejected_messages": self.rejected_messages,
            "rejected_readings": self.rejected_readings,
            "last_cycle_end": self.last_cycle_end,
            "pending_batches": len(self.queue),
        }
