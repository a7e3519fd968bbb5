"""Store-and-forward uplink to the cloud and the idempotent cloud-side receiver.

Delivery is at-least-once: a batch leaves the durable queue only on a positive
ack, and the receiver deduplicates on ``batchId``. Together that gives
exactly-once persistence at the stub however lossy the link is.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import random
import re
import sqlite3
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

from .aggregate import ConnectivityRecord, TriageFlag, csv_name, render_csv
from .eventlog import decode_entry
from .protocol import is_mac

log = logging.getLogger(__name__)

BATCH_ID_RE = re.compile(r"^[A-Za-z0-9._-]{1,200}$")


class BatchKind(str, enum.Enum):
    RAW_EVENTS = "raw_events"
    CONNECTIVITY_RECORDS = "connectivity_records"
    TRIAGE_FLAGS = "triage_flags"


class BatchError(ValueError):
    """A batch that does not match its schema."""


class DuplicateBatchError(Exception):
    def __init__(self, batch_id: str):
        super().__init__(f"batch {batch_id!r} already enqueued")
        self.batch_id = batch_id


_ENCODER = json.JSONEncoder(separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def _dumps(obj: Any) -> str:
    return _ENCODER.encode(obj)


def _check_record(o: Any) -> None:
    if not isinstance(o, dict):
        raise BatchError("record must be an object")
    rec = ConnectivityRecord.from_obj(o)
    if not is_mac(rec.node_id):
        raise BatchError(f"bad nodeId {rec.node_id!r}")
    for name in ("connection_time_ms", "cycle_start", "cycle_end"):
        v = getattr(rec, name)
        if not isinstance(v, int) or isinstance(v, bool):
            raise BatchError(f"{name} must be an integer")
    if not 0 <= rec.connection_time_ms <= rec.cycle_end - rec.cycle_start:
        raise BatchError(f"connectionTime {rec.connection_time_ms} outside its cycle")


def _check_flag(o: Any) -> None:
    if not isinstance(o, dict):
        raise BatchError("flag must be an object")
    flag = TriageFlag.from_obj(o)
    if not is_mac(flag.device_id) or not flag.triggering_values:
        raise BatchError("bad triage flag")


def _check_raw(o: Any) -> None:
    if not isinstance(o, dict):
        raise BatchError("raw event must be an object")
    decode_entry(_dumps(o))


_CHECKS = {
    BatchKind.CONNECTIVITY_RECORDS: _check_record,
    BatchKind.TRIAGE_FLAGS: _check_flag,
    BatchKind.RAW_EVENTS: _check_raw,
}


@dataclass(frozen=True)
class SyncBatch:
    batch_id: str
    kind: BatchKind
    payload: list
    created_at: int

    def to_obj(self) -> dict:
        return {
            "batchId": self.batch_id,
            "kind": self.kind.value,
            "payload": self.payload,
            "createdAt": self.created_at,
        }

    def encode(self) -> bytes:
        return _dumps(self.to_obj()).encode("utf-8")

    def validate(self) -> "SyncBatch":
        if not isinstance(self.batch_id, str) or not BATCH_ID_RE.match(self.batch_id):
            raise BatchError(f"bad batchId {self.batch_id!r}")
        if not isinstance(self.created_at, int) or isinstance(self.created_at, bool):
            raise BatchError("createdAt must be an integer")
        if not isinstance(self.payload, list) or not self.payload:
            raise BatchError("payload must be a non-empty list")
        check = _CHECKS[self.kind]
        for item in self.payload:
            try:
                check(item)
            except BatchError:
                raise
            except Exception as exc:
                raise BatchError(f"{self.kind.value} item does not match schema: {exc}") from None
        if self.kind == BatchKind.CONNECTIVITY_RECORDS:
            if len({(o["cycleStart"], o["cycleEnd"]) for o in self.payload}) != 1:
                raise BatchError("records of one batch must share a cycle")
        return self

    @classmethod
    def from_obj(cls, obj: Any) -> "SyncBatch":
        if not isinstance(obj, dict):
            raise BatchError("batch must be an object")
        try:
            kind = BatchKind(obj.get("kind"))
        except ValueError:
            raise BatchError(f"unknown kind {obj.get('kind')!r}") from None
        return cls(obj.get("batchId"), kind, obj.get("payload"), obj.get("createdAt")).validate()

    @classmethod
    def decode(cls, body: bytes | str) -> "SyncBatch":
        try:
            obj = json.loads(body)
        except (ValueError, RecursionError) as exc:
            raise BatchError(f"not JSON: {exc}") from None
        return cls.from_obj(obj)


# --------------------------------------------------------------------------
# durable queue


class State(str, enum.Enum):
    PENDING = "pending"
    DELIVERED = "delivered"
    DEAD = "dead"


_SCHEMA = """
CREATE TABLE IF NOT EXISTS batches (
    pos INTEGER PRIMARY KEY AUTOINCREMENT,
    batch_id TEXT NOT NULL UNIQUE,
    kind TEXT NOT NULL,
    body BLOB NOT NULL,
    created_at INTEGER NOT NULL,
    state TEXT NOT NULL DEFAULT 'pending',
    attempts INTEGER NOT NULL DEFAULT 0,
    reason TEXT
)
"""


class SyncQueue:
    """Durable FIFO of batches backed by SQLite.

    Every call commits before returning. Safe to share between the ingestion
    thread and one flusher thread.
    """

    def __init__(self, path: str | os.PathLike = ":memory:", *, synchronous: str = "NORMAL"):
        self.path = str(path)
        self._lock = threading.Lock()
        self._db = sqlite3.connect(self.path, check_same_thread=False, isolation_level=None)
        if self.path != ":memory:":
            self._db.execute("PRAGMA journal_mode=WAL")
        self._db.execute(f"PRAGMA synchronous={synchronous}")
        self._db.execute(_SCHEMA)

    def close(self) -> None:
        with self._lock:
            self._db.close()

    def enqueue(self, batch: SyncBatch) -> None:
        batch.validate()
        body = batch.encode()
        with self._lock:
            try:
                self._db.execute(
                    "INSERT INTO batches (batch_id, kind, body, created_at) VALUES (?, ?, ?, ?)",
                    (batch.batch_id, batch.kind.value, body, batch.created_at),
                )
            except sqlite3.IntegrityError:
                raise DuplicateBatchError(batch.batch_id) from None

    def has(self, batch_id: str) -> bool:
        with self._lock:
            row = self._db.execute("SELECT 1 FROM batches WHERE batch_id = ?", (batch_id,)).fetchone()
        return row is not None

    def pending(self, limit: int | None = None) -> list[tuple[str, bytes]]:
        """(batch id, encoded body) of pending batches in FIFO order."""
        sql = "SELECT batch_id, body FROM batches WHERE state = 'pending' ORDER BY pos"
        if limit is not None:
            sql += f" LIMIT {int(limit)}"
        with self._lock:
            return [(bid, bytes(body)) for bid, body in self._db.execute(sql)]

    def batches(self, state: State | None = None) -> list[SyncBatch]:
        sql = "SELECT body FROM batches"
        args: tuple = ()
        if state is not None:
            sql += " WHERE state = ?"
            args = (State(state).value,)
        with self._lock:
            rows = self._db.execute(sql + " ORDER BY pos", args).fetchall()
        return [SyncBatch.decode(bytes(body)) for (body,) in rows]

    def _set_state(self, batch_id: str, state: State, reason: str | None = None) -> None:
        with self._lock:
            self._db.execute(
                "UPDATE batches SET state = ?, reason = ? WHERE batch_id = ? AND state = 'pending'",
                (state.value, reason, batch_id),
            )

    def mark_delivered(self, batch_id: str) -> None:
        self._set_state(batch_id, State.DELIVERED)

    def mark_dead(self, batch_id: str, reason: str) -> None:
        self._set_state(batch_id, State.DEAD, reason)

    def record_attempt(self, batch_id: str) -> None:
        with self._lock:
            self._db.execute("UPDATE batches SET attempts = attempts + 1 WHERE batch_id = ?", (batch_id,))

    def dead_letters(self) -> list[tuple[str, str]]:
        with self._lock:
            return list(self._db.execute("SELECT batch_id, reason FROM batches WHERE state = 'dead' ORDER BY pos"))

    def counts(self) -> dict[str, int]:
        out = {s.value: 0 for s in State}
        with self._lock:
            for state, n in self._db.execute("SELECT state, COUNT(*) FROM batches GROUP BY state"):
                out[state] = n
        return out

    def total_bytes(self, kind: BatchKind | None = None) -> int:
        sql = "SELECT COALESCE(SUM(LENGTH(body)), 0) FROM batches"
        args: tuple = ()
        if kind is not None:
            sql += " WHERE kind = ?"
            args = (BatchKind(kind).value,)
        with self._lock:
            return self._db.execute(sql, args).fetchone()[0]

    def __len__(self) -> int:
        return self.counts()[State.PENDING.value]


# --------------------------------------------------------------------------
# uplinks


class UplinkError(Exception):
    """Transport failure: the outcome of the request is unknown."""


@dataclass
class UplinkResponse:
    status: int
    body: dict


class Uplink(Protocol):
    def send(self, body: bytes) -> UplinkResponse: ...


class HttpUplink:
    """POSTs batches to ``<cloud_url>/api/v1/batches``.

    ``client`` may be any ``httpx.Client`` (including a Starlette TestClient).
    """

    def __init__(self, cloud_url: str, client=None, timeout: float = 10.0):
        import httpx

        self.url = cloud_url.rstrip("/") + "/api/v1/batches"
        self.client = client or httpx.Client(timeout=timeout)
        self._httpx = httpx

    def send(self, body: bytes) -> UplinkResponse:
        try:
            resp = self.client.post(self.url, content=body, headers={"content-type": "application/json"})
        except self._httpx.HTTPError as exc:
            raise UplinkError(str(exc)) from exc
        try:
            payload = resp.json()
        except ValueError:
            payload = {}
        return UplinkResponse(resp.status_code, payload if isinstance(payload, dict) else {})


class LocalUplink:
    """In-process link straight into a :class:`CloudStub`."""

    def __init__(self, stub: "CloudStub"):
        self.stub = stub

    def send(self, body: bytes) -> UplinkResponse:
        status, payload = self.stub.receive(body)
        return UplinkResponse(status, payload)


class LossyUplink:
    """Fails a fraction ``loss`` of attempts: half before the request reaches
    the receiver, half after it was processed but before the ack returns."""

    def __init__(self, inner: Uplink, loss: float, rng: random.Random | None = None):
        self.inner = inner
        self.loss = loss
        self.rng = rng or random.Random(0)
        self.dropped_requests = 0
        self.dropped_acks = 0

    def send(self, body: bytes) -> UplinkResponse:
        r = self.rng.random()
        if r < self.loss / 2:
            self.dropped_requests += 1
            raise UplinkError("request lost")
        resp = self.inner.send(body)
        if r < self.loss:
            self.dropped_acks += 1
            raise UplinkError("ack lost")
        return resp


class DownUplink:
    def __init__(self):
        self.attempts = 0

    def send(self, body: bytes) -> UplinkResponse:
        self.attempts += 1
        raise UplinkError("link down")


# --------------------------------------------------------------------------
# flushing


@dataclass(frozen=True)
class Backoff:
    base_s: float = 1.0
    factor: float = 2.0
    cap_s: float = 60.0
    jitter: bool = True

    def delay(self, attempt: int, rng: random.Random) -> float:
        """Delay before retry number ``attempt`` (0-based); equal jitter over [d/2, d]."""
        d = min(self.cap_s, self.base_s * self.factor**attempt)
        return rng.uniform(d / 2, d) if self.jitter else d


@dataclass
class FlushReport:
    requests: int = 0
    delivered: int = 0
    duplicates: int = 0
    dead_lettered: int = 0
    pending: int = 0
    stalled: bool = False
    delays: list = field(default_factory=list)


def flush(
    queue: SyncQueue,
    uplink: Uplink,
    *,
    backoff: Backoff = Backoff(),
    max_attempts: int = 8,
    sleep: Callable[[float], None] = time.sleep,
    rng: random.Random | None = None,
) -> FlushReport:
    """Deliver pending batches in FIFO order.

    A transport error or 5xx is retried with backoff; after ``max_attempts``
    failures on the head batch the flush stops (``stalled``) so later batches
    never overtake it. A 4xx parks the batch as dead-lettered and the flush
    moves on.
    """
    rng = rng or random.Random()
    report = FlushReport()
    for batch_id, body in queue.pending():
        failures = 0
        while True:
            report.requests += 1
            queue.record_attempt(batch_id)
            try:
                resp = uplink.send(body)
            except UplinkError as exc:
                log.debug("batch %s: %s", batch_id, exc)
                resp = None
            if resp is not None and 200 <= resp.status < 300 and resp.body.get("ok"):
                queue.mark_delivered(batch_id)
                report.delivered += 1
                report.duplicates += bool(resp.body.get("duplicate"))
                break
            if resp is not None and 400 <= resp.status < 500:
                reason = str(resp.body.get("reason") or resp.body.get("error") or resp.status)
                log.warning("batch %s dead-lettered: %s", batch_id, reason)
                queue.mark_dead(batch_id, reason)
                report.dead_lettered += 1
                break
            failures += 1
            if failures >= max_attempts:
                report.stalled = True
                report.pending = len(queue)
                return report
            delay = backoff.delay(failures - 1, rng)
            report.delays.append(delay)
            sleep(delay)
    report.pending = len(queue)
    return report


# --------------------------------------------------------------------------
# cloud side


class CloudStub:
    """Idempotent receiver persisting each batch once under ``out_dir``.

    Layout: ``batches/<batchId>.json``, ``csv/connectivity-<cycleEnd>.csv``
    rebuilt from record batches, and ``received.jsonl`` listing batch ids in
    arrival order.
    """

    def __init__(self, out_dir: str | os.PathLike):
        self.out_dir = Path(out_dir)
        self.batch_dir = self.out_dir / "batches"
        self.csv_dir = self.out_dir / "csv"
        self.batch_dir.mkdir(parents=True, exist_ok=True)
        self.csv_dir.mkdir(parents=True, exist_ok=True)
        self.index_path = self.out_dir / "received.jsonl"
        self._lock = threading.Lock()
        self.acks = 0

    def receive(self, body: bytes | str | dict) -> tuple[int, dict]:
        try:
            batch = SyncBatch.from_obj(body) if isinstance(body, dict) else SyncBatch.decode(body)
        except BatchError as exc:
            return 400, {"ok": False, "error": "malformed", "reason": str(exc)}
        with self._lock:
            path = self.batch_dir / f"{batch.batch_id}.json"
            self.acks += 1
            if path.exists():
                return 200, {"ok": True, "duplicate": True}
            if batch.kind == BatchKind.CONNECTIVITY_RECORDS:
                records = [ConnectivityRecord.from_obj(o) for o in batch.payload]
                _atomic_write(self.csv_dir / csv_name(records[0].cycle_end), render_csv(records))
            _atomic_write(path, batch.encode())
            with open(self.index_path, "a", encoding="utf-8") as fh:
                fh.write(_dumps({"batchId": batch.batch_id, "kind": batch.kind.value}) + "\n")
        return 200, {"ok": True, "duplicate": False}

    def received(self) -> list[str]:
        if not self.index_path.exists():
            return []
        with open(self.index_path, encoding="utf-8") as fh:
            return [json.loads(line)["batchId"] for line in fh if line.strip()]

    def load(self, batch_id: str) -> SyncBatch:
        return SyncBatch.decode((self.batch_dir / f"{batch_id}.json").read_bytes())


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
