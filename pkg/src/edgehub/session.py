"""Per-device session table and connectivity-time accounting.

Every mutating operation takes the current time ``now`` (integer ms since the
Unix epoch) from the caller; nothing in here reads a clock. A connected record
carries uncredited time from ``last_timestamp`` onwards; the time is credited
into ``accumulated_ms`` on a disconnect or by :func:`credit_elapsed`.

The ``SessionTable`` methods mutate in place and are transactional: they check
for clock regression before touching anything, so a rejected event leaves the
table as it was. The module-level functions are the copy-on-write versions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator

from .protocol import NodesSnapshot, NodeStatus, NodeUpdate

CONNECTED = NodeStatus.CONNECTED
DISCONNECTED = NodeStatus.DISCONNECTED


class SessionError(Exception):
    code = "session_error"


class ClockRegressionError(SessionError):
    code = "clock_regression"

    def __init__(self, node_id: str, now: int, last: int):
        super().__init__(f"{node_id}: now={now} is earlier than last timestamp {last}")
        self.node_id = node_id
        self.now = now
        self.last = last


class NodeNotFoundError(SessionError, KeyError):
    code = "not_found"

    def __str__(self) -> str:
        return f"unknown node {self.args[0]!r}"


@dataclass(frozen=True)
class NodeRecord:
    node_id: str
    mdevice_id: str
    status: NodeStatus
    last_timestamp: int
    accumulated_ms: int = 0

    def to_obj(self) -> dict:
        return {
            "nodeId": self.node_id,
            "mdeviceId": self.mdevice_id,
            "status": self.status.value,
            "lastTimestamp": self.last_timestamp,
            "accumulatedMs": self.accumulated_ms,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "NodeRecord":
        return cls(
            obj["nodeId"],
            obj["mdeviceId"],
            NodeStatus(obj["status"]),
            int(obj["lastTimestamp"]),
            int(obj["accumulatedMs"]),
        )


def _transition(rec: NodeRecord, status: NodeStatus, mdevice_id: str, now: int) -> NodeRecord:
    if rec.status == status:
        if rec.mdevice_id != mdevice_id:
            return replace(rec, mdevice_id=mdevice_id)
        return rec
    if status == DISCONNECTED:
        return NodeRecord(
            rec.node_id, mdevice_id, DISCONNECTED, now, rec.accumulated_ms + (now - rec.last_timestamp)
        )
    return NodeRecord(rec.node_id, mdevice_id, CONNECTED, now, rec.accumulated_ms)


class SessionTable:
    """Map of node id to :class:`NodeRecord`, at most one record per node.

    ``cycle_start`` is the instant the current aggregation cycle began; it is
    set by the first event on a fresh table and moved by ``process_data``.
    """

    __slots__ = ("records", "cycle_start")

    def __init__(self, records: dict[str, NodeRecord] | None = None, cycle_start: int | None = None):
        self.records: dict[str, NodeRecord] = dict(records or {})
        self.cycle_start = cycle_start

    def copy(self) -> "SessionTable":
        return SessionTable(self.records, self.cycle_start)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[NodeRecord]:
        return iter(self.records.values())

    def __contains__(self, node_id: object) -> bool:
        return node_id in self.records

    def __getitem__(self, node_id: str) -> NodeRecord:
        try:
            return self.records[node_id]
        except KeyError:
            raise NodeNotFoundError(node_id) from None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SessionTable):
            return NotImplemented
        return self.records == other.records and self.cycle_start == other.cycle_start

    def __repr__(self) -> str:
        return f"SessionTable(cycle_start={self.cycle_start}, records={list(self.records.values())!r})"

    # -- checks ----------------------------------------------------------

    def _check(self, node_id: str, now: int) -> None:
        rec = self.records.get(node_id)
        if rec is not None and now < rec.last_timestamp:
            raise ClockRegressionError(node_id, now, rec.last_timestamp)

    def check_event(self, event: NodesSnapshot | NodeUpdate, now: int) -> None:
        """Raise ``ClockRegressionError`` if applying ``event`` at ``now`` would be rejected."""
        if isinstance(event, NodeUpdate):
            self._check(event.node.id, now)
        else:
            for _, node in event.iter_nodes():
                self._check(node.id, now)

    def _touch(self, now: int) -> None:
        if self.cycle_start is None:
            self.cycle_start = now

    # -- in-place operations --------------------------------------------

    def apply_snapshot(self, snap: NodesSnapshot, now: int) -> "SessionTable":
        self.check_event(snap, now)
        self._touch(now)
        records = self.records
        for mdevice_id, node in snap.iter_nodes():
            rec = records.get(node.id)
            if rec is None:
                records[node.id] = NodeRecord(node.id, mdevice_id, node.status, now, 0)
            else:
                records[node.id] = _transition(rec, node.status, mdevice_id, now)
        return self

    def apply_update(self, upd: NodeUpdate, now: int) -> "SessionTable":
        node = upd.node
        rec = self.records.get(node.id)
        if rec is None:
            self._touch(now)
            self.records[node.id] = NodeRecord(node.id, upd.mdevice_id, node.status, now, 0)
            return self
        if now < rec.last_timestamp:
            raise ClockRegressionError(node.id, now, rec.last_timestamp)
        self._touch(now)
        self.records[node.id] = _transition(rec, node.status, upd.mdevice_id, now)
        return self

    def apply(self, event: NodesSnapshot | NodeUpdate, now: int) -> "SessionTable":
        if isinstance(event, NodeUpdate):
            return self.apply_update(event, now)
        return self.apply_snapshot(event, now)

    def credit_elapsed(self, now: int) -> "SessionTable":
        for rec in self.records.values():
            if rec.status == CONNECTED and now < rec.last_timestamp:
                raise ClockRegressionError(rec.node_id, now, rec.last_timestamp)
        for node_id, rec in self.records.items():
            if rec.status == CONNECTED:
                self.records[node_id] = NodeRecord(
                    node_id, rec.mdevice_id, CONNECTED, now, rec.accumulated_ms + (now - rec.last_timestamp)
                )
        return self

    # -- queries ----------------------------------------------------------

    def connectivity_of(self, node_id: str, now: int) -> int:
        rec = self[node_id]
        if rec.status == CONNECTED:
            if now < rec.last_timestamp:
                raise ClockRegressionError(node_id, now, rec.last_timestamp)
            return rec.accumulated_ms + (now - rec.last_timestamp)
        return rec.accumulated_ms

    def to_obj(self) -> dict:
        return {
            "cycleStart": self.cycle_start,
            "nodes": [rec.to_obj() for rec in self.records.values()],
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "SessionTable":
        recs = (NodeRecord.from_obj(o) for o in obj["nodes"])
        return cls({r.node_id: r for r in recs}, obj["cycleStart"])


def apply_snapshot(table: SessionTable, snap: NodesSnapshot, now: int) -> SessionTable:
    return table.copy().apply_snapshot(snap, now)


def apply_update(table: SessionTable, upd: NodeUpdate, now: int) -> SessionTable:
    return table.copy().apply_update(upd, now)


def credit_elapsed(table: SessionTable, now: int) -> SessionTable:
    return table.copy().credit_elapsed(now)


def connectivity_of(table: SessionTable, node_id: str, now: int) -> int:
    return table.connectivity_of(node_id, now)
