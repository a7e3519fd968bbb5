"""Deterministic synthetic fleet of gateways and medical devices.

The timeline is a pure function of :class:`SimParams`. :func:`ground_truth`
recomputes connected time per node per cycle by an explicit interval sweep and
is the oracle the hub is checked against; it shares no code with the session
table.
"""

from __future__ import annotations

import heapq
import math
import random
import time
from dataclasses import dataclass, field
from typing import Callable, Union

from .protocol import (
    MDevice,
    NodeDescriptor,
    NodesSnapshot,
    NodeStatus,
    NodeUpdate,
    ReadingKind,
    TelemetryReading,
    UNITS,
    encode_event,
    reading_to_obj,
)

TimelineEvent = Union[NodesSnapshot, NodeUpdate, TelemetryReading]

DEFAULT_START_MS = 1_700_000_000_000


class SimParamsError(ValueError):
    pass


@dataclass(frozen=True)
class SimParams:
    """Fleet shape and churn model.

    ``mean_disconnected_ms=math.inf`` disables disconnects: every node stays
    connected for the whole run.
    """

    seed: int = 42
    gateways: int = 3
    nodes_per_gateway: int = 10
    duration_ms: int = 60_000
    mean_connected_ms: float = 8_000
    mean_disconnected_ms: float = 4_000
    reading_period_ms: int = 2_000
    fever_probability: float = 0.2
    start_ms: int = DEFAULT_START_MS

    def validate(self) -> "SimParams":
        for name in ("duration_ms", "mean_connected_ms", "mean_disconnected_ms", "reading_period_ms"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
                raise SimParamsError(f"{name} must be > 0, got {v!r}")
        for name in ("gateways", "nodes_per_gateway"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise SimParamsError(f"{name} must be an integer >= 1, got {v!r}")
        if not 0.0 <= self.fever_probability <= 1.0:
            raise SimParamsError(f"fever_probability must be in [0, 1], got {self.fever_probability!r}")
        if not isinstance(self.duration_ms, int) or not isinstance(self.reading_period_ms, int):
            raise SimParamsError("duration_ms and reading_period_ms must be integers")
        if not isinstance(self.start_ms, int) or self.start_ms < 0:
            raise SimParamsError("start_ms must be a non-negative integer")
        return self


@dataclass(frozen=True)
class TimelineEntry:
    ts: int
    event: TimelineEvent


@dataclass(frozen=True)
class Timeline:
    start_ms: int
    end_ms: int
    entries: tuple[TimelineEntry, ...]
    nodes: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def churn_events(self) -> int:
        return sum(isinstance(e.event, NodeUpdate) for e in self.entries)

    def readings(self) -> list[TelemetryReading]:
        return [e.event for e in self.entries if isinstance(e.event, TelemetryReading)]

    def boundaries(self, interval_ms: int) -> list[int]:
        """Cycle boundaries starting at ``start_ms`` and covering the run."""
        n = -(-(self.end_ms - self.start_ms) // interval_ms)
        return [self.start_ms + k * interval_ms for k in range(n + 1)]


def gateway_id(g: int) -> str:
    return f"gw-{g + 1}"


def node_mac(g: int, n: int) -> str:
    return f"02:ED:6E:{g:02X}:{n >> 8:02X}:{n & 0xFF:02X}"


def _dwell(rng: random.Random, mean: float) -> float:
    return math.inf if math.isinf(mean) else rng.expovariate(1.0 / mean)


def _vitals(rng: random.Random, node: str, ts: int, fever: bool) -> list[TelemetryReading]:
    if fever:
        temp = round(rng.uniform(38.3, 39.5), 1)
    else:
        temp = round(min(45.0, max(25.0, rng.gauss(36.8, 0.3))), 1)
    oxygen = round(min(100.0, max(50.0, rng.gauss(97.0, 1.0))), 1)
    heart = float(round(min(250.0, max(20.0, rng.gauss(70.0, 10.0)))))
    return [
        TelemetryReading(node, ReadingKind.TEMPERATURE, temp, UNITS[ReadingKind.TEMPERATURE], ts),
        TelemetryReading(node, ReadingKind.OXYGEN_LEVEL, oxygen, UNITS[ReadingKind.OXYGEN_LEVEL], ts),
        TelemetryReading(node, ReadingKind.HEART_RATE, heart, UNITS[ReadingKind.HEART_RATE], ts),
    ]


def _node_stream(p: SimParams, g: int, n: int, initial: NodeStatus, rng: random.Random):
    """Churn and readings for one node, in time order, starting after the announce."""
    node = node_mac(g, n)
    gw = gateway_id(g)
    end = p.start_ms + p.duration_ms
    fever = rng.random() < p.fever_probability
    fever_first = rng.randint(0, 5)
    fever_last = fever_first + rng.randint(3, 6)
    n_readings = 0

    t = p.start_ms
    status = initial
    while True:
        if status == NodeStatus.CONNECTED:
            # an infinite disconnected mean means disconnects are switched off
            mean = math.inf if math.isinf(p.mean_disconnected_ms) else p.mean_connected_ms
        else:
            mean = p.mean_disconnected_ms
        dwell = _dwell(rng, mean)
        t_next = end if math.isinf(dwell) else min(end, t + int(round(dwell)))
        if status == NodeStatus.CONNECTED:
            # readings sit on the node's fixed sampling grid
            r = p.start_ms + -(-(t - p.start_ms) // p.reading_period_ms) * p.reading_period_ms
            while r < t_next:
                in_episode = fever and fever_first <= n_readings < fever_last
                yield from (TimelineEntry(r, x) for x in _vitals(rng, node, r, in_episode))
                n_readings += 1
                r += p.reading_period_ms
        if t_next >= end:
            return
        status = NodeStatus.DISCONNECTED if status == NodeStatus.CONNECTED else NodeStatus.CONNECTED
        yield TimelineEntry(t_next, NodeUpdate(gw, NodeDescriptor(node, status)))
        t = t_next


def _keyed(index: int, stream):
    for k, e in enumerate(stream):
        yield (e.ts, index, k), e


def generate_timeline(params: SimParams) -> Timeline:
    """Deterministic timeline for ``params``.

    Each gateway announces its nodes with a ``Nodes`` snapshot at the start.
    Nodes then alternate between connected and disconnected with exponential
    dwell times, reading vitals on a ``reading_period_ms`` grid while connected.
    A node picked with ``fever_probability`` runs 3 to 6 consecutive fever
    temperatures early in its reading sequence. All events fall strictly
    before ``start_ms + duration_ms``.
    """
    p = params.validate()
    mc, md = p.mean_connected_ms, p.mean_disconnected_ms
    p_connected = 1.0 if math.isinf(md) else (0.0 if math.isinf(mc) else mc / (mc + md))

    announces = []
    streams = []
    nodes = []
    for g in range(p.gateways):
        descriptors = []
        for n in range(p.nodes_per_gateway):
            rng = random.Random(f"{p.seed}/{g}/{n}")
            initial = NodeStatus.CONNECTED if rng.random() < p_connected else NodeStatus.DISCONNECTED
            descriptors.append(NodeDescriptor(node_mac(g, n), initial))
            nodes.append(node_mac(g, n))
            index = g * p.nodes_per_gateway + n
            streams.append(_keyed(index, _node_stream(p, g, n, initial, rng)))
        snap = NodesSnapshot((MDevice(gateway_id(g), tuple(descriptors)),))
        announces.append(TimelineEntry(p.start_ms, snap))

    merged = heapq.merge(*streams, key=lambda item: item[0])
    entries = tuple(announces) + tuple(e for _, e in merged)
    return Timeline(p.start_ms, p.start_ms + p.duration_ms, entries, tuple(nodes))


# --------------------------------------------------------------------------
# oracle


def connected_intervals(timeline: Timeline, end_ms: int | None = None) -> dict[str, list[tuple[int, int]]]:
    """Explicit [connect, disconnect) intervals per node; open ones close at ``end_ms``."""
    end = timeline.end_ms if end_ms is None else end_ms
    since: dict[str, int | None] = {}
    out: dict[str, list[tuple[int, int]]] = {}

    def assert_status(node: str, status: NodeStatus, ts: int) -> None:
        out.setdefault(node, [])
        start = since.get(node)
        if status == NodeStatus.CONNECTED and start is None:
            since[node] = ts
        elif status == NodeStatus.DISCONNECTED:
            if start is not None:
                out[node].append((start, ts))
            since[node] = None

    for e in timeline.entries:
        ev = e.event
        if isinstance(ev, NodesSnapshot):
            for _, node in ev.iter_nodes():
                assert_status(node.id, node.status, e.ts)
        elif isinstance(ev, NodeUpdate):
            assert_status(ev.node.id, ev.node.status, e.ts)
    for node, start in since.items():
        if start is not None:
            out[node].append((start, max(start, end)))
    return out


def ground_truth(timeline: Timeline, boundaries: list[int]) -> dict[str, list[int]]:
    """Connected ms per node for each cycle ``[boundaries[i], boundaries[i+1])``."""
    intervals = connected_intervals(timeline, boundaries[-1] if boundaries else None)
    cycles = list(zip(boundaries, boundaries[1:]))
    out = {}
    for node, spans in intervals.items():
        per_cycle = []
        for lo, hi in cycles:
            per_cycle.append(sum(max(0, min(b, hi) - max(a, lo)) for a, b in spans))
        out[node] = per_cycle
    return out


# --------------------------------------------------------------------------
# drivers


@dataclass
class RunReport:
    sent: int = 0
    acked: int = 0
    rejected: int = 0
    readings_sent: int = 0
    readings_accepted: int = 0
    readings_rejected: int = 0
    undelivered: list[int] = field(default_factory=list)
    errors: dict = field(default_factory=dict)

    def to_obj(self) -> dict:
        return {
            "sent": self.sent,
            "acked": self.acked,
            "rejected": self.rejected,
            "readings_sent": self.readings_sent,
            "readings_accepted": self.readings_accepted,
            "readings_rejected": self.readings_rejected,
            "undelivered": len(self.undelivered),
            "errors": dict(sorted(self.errors.items())),
        }


def drive(
    timeline: Timeline,
    hub,
    clock: str = "simulated",
    *,
    finish: bool = True,
    on_entry: Callable[[int, TimelineEntry], None] | None = None,
) -> RunReport:
    """Replay ``timeline`` into an in-process hub through its wire-level entry points.

    With ``clock="simulated"`` the hub must run on a :class:`SimClock`, which
    the driver moves to each entry's ts. With ``clock="realtime"`` the driver
    paces sends against the hub's own clock. ``finish`` advances to the end of
    the run so the last cycle closes.
    """
    report = RunReport()
    if clock == "simulated":
        advance = hub.clock.set
    elif clock == "realtime":
        offset = hub.clock() - timeline.start_ms

        def advance(ts: int) -> None:
            target = ts + offset
            while True:
                left = target - hub.clock()
                if left <= 0:
                    return
                if left > 2:
                    time.sleep((left - 1.5) / 1000)
    else:
        raise ValueError(f"unknown clock mode {clock!r}")

    for i, entry in enumerate(timeline.entries):
        if on_entry is not None:
            on_entry(i, entry)
        advance(entry.ts)
        ev = entry.event
        if isinstance(ev, TelemetryReading):
            report.readings_sent += 1
            status, body = hub.ingest_reading(reading_to_obj(ev))
            if status == 202:
                report.readings_accepted += 1
            else:
                report.readings_rejected += 1
        else:
            report.sent += 1
            ack = hub.handle_gateway_message(encode_event(ev))
            if ack.get("ok"):
                report.acked += 1
            else:
                report.rejected += 1
                report.errors[ack.get("error")] = report.errors.get(ack.get("error"), 0) + 1
    if finish and timeline.entries:
        advance(timeline.end_ms)
        hub.tick()
    return report


async def drive_remote(
    timeline: Timeline,
    gateway_url: str,
    rest_url: str | None,
    clock: str = "simulated",
    *,
    finish: bool = True,
) -> RunReport:
    """Replay ``timeline`` against a running hub service.

    One websocket connection per gateway; frames are sent in timeline order
    and each waits for its ack. Readings go to the REST endpoint. In
    simulated mode the driver moves the hub's clock through
    ``POST /api/v1/clock`` before each new timestamp. A lost connection marks
    the rest of the timeline undelivered.
    """
    import asyncio
    import json

    import httpx
    from websockets.asyncio.client import connect

    if clock == "simulated" and not rest_url:
        raise ValueError("simulated clock needs the hub's REST address")
    report = RunReport()
    sockets: dict[str, object] = {}
    http = httpx.AsyncClient(base_url=rest_url) if rest_url else None
    wall_start = time.monotonic()
    current = None

    async def set_clock(ts: int) -> None:
        nonlocal current
        if ts == current:
            return
        if clock == "simulated":
            resp = await http.post("/api/v1/clock", json={"now": ts})
            resp.raise_for_status()
        else:
            delay = (ts - timeline.start_ms) / 1000 - (time.monotonic() - wall_start)
            if delay > 0:
                await asyncio.sleep(delay)
        current = ts

    def gateway_of(ev) -> str:
        if isinstance(ev, NodeUpdate):
            return ev.mdevice_id
        return ev.mdevices[0].mdevice_id if ev.mdevices else "_"

    try:
        for i, entry in enumerate(timeline.entries):
            ev = entry.event
            try:
                await set_clock(entry.ts)
                if isinstance(ev, TelemetryReading):
                    if http is None:
                        continue
                    report.readings_sent += 1
                    resp = await http.post("/api/v1/telemetry", json=reading_to_obj(ev))
                    if resp.status_code == 202:
                        report.readings_accepted += 1
                    else:
                        report.readings_rejected += 1
                    continue
                gw = gateway_of(ev)
                ws = sockets.get(gw)
                if ws is None:
                    ws = sockets[gw] = await connect(gateway_url)
                report.sent += 1
                await ws.send(encode_event(ev))
                ack = json.loads(await ws.recv())
            except Exception as exc:  # any transport failure ends the run
                report.errors[type(exc).__name__] = report.errors.get(type(exc).__name__, 0) + 1
                report.undelivered = list(range(i, len(timeline.entries)))
                return report
            if ack.get("ok"):
                report.acked += 1
            else:
                report.rejected += 1
                report.errors[ack.get("error")] = report.errors.get(ack.get("error"), 0) + 1
        if finish and timeline.entries and clock == "simulated":
            await set_clock(timeline.end_ms)
    finally:
        for ws in sockets.values():
            await ws.close()
        if http is not None:
            await http.aclose()
    return report


def oracle_csvs(timeline: Timeline, boundaries: list[int]) -> dict[int, bytes]:
    """Ground truth rendered as the hub's CSV files, keyed by cycle end."""
    from .aggregate import ConnectivityRecord, render_csv

    truth = ground_truth(timeline, boundaries)
    out = {}
    for i, (lo, hi) in enumerate(zip(boundaries, boundaries[1:])):
        out[hi] = render_csv(ConnectivityRecord(node, ms[i], lo, hi) for node, ms in truth.items())
    return out

