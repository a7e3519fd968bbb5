"""Gateway wire protocol and telemetry reading schema.

Two gateway events travel over the stream, one JSON text object per frame:

    {"event":"Nodes","data":{"data":[{"mdeviceId":"gw-1","Nodes":[{"id":"AA:BB:CC:DD:EE:01","status":"connected"}]}]}}
    {"event":"NodesUpdate","data":{"mdeviceId":"gw-1","node":{"id":"AA:BB:CC:DD:EE:01","status":"disconnected"}}}

Encoding is canonical (compact separators, fixed key order) so the same event
always produces the same bytes. Decoding ignores unknown fields and raises a
:class:`ProtocolError` subclass for every failure, whatever the input.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass
from typing import Any, Union

MAC_RE = re.compile(r"^[0-9A-F]{2}(?::[0-9A-F]{2}){5}$")

EVENT_NODES = "Nodes"
EVENT_NODES_UPDATE = "NodesUpdate"


class ProtocolError(Exception):
    """Base class for every codec failure."""

    code = "protocol_error"


class ParseError(ProtocolError):
    code = "parse_error"


class UnsupportedEventError(ProtocolError):
    code = "unsupported_event"

    def __init__(self, name: object):
        super().__init__(f"unsupported event {name!r}")
        self.name = name


class ValidationError(ProtocolError):
    code = "validation_error"

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class EncodeError(ProtocolError):
    code = "encode_error"

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class NodeStatus(str, enum.Enum):
    CONNECTED = "connected"
    DISCONNECTED = "disconnected"


class ReadingKind(str, enum.Enum):
    TEMPERATURE = "temperature"
    OXYGEN_LEVEL = "oxygen_level"
    HEART_RATE = "heart_rate"


UNITS = {
    ReadingKind.TEMPERATURE: "celsius",
    ReadingKind.OXYGEN_LEVEL: "percent",
    ReadingKind.HEART_RATE: "bpm",
}

# Plausibility bounds, inclusive. Readings outside are rejected.
BOUNDS = {
    ReadingKind.TEMPERATURE: (25.0, 45.0),
    ReadingKind.OXYGEN_LEVEL: (50.0, 100.0),
    ReadingKind.HEART_RATE: (20.0, 250.0),
}


def is_mac(value: object) -> bool:
    return isinstance(value, str) and MAC_RE.match(value) is not None


def normalize_mac(value: str) -> str:
    return value.upper()


@dataclass(frozen=True)
class NodeDescriptor:
    id: str
    status: NodeStatus


@dataclass(frozen=True)
class MDevice:
    mdevice_id: str
    nodes: tuple[NodeDescriptor, ...] = ()


@dataclass(frozen=True)
class NodesSnapshot:
    mdevices: tuple[MDevice, ...] = ()

    def iter_nodes(self):
        for md in self.mdevices:
            for node in md.nodes:
                yield md.mdevice_id, node


@dataclass(frozen=True)
class NodeUpdate:
    mdevice_id: str
    node: NodeDescriptor


GatewayEvent = Union[NodesSnapshot, NodeUpdate]


@dataclass(frozen=True)
class TelemetryReading:
    device_id: str
    kind: ReadingKind
    value: float
    unit: str
    ts: int


@dataclass(frozen=True)
class Violation:
    field: str
    code: str
    message: str


# --------------------------------------------------------------------------
# encoding


_ENCODER = json.JSONEncoder(separators=(",", ":"), ensure_ascii=False, allow_nan=False)
_quote = json.encoder.encode_basestring


def _dumps(obj: Any) -> str:
    return _ENCODER.encode(obj)


def _check_node(node: NodeDescriptor, where: str) -> None:
    if not is_mac(node.id):
        raise EncodeError(f"{where}.id", f"not an uppercase MAC address: {node.id!r}")
    if not isinstance(node.status, NodeStatus):
        raise EncodeError(f"{where}.status", f"not a NodeStatus: {node.status!r}")


def _check_mdevice_id(value: object, where: str) -> None:
    if not isinstance(value, str) or not value:
        raise EncodeError(where, "gateway id must be a non-empty string")


def _node_obj(node: NodeDescriptor) -> dict:
    return {"id": node.id, "status": node.status.value}


def event_to_obj(event: GatewayEvent) -> dict:
    """Validated wire object for ``event`` (the dict that :func:`encode_event` serializes)."""
    if isinstance(event, NodeUpdate):
        _check_mdevice_id(event.mdevice_id, "data.mdeviceId")
        _check_node(event.node, "data.node")
        return {
            "event": EVENT_NODES_UPDATE,
            "data": {"mdeviceId": event.mdevice_id, "node": _node_obj(event.node)},
        }
    if isinstance(event, NodesSnapshot):
        seen: set[str] = set()
        mdevices = []
        for i, md in enumerate(event.mdevices):
            _check_mdevice_id(md.mdevice_id, f"data.data[{i}].mdeviceId")
            nodes = []
            for j, node in enumerate(md.nodes):
                where = f"data.data[{i}].Nodes[{j}]"
                _check_node(node, where)
                if node.id in seen:
                    raise EncodeError(f"{where}.id", f"duplicate node id {node.id}")
                seen.add(node.id)
                nodes.append(_node_obj(node))
            mdevices.append({"mdeviceId": md.mdevice_id, "Nodes": nodes})
        return {"event": EVENT_NODES, "data": {"data": mdevices}}
    raise EncodeError("event", f"not a gateway event: {type(event).__name__}")


def _node_text(node: NodeDescriptor) -> str:
    # ids are checked MACs and statuses enum literals: nothing to escape
    return '{"id":"' + node.id + '","status":"' + node.status.value + '"}'


def encode_event(event: GatewayEvent) -> str:
    """Canonical wire text for ``event``.

    Same bytes as serializing :func:`event_to_obj` compactly; built directly
    because this sits on the per-event hot path (wire and log).
    """
    event_to_obj(event)  # validation only
    if isinstance(event, NodeUpdate):
        return (
            '{"event":"NodesUpdate","data":{"mdeviceId":' + _quote(event.mdevice_id)
            + ',"node":' + _node_text(event.node) + "}}"
        )
    parts = [
        '{"mdeviceId":' + _quote(md.mdevice_id) + ',"Nodes":[' + ",".join(map(_node_text, md.nodes)) + "]}"
        for md in event.mdevices
    ]
    return '{"event":"Nodes","data":{"data":[' + ",".join(parts) + "]}}"


# --------------------------------------------------------------------------
# decoding


def _loads(text: str | bytes) -> Any:
    if isinstance(text, (bytes, bytearray, memoryview)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"invalid UTF-8: {exc}") from None
    if not isinstance(text, str):
        raise ParseError(f"expected text, got {type(text).__name__}")
    try:
        return json.loads(text)
    except (ValueError, RecursionError) as exc:
        raise ParseError(str(exc)) from None


def _require(obj: Any, key: str, where: str) -> Any:
    if not isinstance(obj, dict):
        raise ValidationError(where, "expected an object")
    if key not in obj:
        raise ValidationError(f"{where}.{key}" if where else key, "missing required field")
    return obj[key]


def _mdevice_id(value: Any, where: str) -> str:
    if not isinstance(value, str) or not value:
        raise ValidationError(where, "gateway id must be a non-empty string")
    return value


def _node(obj: Any, where: str) -> NodeDescriptor:
    raw_id = _require(obj, "id", where)
    raw_status = _require(obj, "status", where)
    if not isinstance(raw_id, str) or not is_mac(raw_id.upper()):
        raise ValidationError(f"{where}.id", f"not a MAC address: {raw_id!r}")
    try:
        status = NodeStatus(raw_status)
    except ValueError:
        raise ValidationError(f"{where}.status", f"unknown status {raw_status!r}") from None
    return NodeDescriptor(normalize_mac(raw_id), status)


def event_from_obj(obj: Any) -> GatewayEvent:
    name = _require(obj, "event", "")
    data = _require(obj, "data", "")
    if name == EVENT_NODES_UPDATE:
        mdevice_id = _mdevice_id(_require(data, "mdeviceId", "data"), "data.mdeviceId")
        return NodeUpdate(mdevice_id, _node(_require(data, "node", "data"), "data.node"))
    if name == EVENT_NODES:
        raw_mdevices = _require(data, "data", "data")
        if not isinstance(raw_mdevices, list):
            raise ValidationError("data.data", "expected a list")
        seen: set[str] = set()
        mdevices = []
        for i, raw_md in enumerate(raw_mdevices):
            where = f"data.data[{i}]"
            mdevice_id = _mdevice_id(_require(raw_md, "mdeviceId", where), f"{where}.mdeviceId")
            raw_nodes = _require(raw_md, "Nodes", where)
            if not isinstance(raw_nodes, list):
                raise ValidationError(f"{where}.Nodes", "expected a list")
            nodes = []
            for j, raw_node in enumerate(raw_nodes):
                node = _node(raw_node, f"{where}.Nodes[{j}]")
                if node.id in seen:
                    raise ValidationError(f"{where}.Nodes[{j}].id", f"duplicate node id {node.id}")
                seen.add(node.id)
                nodes.append(node)
            mdevices.append(MDevice(mdevice_id, tuple(nodes)))
        return NodesSnapshot(tuple(mdevices))
    raise UnsupportedEventError(name)


def decode_event(text: str | bytes) -> GatewayEvent:
    """Parse one wire frame into a typed gateway event.

    Raises :class:`ParseError` for text that is not JSON,
    :class:`UnsupportedEventError` for event names other than ``Nodes`` and
    ``NodesUpdate``, and :class:`ValidationError` for bad ids, statuses or
    missing fields. Lowercase MAC addresses are accepted and uppercased.
    """
    return event_from_obj(_loads(text))


# --------------------------------------------------------------------------
# telemetry readings


def validate_reading(r: TelemetryReading) -> list[Violation]:
    """Every invariant ``r`` breaks; an empty list means the reading is valid."""
    out: list[Violation] = []
    if not is_mac(r.device_id):
        out.append(Violation("deviceId", "bad_device_id", f"not a MAC address: {r.device_id!r}"))
    try:
        kind = ReadingKind(r.kind)
    except ValueError:
        out.append(Violation("kind", "unknown_kind", f"unknown kind {r.kind!r}"))
        kind = None
    finite = (
        isinstance(r.value, (int, float))
        and not isinstance(r.value, bool)
        and math.isfinite(r.value)
    )
    if not finite:
        out.append(Violation("value", "non_finite", f"value must be a finite number: {r.value!r}"))
    if kind is not None:
        if r.unit != UNITS[kind]:
            out.append(
                Violation("unit", "unit_mismatch", f"{kind.value} must use {UNITS[kind]!r}, got {r.unit!r}")
            )
        lo, hi = BOUNDS[kind]
        if finite and not lo <= r.value <= hi:
            out.append(
                Violation("value", "out_of_range", f"{kind.value} {r.value} outside [{lo:g}, {hi:g}]")
            )
    if not isinstance(r.ts, int) or isinstance(r.ts, bool) or r.ts < 0:
        out.append(Violation("ts", "bad_timestamp", f"ts must be a non-negative integer: {r.ts!r}"))
    return out


def reading_to_obj(r: TelemetryReading) -> dict:
    kind = r.kind.value if isinstance(r.kind, ReadingKind) else r.kind
    return {"deviceId": r.device_id, "kind": kind, "value": r.value, "unit": r.unit, "ts": r.ts}


def encode_reading(r: TelemetryReading) -> str:
    violations = validate_reading(r)
    if violations:
        raise EncodeError(violations[0].field, violations[0].message)
    return _dumps(reading_to_obj(r))


def reading_from_obj(obj: Any) -> TelemetryReading:
    """Structural decode only; plausibility is left to :func:`validate_reading`."""
    device_id = _require(obj, "deviceId", "")
    raw_kind = _require(obj, "kind", "")
    value = _require(obj, "value", "")
    unit = _require(obj, "unit", "")
    ts = _require(obj, "ts", "")
    if not isinstance(device_id, str):
        raise ValidationError("deviceId", "expected a string")
    try:
        kind = ReadingKind(raw_kind)
    except ValueError:
        raise ValidationError("kind", f"unknown kind {raw_kind!r}") from None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError("value", "expected a number")
    if not isinstance(unit, str):
        raise ValidationError("unit", "expected a string")
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise ValidationError("ts", "expected an integer")
    if is_mac(device_id.upper()):
        device_id = normalize_mac(device_id)
    return TelemetryReading(device_id, kind, float(value), unit, ts)


def decode_reading(text: str | bytes) -> TelemetryReading:
    return reading_from_obj(_loads(text))
