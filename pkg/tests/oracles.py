"""Independent reference implementations used only by tests.

None of these import the code paths they check.
"""

from __future__ import annotations

from collections import defaultdict

from edgehub.protocol import NodesSnapshot, NodeStatus, NodeUpdate


def hand_serialize_update(mdevice_id: str, node_id: str, status: str) -> str:
    return (
        '{"event":"NodesUpdate","data":{"mdeviceId":"' + mdevice_id + '","node":{"id":"'
        + node_id + '","status":"' + status + '"}}}'
    )


def hand_serialize_snapshot(mdevices: list[tuple[str, list[tuple[str, str]]]]) -> str:
    parts = []
    for gw, nodes in mdevices:
        inner = ",".join('{"id":"' + n + '","status":"' + s + '"}' for n, s in nodes)
        parts.append('{"mdeviceId":"' + gw + '","Nodes":[' + inner + "]}")
    return '{"event":"Nodes","data":{"data":[' + ",".join(parts) + "]}}"


def hand_csv(rows: list[tuple[str, int]]) -> bytes:
    out = "NodeID,connectionTime\n"
    for node, ms in sorted(rows):
        out += node + "," + str(ms) + "\n"
    return out.encode()


def _assertions(events):
    """(ts, node, status) status assertions carried by a list of (ts, event)."""
    for ts, ev in events:
        if isinstance(ev, NodesSnapshot):
            for md in ev.mdevices:
                for n in md.nodes:
                    yield ts, n.id, n.status
        elif isinstance(ev, NodeUpdate):
            yield ts, ev.node.id, ev.node.status


def intervals(events, until: int) -> dict[str, list[tuple[int, int]]]:
    """Connected [start, end) intervals per node, open intervals closed at ``until``."""
    since: dict[str, int | None] = {}
    out: dict[str, list[tuple[int, int]]] = defaultdict(list)
    for ts, node, status in _assertions(events):
        out[node]
        if status == NodeStatus.CONNECTED:
            if since.get(node) is None:
                since[node] = ts
        else:
            if since.get(node) is not None:
                out[node].append((since[node], ts))
            since[node] = None
    for node, s in since.items():
        if s is not None:
            out[node].append((s, until))
    return dict(out)


def connected_ms(events, until: int, lo: int = 0) -> dict[str, int]:
    """Interval sweep: connected time per node within [lo, until)."""
    return {
        node: sum(max(0, min(b, until) - max(a, lo)) for a, b in spans)
        for node, spans in intervals(events, until).items()
    }


def sweep_ms(events, until: int, lo: int = 0) -> dict[str, int]:
    """1 ms brute force: count every millisecond in [lo, until) a node is connected."""
    changes = defaultdict(list)
    nodes = set()
    for ts, node, status in _assertions(events):
        changes[ts].append((node, status))
        nodes.add(node)
    state = {}
    totals = dict.fromkeys(nodes, 0)
    for t in range(0, until):
        for node, status in changes.get(t, ()):
            state[node] = status
        if t >= lo:
            for node, status in state.items():
                if status == NodeStatus.CONNECTED:
                    totals[node] += 1
    return totals


def sliding_window_flags(readings, breaches, window: int = 3) -> list[tuple[str, str, tuple, int]]:
    """Flags as (device, kind, window values, raisedAt).

    A window of ``window`` consecutive breaching readings raises a flag unless
    the reading just before it also breaches (then the run was flagged already).
    """
    series = defaultdict(list)
    for r in readings:
        s = series[(r.device_id, r.kind)]
        if s and r.ts <= s[-1].ts:
            continue
        s.append(r)
    flags = []
    for (dev, kind), rs in series.items():
        hit = [breaches(r.kind, r.value) for r in rs]
        for i in range(window - 1, len(rs)):
            if all(hit[i - window + 1 : i + 1]) and (i - window < 0 or not hit[i - window]):
                values = tuple((r.ts, r.value) for r in rs[i - window + 1 : i + 1])
                flags.append((dev, kind.value, values, rs[i].ts))
    return sorted(flags, key=lambda f: (f[3], f[0], f[1]))
