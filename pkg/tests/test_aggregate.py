import io
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from edgehub.aggregate import (
    ConnectivityRecord,
    CsvWriteError,
    Replayer,
    Rule,
    TriageRules,
    TriageTracker,
    csv_name,
    flag_for_testing,
    process_data,
    read_csv,
    render_csv,
    replay_log,
    write_csv,
)
from edgehub.eventlog import Checkpoint, CycleEnd, LogCorruptionError, LogEntry, encode_entry
from edgehub.protocol import NodeDescriptor, NodeStatus, NodeUpdate, ReadingKind, TelemetryReading, UNITS
from edgehub.session import ClockRegressionError, NodeRecord, SessionTable

from . import oracles, strategies as S

C, D = NodeStatus.CONNECTED, NodeStatus.DISCONNECTED
A = "AA:BB:CC:DD:EE:01"


def test_full_cycle_connected():
    t = SessionTable({A: NodeRecord(A, "g", C, 0, 0)}, 0)
    [rec], t2 = process_data(t, 10_000)
    assert rec == ConnectivityRecord(A, 10_000, 0, 10_000)
    assert t2[A] == NodeRecord(A, "g", C, 10_000, 0)
    assert t2.cycle_start == 10_000
    assert t[A].accumulated_ms == 0 and t[A].last_timestamp == 0  # input untouched


def test_empty_table():
    records, t = process_data(SessionTable(), 5)
    assert records == [] and len(t) == 0


def test_two_cycles_conserve():
    t = SessionTable({A: NodeRecord(A, "g", C, 0, 0)}, 0)
    r1, t = process_data(t, 10_000)
    r2, t = process_data(t, 20_000)
    assert r1[0].connection_time_ms + r2[0].connection_time_ms == 20_000


def test_idempotent_at_fixed_instant():
    t = SessionTable({A: NodeRecord(A, "g", C, 0, 7), "AA:BB:CC:DD:EE:02": NodeRecord("AA:BB:CC:DD:EE:02", "g", D, 3, 9)}, 0)
    _, t = process_data(t, 100)
    again, _ = process_data(t, 100)
    assert [r.connection_time_ms for r in again] == [0, 0]


def test_process_data_clock_regression():
    t = SessionTable({A: NodeRecord(A, "g", D, 500, 0)}, 0)
    with pytest.raises(ClockRegressionError):
        process_data(t, 499)


def test_records_sorted_by_node():
    ids = ["FF:00:00:00:00:00", "00:00:00:00:00:01", "AA:00:00:00:00:00"]
    t = SessionTable({i: NodeRecord(i, "g", D, 0, 0) for i in ids}, 0)
    records, _ = process_data(t, 1)
    assert [r.node_id for r in records] == sorted(ids)


@given(S.event_sequences(), st.lists(st.integers(1, 400), max_size=6), st.integers(0, 300))
def test_conservation_across_resets(events, gaps, tail):
    """Per-node sum over any cycle partition equals the oracle total."""
    end = (events[-1][0] if events else 0) + tail
    cuts = []
    b = 0
    for g in gaps:
        b += g
        if b < end:
            cuts.append(b)
    cuts.append(end)
    t = SessionTable()
    totals: dict[str, int] = {}
    i = 0
    for cut in cuts:
        while i < len(events) and events[i][0] < cut:
            t.apply(events[i][1], events[i][0])
            i += 1
        records, t = process_data(t, cut)
        for r in records:
            assert 0 <= r.connection_time_ms
            totals[r.node_id] = totals.get(r.node_id, 0) + r.connection_time_ms
    while i < len(events):  # events exactly at `end`
        t.apply(events[i][1], events[i][0])
        i += 1
    expected = oracles.connected_ms(events, end)
    assert {n: totals.get(n, 0) for n in expected} == expected


# -- CSV ---------------------------------------------------------------


GOLDEN_RECORDS = [
    ConnectivityRecord("FF:FF:FF:FF:FF:FF", 1, 0, 86_400_000),
    ConnectivityRecord("AA:BB:CC:DD:EE:02", 123_456, 0, 86_400_000),
    ConnectivityRecord("02:00:00:00:00:01", 0, 0, 86_400_000),
    ConnectivityRecord("AA:BB:CC:DD:EE:01", 5000, 0, 86_400_000),
    ConnectivityRecord("0A:1B:2C:3D:4E:5F", 86_400_000, 0, 86_400_000),
]


def test_csv_golden(tmp_path, fixtures_dir):
    out = tmp_path / "x.csv"
    n = write_csv(GOLDEN_RECORDS, out)
    golden = (fixtures_dir / "connectivity_golden.csv").read_bytes()
    assert out.read_bytes() == golden
    assert n == len(golden)
    assert golden == oracles.hand_csv([(r.node_id, r.connection_time_ms) for r in GOLDEN_RECORDS])


def test_csv_header_only():
    buf = io.BytesIO()
    write_csv([], buf)
    assert buf.getvalue() == b"NodeID,connectionTime\n"


def test_csv_single_record():
    assert render_csv([ConnectivityRecord(A, 5000, 0, 9000)]) == b"NodeID,connectionTime\nAA:BB:CC:DD:EE:01,5000\n"


def test_csv_order_independent():
    shuffled = GOLDEN_RECORDS[:]
    random.Random(3).shuffle(shuffled)
    assert render_csv(shuffled) == render_csv(GOLDEN_RECORDS)


def test_csv_name():
    assert csv_name(1_700_000_010_000) == "connectivity-1700000010000.csv"


def test_read_csv_round_trip():
    data = render_csv(GOLDEN_RECORDS)
    assert read_csv(data) == {r.node_id: r.connection_time_ms for r in GOLDEN_RECORDS}


class FailingSink(io.RawIOBase):
    def __init__(self, fail_after):
        self.written = 0
        self.fail_after = fail_after

    def writable(self):
        return True

    def write(self, b):
        if self.written + len(b) > self.fail_after:
            raise OSError(28, "No space left on device")
        self.written += len(b)
        return len(b)


def test_csv_partial_write_position():
    with pytest.raises(CsvWriteError) as info:
        write_csv(GOLDEN_RECORDS, FailingSink(40))
    # header (22) + first row (20) would pass 40; only the header fits
    assert info.value.position == 22


# -- triage --------------------------------------------------------------


def temps(*values, dev=A, start=0):
    return [TelemetryReading(dev, ReadingKind.TEMPERATURE, v, "celsius", start + i * 1000) for i, v in enumerate(values)]


def test_fever_flag_carries_window():
    [flag] = flag_for_testing(temps(38.2, 38.4, 38.1))
    assert flag.rule == Rule.FEVER
    assert flag.triggering_values == ((0, 38.2), (1000, 38.4), (2000, 38.1))
    assert flag.raised_at == 2000


def test_broken_run_no_flag():
    assert flag_for_testing(temps(38.2, 37.0, 38.4)) == []


def test_single_reading_no_flag():
    assert flag_for_testing(temps(39.9)) == []


def test_one_flag_per_run_until_reset():
    flags = flag_for_testing(temps(38, 38, 38, 38, 38, 37, 38, 38, 38))
    assert [f.raised_at for f in flags] == [2000, 8000]


def test_threshold_edges():
    rules = TriageRules()
    assert rules.breaches(ReadingKind.TEMPERATURE, 38.0)
    assert not rules.breaches(ReadingKind.TEMPERATURE, 37.99)
    assert rules.breaches(ReadingKind.OXYGEN_LEVEL, 91.9)
    assert not rules.breaches(ReadingKind.OXYGEN_LEVEL, 92.0)
    assert rules.breaches(ReadingKind.HEART_RATE, 120.1)
    assert not rules.breaches(ReadingKind.HEART_RATE, 120.0)


def test_kinds_tracked_separately():
    hr = [TelemetryReading(A, ReadingKind.HEART_RATE, 130.0, "bpm", i * 1000 + 1) for i in range(3)]
    stream = sorted(temps(39, 39) + hr + temps(39, start=5000), key=lambda r: r.ts)
    flags = flag_for_testing(stream)
    # heart-rate readings in between do not break the temperature run
    assert [(f.rule, f.raised_at) for f in flags] == [(Rule.TACHYCARDIA, 2001), (Rule.FEVER, 5000)]


def test_resent_reading_ignored():
    rs = temps(39, 39)
    assert flag_for_testing(rs + rs[-1:]) == []


def test_tracker_state_round_trip():
    t = TriageTracker()
    for r in temps(39, 39):
        t.feed(r)
    t2 = TriageTracker.from_obj(t.to_obj())
    assert t2.feed(temps(39, start=2000)[0]) is not None


def random_stream(rng):
    devs = ["AA:BB:CC:DD:EE:0" + str(i) for i in range(3)]
    out = []
    for ts in range(rng.randint(0, 60)):
        for dev in devs:
            kind = rng.choice(list(ReadingKind))
            value = {
                ReadingKind.TEMPERATURE: rng.choice([36.5, 38.0, 39.0]),
                ReadingKind.OXYGEN_LEVEL: rng.choice([97.0, 91.0]),
                ReadingKind.HEART_RATE: rng.choice([70.0, 121.0]),
            }[kind]
            out.append(TelemetryReading(dev, kind, value, UNITS[kind], max(0, ts * 1000 + rng.choice([0, 0, -1000]))))
    return out


@given(st.integers(0, 10**6))
def test_flags_match_sliding_window_oracle(seed):
    stream = random_stream(random.Random(seed))
    rules = TriageRules()
    got = [(f.device_id, {"fever": "temperature", "low_oxygen": "oxygen_level", "tachycardia": "heart_rate"}[f.rule.value], f.triggering_values, f.raised_at) for f in flag_for_testing(stream, rules)]
    expected = oracles.sliding_window_flags(stream, rules.breaches)
    assert sorted(got, key=lambda f: (f[3], f[0], f[1])) == expected


# -- replay -------------------------------------------------------------


def upd(status, node=A):
    return NodeUpdate("gw-1", NodeDescriptor(node, status))


def test_replay_empty():
    assert replay_log([]) == SessionTable()


def test_replay_corruption_names_line():
    entries = [LogEntry(i * 10, i + 1, upd(C if i % 2 == 0 else D)) for i in range(6)]
    entries.append(LogEntry(5, 7, upd(C)))
    with pytest.raises(LogCorruptionError) as info:
        replay_log([encode_entry(e) for e in entries])
    assert info.value.line == 7


@given(S.event_sequences())
def test_replay_equals_live(events):
    live = SessionTable()
    lines = []
    for seq, (ts, ev) in enumerate(events, 1):
        live.apply(ev, ts)
        lines.append(encode_entry(LogEntry(ts, seq, ev)))
    assert replay_log(lines) == live


def test_replayer_checkpoint_and_cycle_end():
    t = SessionTable({A: NodeRecord(A, "g", C, 0, 0)}, 0)
    entries = [
        LogEntry(0, 1, Checkpoint(t.to_obj(), TriageTracker().to_obj())),
        *[LogEntry(1000 * i, i + 1, r) for i, r in enumerate(temps(39, 39, 39, start=0), 1)],
        LogEntry(5000, 5, upd(D)),
        LogEntry(10_000, 6, CycleEnd(0, 10_000)),
    ]
    rep = Replayer().run(entries)
    assert rep.closed
    [cycle] = rep.cycles
    assert cycle.records == [ConnectivityRecord(A, 5000, 0, 10_000)]
    assert len(cycle.flags) == 1
    assert rep.table.cycle_start == 10_000
