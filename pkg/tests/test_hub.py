import errno
import json

import pytest

from edgehub.aggregate import Replayer, read_csv, replay_log
from edgehub.config import DAY_MS, ConfigError, HubConfig, Mode, SimClock, parse_duration
from edgehub.eventlog import DiskFullError, log_files, read_log
from edgehub.hub import Hub
from edgehub.protocol import NodeDescriptor, NodeStatus, NodeUpdate, encode_event
from edgehub.sync import BatchKind

from .oracles import hand_serialize_snapshot, hand_serialize_update

A, B = "AA:BB:CC:DD:EE:01", "AA:BB:CC:DD:EE:02"


def frame(status, node=A):
    return hand_serialize_update("gw-1", node, status)


def reading(value=36.8, ts=0, kind="temperature", unit="celsius", dev=A):
    return {"deviceId": dev, "kind": kind, "value": value, "unit": unit, "ts": ts}


def log_lines(hub):
    return list(read_log(hub.log.path))


def test_valid_update_acked_logged_applied(make_hub):
    hub = make_hub()
    n = len(log_lines(hub))
    assert hub.handle_gateway_message(frame("connected")) == {"ok": True}
    assert len(log_lines(hub)) == n + 1
    assert hub.table[A].status == NodeStatus.CONNECTED
    assert replay_log(hub.log.path) == hub.table


@pytest.mark.parametrize("text", ["not json", '{"event":"Hello","data":{}}', frame("sleeping")])
def test_malformed_frame_rejected_without_side_effects(make_hub, text):
    hub = make_hub()
    hub.handle_gateway_message(frame("connected"))
    before, lines = hub.table.copy(), log_lines(hub)
    ack = hub.handle_gateway_message(text)
    assert ack["ok"] is False and ack["error"]
    assert hub.table == before and log_lines(hub) == lines
    assert hub.health()["rejected_messages"] == 1


def test_raw_mode_enqueues(make_hub):
    hub = make_hub(mode="raw")
    hub.handle_gateway_message(frame("connected"))
    assert len(hub.queue) == 1
    [batch] = hub.queue.batches()
    assert batch.kind == BatchKind.RAW_EVENTS


def test_aggregated_mode_does_not_enqueue_events(make_hub):
    hub = make_hub()
    hub.handle_gateway_message(frame("connected"))
    assert len(hub.queue) == 0


def test_reading_accept_and_reject(make_hub):
    hub = make_hub()
    assert hub.ingest_reading(json.dumps(reading())) == (202, {"accepted": True})
    status, body = hub.ingest_reading(reading(60.0))
    assert status == 422
    assert body["violations"][0]["code"] == "out_of_range"
    status, body = hub.ingest_reading(b"{")
    assert status == 422 and body["violations"][0]["code"] == "malformed"
    status, body = hub.ingest_reading({"deviceId": A})
    assert status == 422


def test_fever_readings_flag_in_next_cycle(make_hub):
    hub = make_hub(start=0)
    for i, v in enumerate([38.5, 38.9, 39.1]):
        hub.clock.set(i * 1000)
        assert hub.ingest_reading(reading(v, ts=i * 1000))[0] == 202
    hub.clock.set(10_000)
    [cycle] = hub.tick()
    [flag] = cycle.flags
    assert flag.device_id == A and flag.rule.value == "fever"
    kinds = [b.kind for b in hub.queue.batches()]
    assert BatchKind.TRIAGE_FLAGS in kinds


def test_schedule_produces_one_csv_per_interval(make_hub):
    hub = make_hub(start=0, interval_ms=10_000)
    hub.handle_gateway_message(frame("connected"))
    hub.clock.set(30_000)
    cycles = hub.tick()
    assert [c.cycle.cycle_end for c in cycles] == [10_000, 20_000, 30_000]
    assert len(list(hub.config.csv_dir.iterdir())) == 3
    assert all(read_csv(c.csv_path.read_bytes()) == {A: 10_000} for c in cycles)


def test_interval_override_5s(make_hub):
    hub = make_hub(start=0, interval_ms=parse_duration("5s"))
    hub.clock.set(20_000)
    assert len(hub.tick()) == 4


def test_default_interval_is_24h(tmp_path):
    assert HubConfig(tmp_path).interval_ms == DAY_MS == 86_400_000


def test_event_at_boundary_belongs_to_next_cycle(make_hub):
    hub = make_hub(start=0, interval_ms=10_000)
    hub.handle_gateway_message(frame("connected"))
    hub.clock.set(10_000)
    hub.handle_gateway_message(frame("disconnected"))
    hub.clock.set(20_000)
    hub.tick()
    assert [read_csv(c.csv_path.read_bytes())[A] for c in hub.history] == [10_000, 0]


def test_cycle_log_rotation_and_replay(make_hub):
    hub = make_hub(start=0, interval_ms=10_000)
    hub.handle_gateway_message(hand_serialize_snapshot([("gw-1", [(A, "connected"), (B, "disconnected")])]))
    hub.clock.set(4000)
    hub.handle_gateway_message(frame("disconnected"))
    hub.clock.set(10_000)
    [cycle] = hub.tick()
    files = log_files(hub.config.log_dir)
    assert [p.name for p in files] == ["events-0.jsonl", "events-10000.jsonl"]
    rep = Replayer().run(files[0])
    assert rep.closed and rep.cycles[0].records == cycle.records
    # the new file replays on its own to the live table
    assert replay_log(files[1]) == hub.table


def test_clock_regression_nack(make_hub):
    clock = SimClock(5000)
    hub = make_hub(clock=clock)
    hub.handle_gateway_message(frame("connected"))
    clock.now = 4000  # a faulty clock; SimClock.set refuses this
    ack = hub.handle_gateway_message(frame("disconnected"))
    assert ack == {"ok": False, "error": "clock_regression"}
    assert hub.table[A].status == NodeStatus.CONNECTED


def test_disk_full_enters_degraded(make_hub, monkeypatch):
    hub = make_hub()

    def full(entry):
        raise DiskFullError("No space left on device")

    monkeypatch.setattr(hub.log, "append", full)
    assert hub.handle_gateway_message(frame("connected")) == {"ok": False, "error": "degraded"}
    assert hub.degraded and hub.health()["status"] == "degraded"
    assert hub.handle_gateway_message(frame("connected")) == {"ok": False, "error": "degraded"}
    assert hub.ingest_reading(reading())[0] == 503
    assert A not in hub.table


def test_csv_failure_retried_then_records_enqueued(make_hub, monkeypatch):
    import edgehub.hub as hub_mod
    from edgehub.aggregate import CsvWriteError

    hub = make_hub(start=0, mode="raw")
    hub.handle_gateway_message(frame("connected"))
    calls = []

    def failing(records, sink):
        calls.append(sink)
        raise CsvWriteError(0, OSError(errno.EIO, "io"))

    monkeypatch.setattr(hub_mod, "write_csv", failing)
    hub.clock.set(10_000)
    [cycle] = hub.tick()
    assert len(calls) == 2 and not cycle.csv_ok
    assert hub.csv_failures == 1
    kinds = [b.kind for b in hub.queue.batches()]
    assert kinds.count(BatchKind.CONNECTIVITY_RECORDS) == 1


def test_crash_after_append_recovered(tmp_path):
    class Crash(Exception):
        pass

    def hook(stage):
        if stage == "appended":
            raise Crash

    clock = SimClock(0)
    hub = Hub(HubConfig(tmp_path, interval_ms=10_000), clock=clock, crash_hook=hook).start()
    clock.set(1000)
    with pytest.raises(Crash):
        hub.handle_gateway_message(frame("connected"))
    assert A not in hub.table
    hub.close()
    hub2 = Hub(HubConfig(tmp_path, interval_ms=10_000), clock=clock).start()
    assert hub2.table[A].last_timestamp == 1000
    clock.set(10_000)
    [cycle] = hub2.tick()
    assert read_csv(cycle.csv_path.read_bytes()) == {A: 9000}
    hub2.close()


def test_restart_finishes_logged_cycle(tmp_path):
    class Crash(Exception):
        pass

    def hook(stage):
        if stage == "cycle_logged":
            raise Crash

    clock = SimClock(0)
    hub = Hub(HubConfig(tmp_path, interval_ms=10_000), clock=clock, crash_hook=hook).start()
    hub.handle_gateway_message(frame("connected"))
    clock.set(10_000)
    with pytest.raises(Crash):
        hub.tick()
    hub.close()
    hub2 = Hub(HubConfig(tmp_path, interval_ms=10_000), clock=clock).start()
    assert (tmp_path / "csv" / "connectivity-10000.csv").read_bytes() == b"NodeID,connectionTime\nAA:BB:CC:DD:EE:01,10000\n"
    assert hub2.cycle_start == 10_000
    assert [b.batch_id for b in hub2.queue.batches()] == ["hub-10000-0"]
    hub2.close()


def test_health_counters(make_hub):
    hub = make_hub(start=0)
    hub.handle_gateway_message(frame("connected"))
    hub.handle_gateway_message("x")
    hub.clock.set(10_000)
    hub.tick()
    h = hub.health()
    assert (h["events_total"], h["rejected_messages"], h["last_cycle_end"]) == (1, 1, 10_000)


@pytest.mark.parametrize("bad", [dict(interval_ms=0), dict(interval_ms=-5), dict(hub_id="a/b"), dict(gateway_listen="nope")])
def test_config_validation(tmp_path, bad):
    with pytest.raises(ConfigError):
        HubConfig(tmp_path, **bad).validate()


def test_config_mode_is_closed(tmp_path):
    with pytest.raises(ValueError):
        HubConfig(tmp_path, mode="both")
    assert HubConfig(tmp_path, mode="raw").mode == Mode.RAW


@pytest.mark.parametrize("text, ms", [("24h", DAY_MS), ("10s", 10_000), ("250ms", 250), ("1.5s", 1500), ("7", 7), ("2min", 120_000), ("1d", DAY_MS)])
def test_parse_duration(text, ms):
    assert parse_duration(text) == ms


@pytest.mark.parametrize("text", ["", "s", "-1s", "0.5ms", "1w"])
def test_parse_duration_rejects(text):
    with pytest.raises(ConfigError):
        parse_duration(text)


def test_update_for_unknown_node_via_hub(make_hub):
    hub = make_hub()
    assert hub.handle_gateway_message(encode_event(NodeUpdate("gw-9", NodeDescriptor(B, NodeStatus.DISCONNECTED))))["ok"]
    assert hub.table[B].mdevice_id == "gw-9"
