"""Command line entry points: ``hub``, ``cloud`` and ``sim``.

Every option can also be set through an ``EDGEHUB_<OPTION>`` environment
variable, e.g. ``EDGEHUB_INTERVAL=10s``.
"""

from __future__ import annotations

import asyncio
import json
import logging
import math
import sys
import tempfile
from pathlib import Path

import click

from .aggregate import Replayer, csv_name, process_data, write_csv
from .config import DAY_MS, ConfigError, HubConfig, Mode, SimClock, parse_duration
from .simulator import SimParams, drive, drive_remote, generate_timeline, oracle_csvs


class Duration(click.ParamType):
    name = "duration"

    def convert(self, value, param, ctx):
        if isinstance(value, int):
            return value
        try:
            return parse_duration(value)
        except ConfigError as exc:
            self.fail(str(exc), param, ctx)


class Mean(click.ParamType):
    """A duration that may also be ``inf``."""

    name = "duration|inf"

    def convert(self, value, param, ctx):
        if isinstance(value, (int, float)):
            return value
        if str(value).lower() in ("inf", "infinity", "never"):
            return math.inf
        return Duration().convert(value, param, ctx)


DURATION = Duration()


def env(name: str) -> str:
    return f"EDGEHUB_{name}"


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


# --------------------------------------------------------------------------
# hub


@click.group()
def hub():
    """Edge data-collection hub."""


@hub.command("run")
@click.option("--listen", default="127.0.0.1:8765", envvar=env("LISTEN"), show_default=True, help="Gateway stream address.")
@click.option("--rest", default="127.0.0.1:8080", envvar=env("REST"), show_default=True, help="REST address.")
@click.option("--interval", type=DURATION, default=DAY_MS, envvar=env("INTERVAL"), help="Aggregation interval [default: 24h].")
@click.option("--log-dir", type=click.Path(file_okay=False, path_type=Path), required=True, envvar=env("LOG_DIR"))
@click.option("--cloud-url", default=None, envvar=env("CLOUD_URL"), help="Cloud stub base URL.")
@click.option("--mode", type=click.Choice([m.value for m in Mode]), default="aggregated", envvar=env("MODE"), show_default=True)
@click.option("--clock", type=click.Choice(["system", "simulated"]), default="system", envvar=env("CLOCK"), show_default=True)
@click.option("--hub-id", default="hub", envvar=env("HUB_ID"), show_default=True)
@click.option("--fsync/--no-fsync", default=False, envvar=env("FSYNC"), help="fsync every log append.")
@click.option("--flush-interval", type=float, default=5.0, envvar=env("FLUSH_INTERVAL"), show_default=True, help="Seconds between sync flushes.")
@click.option("-v", "--verbose", is_flag=True, envvar=env("VERBOSE"))
def hub_run(listen, rest, interval, log_dir, cloud_url, mode, clock, hub_id, fsync, flush_interval, verbose):
    """Run the hub service until interrupted."""
    from .server import HubService

    _setup_logging(verbose)
    config = HubConfig(
        log_dir=log_dir,
        gateway_listen=listen,
        rest_listen=rest,
        interval_ms=interval,
        mode=Mode(mode),
        cloud_url=cloud_url,
        clock_source=clock,
        hub_id=hub_id,
        fsync=fsync,
        flush_interval_s=flush_interval,
    )
    try:
        service = HubService(config)
    except ConfigError as exc:
        raise click.BadParameter(str(exc)) from None
    try:
        asyncio.run(service.run())
    except KeyboardInterrupt:
        pass


@hub.command("replay")
@click.option("--log", "log_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True, envvar=env("LOG"))
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False, path_type=Path), required=True, envvar=env("CSV"))
@click.option("--at", type=int, default=None, envvar=env("AT"), help="Close the cycle at this ms instant (open logs only).")
def hub_replay(log_path, csv_path, at):
    """Rebuild a cycle's CSV from its log file.

    A closed log yields the CSV of the cycle it closed; an open one is
    closed at ``--at`` (default: the last entry's ts).
    """
    rep = Replayer().run(log_path)
    if rep.cycles and at is None:
        records = rep.cycles[-1].records
    else:
        if rep.last_ts is None:
            raise click.ClickException("log is empty")
        records, _ = process_data(rep.table, at if at is not None else rep.last_ts)
    n = write_csv(records, csv_path)
    click.echo(f"{len(records)} records, {n} bytes -> {csv_path}")


# --------------------------------------------------------------------------
# cloud


@click.group()
def cloud():
    """Central cloud endpoint stand-in."""


@cloud.command("stub")
@click.option("--listen", default="127.0.0.1:9000", envvar=env("STUB_LISTEN"), show_default=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True, envvar=env("STUB_OUT"))
@click.option("-v", "--verbose", is_flag=True, envvar=env("VERBOSE"))
def cloud_stub(listen, out, verbose):
    """Receive, deduplicate and persist uplink batches."""
    from .server import StubService
    from .sync import CloudStub

    _setup_logging(verbose)
    try:
        asyncio.run(StubService(CloudStub(out), listen).run())
    except KeyboardInterrupt:
        pass


# --------------------------------------------------------------------------
# sim


def sim_params(f):
    options = [
        click.option("--seed", type=int, default=42, envvar=env("SEED"), show_default=True),
        click.option("--gateways", type=int, default=3, envvar=env("GATEWAYS"), show_default=True),
        click.option("--nodes", type=int, default=10, envvar=env("NODES"), show_default=True, help="Nodes per gateway."),
        click.option("--duration", type=DURATION, default="60s", envvar=env("DURATION"), show_default=True),
        click.option("--mean-connected", type=Mean(), default="8s", envvar=env("MEAN_CONNECTED"), show_default=True),
        click.option("--mean-disconnected", type=Mean(), default="4s", envvar=env("MEAN_DISCONNECTED"), show_default=True),
        click.option("--reading-period", type=DURATION, default="2s", envvar=env("READING_PERIOD"), show_default=True),
        click.option("--fever-probability", type=float, default=0.2, envvar=env("FEVER_PROBABILITY"), show_default=True),
        click.option("--start", type=int, default=SimParams.start_ms, envvar=env("START"), show_default=True, help="Start instant, ms epoch."),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _params(seed, gateways, nodes, duration, mean_connected, mean_disconnected, reading_period, fever_probability, start):
    return SimParams(
        seed=seed,
        gateways=gateways,
        nodes_per_gateway=nodes,
        duration_ms=duration,
        mean_connected_ms=mean_connected,
        mean_disconnected_ms=mean_disconnected,
        reading_period_ms=reading_period,
        fever_probability=fever_probability,
        start_ms=start,
    )


def _boundaries(timeline, cycles: str | None, interval: int | None) -> list[int]:
    if cycles:
        offsets = [parse_duration(c) for c in cycles.split(",") if c.strip()]
        return [timeline.start_ms] + [timeline.start_ms + o for o in offsets]
    return timeline.boundaries(interval or (timeline.end_ms - timeline.start_ms))


@click.group()
def sim():
    """Deterministic device-fleet simulator."""


@sim.command("run")
@sim_params
@click.option("--target", default=None, envvar=env("TARGET"), help="Hub gateway address host:port; in-process hub when omitted.")
@click.option("--rest", default=None, envvar=env("TARGET_REST"), help="Hub REST address host:port.")
@click.option("--clock", type=click.Choice(["simulated", "realtime"]), default="simulated", envvar=env("SIM_CLOCK"), show_default=True)
@click.option("--interval", type=DURATION, default="10s", envvar=env("SIM_INTERVAL"), show_default=True, help="Aggregation interval of the in-process hub.")
@click.option("--log-dir", type=click.Path(file_okay=False, path_type=Path), default=None, envvar=env("SIM_LOG_DIR"))
@click.option("--mode", type=click.Choice([m.value for m in Mode]), default="aggregated", envvar=env("SIM_MODE"), show_default=True)
def sim_run(target, rest, clock, interval, log_dir, mode, **kw):
    """Drive a hub with a generated timeline and print the run report.

    Against the in-process hub the hub's CSVs are also checked against the
    ground truth.
    """
    from .hub import Hub

    timeline = generate_timeline(_params(**kw))
    if target is not None:
        rest_url = f"http://{rest}" if rest else None
        report = asyncio.run(drive_remote(timeline, f"ws://{target}", rest_url, clock))
        click.echo(json.dumps(report.to_obj(), indent=2))
        sys.exit(1 if report.undelivered else 0)

    log_dir = log_dir or Path(tempfile.mkdtemp(prefix="edgehub-sim-"))
    hub_clock = SimClock(timeline.start_ms) if clock == "simulated" else None
    hub_obj = Hub(HubConfig(log_dir, interval_ms=interval, mode=Mode(mode)), clock=hub_clock).start()
    try:
        report = drive(timeline, hub_obj, clock)
    finally:
        hub_obj.close()
    out = report.to_obj()
    if clock == "simulated":
        bounds = timeline.boundaries(interval)
        expected = oracle_csvs(timeline, bounds)
        mismatched = [end for end, data in expected.items() if (log_dir / "csv" / csv_name(end)).read_bytes() != data]
        out["cycles"] = len(expected)
        out["oracle_mismatches"] = mismatched
    out["log_dir"] = str(log_dir)
    click.echo(json.dumps(out, indent=2))
    sys.exit(1 if out.get("oracle_mismatches") else 0)


@sim.command("oracle")
@sim_params
@click.option("--cycles", default=None, envvar=env("CYCLES"), help="Comma-separated boundary offsets from the start, e.g. 10s,20s,30s.")
@click.option("--interval", type=DURATION, default=None, envvar=env("ORACLE_INTERVAL"), help="Evenly spaced boundaries instead of --cycles.")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None, envvar=env("ORACLE_OUT"), help="Write connectivity-<end>.csv files here.")
def sim_oracle(cycles, interval, out, **kw):
    """Print ground-truth connectivity as hub-format CSV, one block per cycle."""
    timeline = generate_timeline(_params(**kw))
    bounds = _boundaries(timeline, cycles, interval)
    csvs = oracle_csvs(timeline, bounds)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for end, data in csvs.items():
            (out / csv_name(end)).write_bytes(data)
        click.echo(f"{len(csvs)} CSV files -> {out}")
        return
    for end, data in csvs.items():
        if len(csvs) > 1:
            click.echo(f"# {csv_name(end)}")
        click.echo(data.decode("utf-8"), nl=False)


@click.group()
def main():
    """edgehub: edge telemetry hub, cloud stub and fleet simulator."""


main.add_command(hub)
main.add_command(cloud)
main.add_command(sim)

