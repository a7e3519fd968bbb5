"""Uplink bytes per offload mode as the reading rate grows.

For each reading period the same timeline runs through a raw-mode and an
aggregated-mode hub; the table shows events per device per cycle and the
bytes each mode queued for the cloud.
"""

import argparse
import tempfile

from edgehub.config import HubConfig, Mode, SimClock, parse_duration
from edgehub.hub import Hub
from edgehub.simulator import SimParams, drive, generate_timeline


def queued_bytes(tl, mode: Mode, interval: int) -> int:
    with tempfile.TemporaryDirectory() as d:
        hub = Hub(HubConfig(d, interval_ms=interval, mode=mode), clock=SimClock(tl.start_ms)).start()
        drive(tl, hub)
        n = hub.queue.total_bytes()
        hub.close()
    return n


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--duration", default="2min")
    ap.add_argument("--interval", default="10s")
    ap.add_argument("--periods", default="10s,5s,2s,1s,500ms", help="comma-separated reading periods")
    args = ap.parse_args()

    interval = parse_duration(args.interval)
    print(f"{'period':>8} {'ev/dev/cycle':>13} {'raw B':>10} {'aggregated B':>13} {'ratio':>7}")
    for period in args.periods.split(","):
        params = SimParams(seed=args.seed, duration_ms=parse_duration(args.duration), reading_period_ms=parse_duration(period))
        tl = generate_timeline(params)
        cycles = len(tl.boundaries(interval)) - 1
        per_dev = (len(tl) - params.gateways) / (len(tl.nodes) * cycles)
        raw = queued_bytes(tl, Mode.RAW, interval)
        agg = queued_bytes(tl, Mode.AGGREGATED, interval)
        print(f"{period:>8} {per_dev:13.1f} {raw:10d} {agg:13d} {agg / raw:7.3f}")


if __name__ == "__main__":
    main()
