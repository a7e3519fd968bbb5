"""Drive the hub over many seeds and compare every cycle CSV with the oracle.

Prints one line per seed plus a total. Useful for trying churn parameters
beyond the ones the acceptance suite pins.
"""

import argparse
import tempfile
import time
from pathlib import Path

from edgehub.aggregate import csv_name
from edgehub.config import HubConfig, SimClock, parse_duration
from edgehub.hub import Hub
from edgehub.simulator import SimParams, drive, generate_timeline, oracle_csvs


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--duration", default="1h")
    ap.add_argument("--interval", default="10min")
    ap.add_argument("--mean-connected", default="10s")
    ap.add_argument("--mean-disconnected", default="7s")
    ap.add_argument("--reading-period", default="1min")
    args = ap.parse_args()

    interval = parse_duration(args.interval)
    failures = 0
    t0 = time.perf_counter()
    for seed in range(args.first_seed, args.first_seed + args.seeds):
        params = SimParams(
            seed=seed,
            duration_ms=parse_duration(args.duration),
            mean_connected_ms=parse_duration(args.mean_connected),
            mean_disconnected_ms=parse_duration(args.mean_disconnected),
            reading_period_ms=parse_duration(args.reading_period),
        )
        t = time.perf_counter()
        tl = generate_timeline(params)
        with tempfile.TemporaryDirectory() as d:
            hub = Hub(HubConfig(d, interval_ms=interval), clock=SimClock(tl.start_ms)).start()
            drive(tl, hub)
            hub.close()
            expected = oracle_csvs(tl, tl.boundaries(interval))
            bad = [end for end, data in expected.items() if (Path(d) / "csv" / csv_name(end)).read_bytes() != data]
        failures += bool(bad)
        status = "ok" if not bad else f"MISMATCH cycles {bad}"
        print(f"seed {seed:4d}  churn {tl.churn_events():6d}  cycles {len(expected)}  {time.perf_counter() - t:5.2f}s  {status}")
    print(f"{args.seeds - failures}/{args.seeds} seeds exact in {time.perf_counter() - t0:.1f}s")
    raise SystemExit(1 if failures else 0)


if __name__ == "__main__":
    main()
