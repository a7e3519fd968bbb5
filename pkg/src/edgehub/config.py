from __future__ import annotations

import enum
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

from .aggregate import TriageRules

DAY_MS = 24 * 60 * 60 * 1000

_UNITS_MS = {"ms": 1, "s": 1000, "m": 60_000, "min": 60_000, "h": 3_600_000, "d": DAY_MS}
_DURATION_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(ms|s|min|m|h|d)?\s*$")


class ConfigError(ValueError):
    pass


class Mode(str, enum.Enum):
    RAW = "raw"
    AGGREGATED = "aggregated"


class ClockSource(str, enum.Enum):
    SYSTEM = "system"
    SIMULATED = "simulated"


def parse_duration(text: str | int) -> int:
    """Milliseconds for ``"24h"``, ``"10s"``, ``"250ms"``; bare numbers are ms."""
    if isinstance(text, int):
        return text
    m = _DURATION_RE.match(text)
    if not m:
        raise ConfigError(f"bad duration {text!r}")
    value = float(m.group(1)) * _UNITS_MS[m.group(2) or "ms"]
    if value != int(value):
        raise ConfigError(f"duration {text!r} is not a whole number of ms")
    return int(value)


def parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"bad address {text!r}, expected host:port")
    return host or "0.0.0.0", int(port)


def system_clock() -> int:
    return time.time_ns() // 1_000_000


class SimClock:
    """Logical clock shared by a driver and a hub; never moves backwards."""

    def __init__(self, now: int = 0):
        self.now = now

    def __call__(self) -> int:
        return self.now

    def set(self, t: int) -> None:
        if t < self.now:
            raise ValueError(f"simulated clock cannot go back from {self.now} to {t}")
        self.now = t

    def advance(self, dt: int) -> None:
        self.set(self.now + dt)


@dataclass
class HubConfig:
    log_dir: Path
    gateway_listen: str = "127.0.0.1:8765"
    rest_listen: str = "127.0.0.1:8080"
    interval_ms: int = DAY_MS
    mode: Mode = Mode.AGGREGATED
    cloud_url: str | None = None
    clock_source: ClockSource = ClockSource.SYSTEM
    hub_id: str = "hub"
    fsync: bool = False
    flush_interval_s: float = 5.0
    rules: TriageRules = field(default_factory=TriageRules)

    def __post_init__(self):
        self.log_dir = Path(self.log_dir)
        self.mode = Mode(self.mode)
        self.clock_source = ClockSource(self.clock_source)

    def validate(self) -> "HubConfig":
        if not isinstance(self.interval_ms, int) or self.interval_ms <= 0:
            raise ConfigError(f"interval must be a positive number of ms, got {self.interval_ms!r}")
        if not re.fullmatch(r"[A-Za-z0-9._]+", self.hub_id):
            raise ConfigError(f"hub id {self.hub_id!r} may only contain letters, digits, '.' and '_'")
        self.log_dir.mkdir(parents=True, exist_ok=True)
        if not os.access(self.log_dir, os.W_OK):
            raise ConfigError(f"log dir {self.log_dir} is not writable")
        parse_addr(self.gateway_listen)
        parse_addr(self.rest_listen)
        return self

    @property
    def csv_dir(self) -> Path:
        return self.log_dir / "csv"

    @property
    def queue_path(self) -> Path:
        return self.log_dir / "sync.db"
