"""Edge telemetry hub: gateway ingestion, connectivity accounting, scheduled
CSV aggregation and store-and-forward relay to a cloud endpoint, plus a
deterministic device-fleet simulator used as the verification oracle."""

from .aggregate import ConnectivityRecord, TriageFlag, flag_for_testing, process_data, replay_log, write_csv
from .config import HubConfig, Mode, SimClock
from .hub import Hub
from .protocol import (
    NodeDescriptor,
    NodesSnapshot,
    NodeStatus,
    NodeUpdate,
    TelemetryReading,
    decode_event,
    encode_event,
    validate_reading,
)
from .session import SessionTable
from .simulator import SimParams, generate_timeline, ground_truth

__version__ = "0.1.0"
