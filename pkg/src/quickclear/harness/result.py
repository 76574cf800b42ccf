"""Outcome of one run, shared by the simulated and live drivers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from quickclear.metrics import HopRecord, LatencyReport, summarize
from quickclear.scenario import Scenario
from quickclear.wire import FaultMessage, SystemMessage


@dataclass
class SystemArrival:
    sent_ms: float
    arrived_ms: float
    message: SystemMessage


@dataclass
class FaultArrival:
    sent_ms: float
    arrived_ms: float
    zone_id: str
    message: FaultMessage


@dataclass
class RunResult:
    scenario: Scenario
    mode: str
    records: list[HopRecord]
    events: list[dict] = field(default_factory=list)
    first_dsrc_rx_ms: float | None = None
    first_ingest_ms: float | None = None
    system_arrivals: list[SystemArrival] = field(default_factory=list)
    fault_arrivals: list[FaultArrival] = field(default_factory=list)
    faults_sent: dict[str, int] = field(default_factory=dict)
    # alert_seq -> registered clients when the CMP accepted the fault
    alert_fanout: dict[int, int] = field(default_factory=dict)
    # client_id -> alert_seqs received, in order
    alert_receipts: dict[str, list[int]] = field(default_factory=dict)
    first_alert_ms: float | None = None
    frames_sent: dict[int, str] = field(default_factory=dict)
    frames_at_server: list[int] = field(default_factory=list)
    observer_frames: list[dict[int, str]] = field(default_factory=list)
    first_observer_frame_ms: float | None = None
    companion_decode_errors: int = 0
    protocol_errors: int = 0

    @property
    def report(self) -> LatencyReport:
        return summarize(self.records, self.scenario.hops)

    def events_jsonl(self) -> str:
        return "".join(json.dumps(e, separators=(",", ":")) + "\n" for e in self.events)
