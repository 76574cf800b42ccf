"""Quick Clear chain verification over a finished run."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from quickclear.harness.result import RunResult

# inter-arrival bounds for System Messages at the CMP
CADENCE_MIN_MS = 1000
CADENCE_MAX_MS = 2000


class Stage(str, Enum):
    DSRC = "DSRC"
    UDP = "UDP"
    CMP_SYSTEM = "CMP_SYSTEM"
    FAULT = "FAULT"
    ALERT = "ALERT"
    FRAMES = "FRAMES"


class Status(str, Enum):
    OK = "ok"
    FAIL = "fail"
    NA = "n/a"


@dataclass
class StageResult:
    stage: Stage
    status: Status
    first_success_ms: float | None = None
    detail: str = ""

    def as_dict(self) -> dict:
        return {
            "stage": self.stage.value,
            "status": self.status.value,
            "first_success_ms": self.first_success_ms,
            "detail": self.detail,
        }


@dataclass
class Transcript:
    mode: str
    stages: list[StageResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(s.status is not Status.FAIL for s in self.stages)

    @property
    def first_failure(self) -> StageResult | None:
        return next((s for s in self.stages if s.status is Status.FAIL), None)

    def __getitem__(self, stage: Stage | str) -> StageResult:
        stage = Stage(stage)
        return next(s for s in self.stages if s.stage is stage)

    def as_dict(self) -> dict:
        return {"mode": self.mode, "ok": self.ok, "stages": [s.as_dict() for s in self.stages]}

    def render(self) -> str:
        lines = []
        for s in self.stages:
            ts = "-" if s.first_success_ms is None else f"{s.first_success_ms:.0f} ms"
            lines.append(f"{s.stage.value:<11} {s.status.value:<4} {ts:>12}  {s.detail}")
        return "\n".join(lines)


class ChainBroken(Exception):
    def __init__(self, stage: Stage, transcript: Transcript) -> None:
        self.stage = stage
        self.transcript = transcript
        super().__init__(f"quick-clear chain broken at {stage.value}: {transcript[stage].detail}")


def cadence_gaps(result: RunResult) -> list[float]:
    """Inter-arrival gaps at the CMP between consecutive System Messages
    that both carry a CAV fix."""
    fixed = [a.arrived_ms for a in result.system_arrivals if a.message.cav_pos is not None]
    return [b - a for a, b in zip(fixed, fixed[1:])]


def _stage(stage: Stage, ok: bool, first: float | None, detail: str) -> StageResult:
    return StageResult(stage, Status.OK if ok else Status.FAIL, first if ok else None, detail)


def build_transcript(result: RunResult) -> Transcript:
    tr = Transcript(result.mode)
    st = tr.stages

    st.append(_stage(Stage.DSRC, result.first_dsrc_rx_ms is not None, result.first_dsrc_rx_ms,
                     "CAV broadcast reached the UAV OBU"))
    st.append(_stage(Stage.UDP, result.first_ingest_ms is not None, result.first_ingest_ms,
                     "OBU datagram accepted by the companion"))

    fixed = [a for a in result.system_arrivals if a.message.cav_pos is not None]
    gaps = cadence_gaps(result)
    bad = [g for g in gaps if not CADENCE_MIN_MS <= g <= CADENCE_MAX_MS]
    if not fixed:
        st.append(_stage(Stage.CMP_SYSTEM, False, None, "no System Message with a CAV fix reached the CMP"))
    elif bad:
        st.append(_stage(Stage.CMP_SYSTEM, False, None,
                         f"{len(bad)}/{len(gaps)} gaps outside [{CADENCE_MIN_MS}, {CADENCE_MAX_MS}] ms"))
    else:
        span = f"[{min(gaps):.0f}, {max(gaps):.0f}] ms" if gaps else "n/a"
        st.append(_stage(Stage.CMP_SYSTEM, True, fixed[0].arrived_ms,
                         f"{len(fixed)} messages, gaps {span}"))

    zones = [z.id for z in result.scenario.zones]
    if not zones:
        st.append(StageResult(Stage.FAULT, Status.NA, detail="no incident zones configured"))
        st.append(StageResult(Stage.ALERT, Status.NA, detail="no incident zones configured"))
    else:
        at_cmp: dict[str, int] = {}
        for f in result.fault_arrivals:
            at_cmp[f.zone_id] = at_cmp.get(f.zone_id, 0) + 1
        wrong = {z: at_cmp.get(z, 0) for z in zones if at_cmp.get(z, 0) != 1}
        first_fault = min((f.arrived_ms for f in result.fault_arrivals), default=None)
        st.append(_stage(Stage.FAULT, not wrong, first_fault,
                         f"fault count per zone at CMP {wrong}" if wrong
                         else f"one FaultMessage for each of {len(zones)} zones"))

        clients = len(result.alert_receipts)
        problems = []
        if len(result.alert_fanout) != len(result.fault_arrivals):
            problems.append(f"{len(result.alert_fanout)} alerts for {len(result.fault_arrivals)} faults")
        for seq, fanout in sorted(result.alert_fanout.items()):
            got = sum(seq in r for r in result.alert_receipts.values())
            if fanout != clients or got != clients:
                problems.append(f"alert {seq}: fan-out {fanout}, received by {got} of {clients}")
        ok = not problems and bool(result.alert_fanout)
        st.append(_stage(Stage.ALERT, ok, result.first_alert_ms,
                         "; ".join(problems) if problems
                         else f"{len(result.alert_fanout)} alerts to {clients} clients each"))

    if not result.observer_frames:
        st.append(StageResult(Stage.FRAMES, Status.NA, detail="no observers configured"))
    else:
        problems = []
        for i, seen in enumerate(result.observer_frames):
            missing = [s for s in result.frames_at_server if s not in seen]
            mismatched = [s for s, h in seen.items() if result.frames_sent.get(s) != h]
            if missing or mismatched or not seen:
                problems.append(f"observer {i}: {len(seen)} frames, {len(missing)} missing, "
                                f"{len(mismatched)} hash mismatches")
        n = len(result.frames_at_server)
        st.append(_stage(Stage.FRAMES, not problems and n > 0, result.first_observer_frame_ms,
                         "; ".join(problems) if problems
                         else f"{n} frames to {len(result.observer_frames)} observers, hashes match"))
    return tr


def verify_chain(result: RunResult) -> Transcript:
    tr = build_transcript(result)
    bad = tr.first_failure
    if bad is not None:
        raise ChainBroken(bad.stage, tr)
    return tr
