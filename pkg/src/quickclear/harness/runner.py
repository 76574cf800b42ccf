"""Run orchestration: manifest resolution, mode dispatch and artifacts."""

from __future__ import annotations

import datetime as _dt
import json
import platform
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from quickclear.errors import ConfigError, DuplicateRecord
from quickclear.harness.live import run_live
from quickclear.harness.result import RunResult
from quickclear.harness.sim import simulate
from quickclear.harness.transcript import Transcript, build_transcript, verify_chain
from quickclear.metrics import (
    Hop,
    LatencyReport,
    parse_records_csv,
    records_csv,
    report_csv,
    report_json,
    summarize,
)
from quickclear.scenario import (
    PRESET_HOPS,
    Preset,
    Scenario,
    ScenarioConfig,
    build_experiment,
    load_config,
    load_config_file,
)

MODES = ("SIM", "LIVE")
PORT_KEYS = ("udp", "cmp", "ws")

EVENTS = "events.jsonl"
RECORDS = "records.csv"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
JOURNAL = "cmp_journal.jsonl"
TRANSCRIPT = "transcript.json"
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class RunManifest:
    preset: str = "exp1"
    mode: str = "SIM"
    seed: int | None = None
    duration_ms: int | None = None
    config_path: Path | None = None
    out_dir: Path | None = None
    ports: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", self.mode.upper())
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        Preset.parse(self.preset)
        if self.duration_ms is not None and self.duration_ms <= 0:
            raise ValueError("duration_ms must be > 0")
        for k, v in self.ports.items():
            if k not in PORT_KEYS:
                raise ValueError(f"unknown port key {k!r}")
            if not 0 <= v <= 65535:
                raise ValueError(f"{k} port out of range: {v}")

    def resolve(self) -> tuple[RunManifest, ScenarioConfig]:
        """Load the config and pin seed, duration and ports.

        The returned manifest always carries a seed, taken from the config
        when not given explicitly.
        """
        overrides = load_config_file(self.config_path) if self.config_path else {}
        if self.seed is not None:
            overrides = {**overrides, "seed": self.seed}
        cfg = load_config(self.preset, overrides)
        default_dur = cfg.duration_ms if self.mode == "SIM" else cfg.live_duration_ms
        ports = {"udp": cfg.ports.udp, "cmp": cfg.ports.cmp, "ws": cfg.ports.ws, **self.ports}
        m = replace(self, seed=cfg.seed, duration_ms=self.duration_ms or default_dur, ports=ports)
        return m, cfg

    def as_dict(self) -> dict:
        return {
            "preset": Preset.parse(self.preset).value,
            "mode": self.mode,
            "seed": self.seed,
            "duration_ms": self.duration_ms,
            "config_path": str(self.config_path) if self.config_path else None,
            "out_dir": str(self.out_dir) if self.out_dir else None,
            "ports": dict(self.ports),
        }


@dataclass
class RunOutput:
    manifest: RunManifest
    scenario: Scenario
    result: RunResult
    report: LatencyReport
    artifacts: dict[str, Path] = field(default_factory=dict)
    transcript: Transcript | None = None


def _execute(m: RunManifest, cfg: ScenarioConfig, journal: Path | None) -> tuple[Scenario, RunResult]:
    sc = build_experiment(m.preset, cfg)
    if m.mode == "SIM":
        return sc, simulate(sc, m.duration_ms, journal)
    return sc, run_live(sc, m.duration_ms, m.ports, journal)


def _write(out: Path, name: str, text: str, artifacts: dict[str, Path]) -> None:
    p = out / name
    p.write_text(text, encoding="utf-8", newline="")
    artifacts[name] = p


def run(manifest: RunManifest) -> RunOutput:
    """Execute one run and write its artifacts when ``out_dir`` is set.

    Config problems raise ``ConfigError`` before anything touches the disk.
    """
    m, cfg = manifest.resolve()
    out = m.out_dir
    journal = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        journal = out / JOURNAL
        journal.unlink(missing_ok=True)
    started = _dt.datetime.now(_dt.timezone.utc)
    t0 = time.perf_counter()
    try:
        sc, result = _execute(m, cfg, journal)
    except BaseException:
        if journal is not None:
            journal.unlink(missing_ok=True)
        raise
    wall_s = time.perf_counter() - t0
    report = result.report
    ro = RunOutput(m, sc, result, report)
    if out is not None:
        if journal is not None and journal.exists():
            ro.artifacts[JOURNAL] = journal
        _write(out, EVENTS, result.events_jsonl(), ro.artifacts)
        _write(out, RECORDS, records_csv(result.records), ro.artifacts)
        _write(out, REPORT_JSON, report_json(report), ro.artifacts)
        _write(out, REPORT_CSV, report_csv(report), ro.artifacts)
        # wall-clock data lives only here so the other files stay reproducible
        echo = {
            "manifest": m.as_dict(),
            "config": cfg.model_dump(mode="json"),
            "started_at": started.isoformat(),
            "wall_time_s": round(wall_s, 3),
            "python": platform.python_version(),
            "host": platform.node(),
        }
        _write(out, MANIFEST, json.dumps(echo, indent=2) + "\n", ro.artifacts)
    return ro


def quick_clear(manifest: RunManifest) -> RunOutput:
    """Run the Quick Clear demo and verify the whole chain.

    Raises ``ChainBroken`` naming the first failing stage; artifacts,
    including ``transcript.json``, are written either way.
    """
    if Hop.CMP_TCP not in PRESET_HOPS[Preset.parse(manifest.preset)]:
        raise ConfigError("preset", f"{manifest.preset} has no CMP hop; the quick-clear chain needs one")
    ro = run(manifest)
    ro.transcript = build_transcript(ro.result)
    if ro.manifest.out_dir is not None:
        text = json.dumps(ro.transcript.as_dict(), indent=2) + "\n"
        _write(ro.manifest.out_dir, TRANSCRIPT, text, ro.artifacts)
    verify_chain(ro.result)
    return ro


def analyze(paths: Sequence[str | Path], out: str | Path | None = None) -> LatencyReport:
    """Summarize one or more raw records CSVs.

    Several files are merged; record keys must not collide across them.
    The report is written as JSON to ``out`` (CSV if it ends in ``.csv``).
    """
    records = []
    for p in paths:
        text = Path(p).read_text(encoding="utf-8")
        records.extend(parse_records_csv(text))
    keys = [(r.hop, r.msg_id) for r in records]
    if len(set(keys)) != len(keys):
        raise DuplicateRecord("records overlap across inputs; msg_id ranges must be distinct")
    report = summarize(records)
    if out is not None:
        out = Path(out)
        out.write_text(report_csv(report) if out.suffix == ".csv" else report_json(report),
                       encoding="utf-8", newline="")
    return report
