"""Per-hop latency/drop bookkeeping and the aggregated latency report."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from quickclear.errors import CausalityViolation, DuplicateRecord, ParseError


class Hop(enum.Enum):
    DSRC = "DSRC"
    UDP = "UDP"
    WS = "WS"
    CMP_TCP = "CMP_TCP"

    @property
    def order(self) -> int:
        return _HOP_ORDER[self]


_HOP_ORDER = {h: i for i, h in enumerate(Hop)}

RAW_COLUMNS = ("hop", "msg_id", "send_ts_ms", "recv_ts_ms", "latency_ms")
SUMMARY_COLUMNS = (
    "hop",
    "count_sent",
    "count_received",
    "drop_pct",
    "mean_ms",
    "median_ms",
    "p95_ms",
    "min_ms",
    "max_ms",
)


@dataclass(frozen=True, slots=True)
class HopRecord:
    hop: Hop
    msg_id: int
    send_ts_ms: float
    recv_ts_ms: float | None = None

    @property
    def latency_ms(self) -> float | None:
        return None if self.recv_ts_ms is None else self.recv_ts_ms - self.send_ts_ms

    def sort_key(self) -> tuple:
        return (self.send_ts_ms, self.hop.order, self.msg_id)


@dataclass(frozen=True, slots=True)
class HopStats:
    hop: Hop
    count_sent: int
    count_received: int
    drop_pct: float
    mean_ms: float | None
    median_ms: float | None
    p95_ms: float | None
    min_ms: float | None
    max_ms: float | None

    def row(self) -> dict:
        d = asdict(self)
        d["hop"] = self.hop.value
        return d


@dataclass(frozen=True)
class LatencyReport:
    hops: tuple[HopStats, ...]

    def __getitem__(self, hop: Hop | str) -> HopStats:
        hop = Hop(hop) if isinstance(hop, str) else hop
        for h in self.hops:
            if h.hop is hop:
                return h
        raise KeyError(hop)

    def __contains__(self, hop: object) -> bool:
        return any(h.hop is hop or h.hop.value == hop for h in self.hops)

    def __len__(self) -> int:
        return len(self.hops)

    def __iter__(self) -> Iterator[HopStats]:
        return iter(self.hops)

    def as_dict(self) -> dict:
        return {"hops": [h.row() for h in self.hops]}


class Recorder:
    """Collects ``HopRecord`` samples; safe to feed from several threads."""

    def __init__(self) -> None:
        self._records: dict[tuple[Hop, int], HopRecord] = {}
        self._lock = threading.Lock()

    def record(self, hop: Hop, msg_id: int, send_ts: float, recv_ts: float | None = None) -> HopRecord:
        if send_ts < 0:
            raise ValueError("send_ts must be >= 0")
        if recv_ts is not None and recv_ts <= send_ts:
            raise CausalityViolation(f"{hop.value} msg {msg_id}: recv {recv_ts} <= send {send_ts}")
        rec = HopRecord(Hop(hop), msg_id, send_ts, recv_ts)
        with self._lock:
            key = (rec.hop, msg_id)
            if key in self._records:
                raise DuplicateRecord(f"{hop.value} msg {msg_id} already recorded")
            self._records[key] = rec
        return rec

    def records(self) -> list[HopRecord]:
        with self._lock:
            return sorted(self._records.values(), key=HopRecord.sort_key)

    def __len__(self) -> int:
        return len(self._records)


def summarize(records: Iterable[HopRecord], hops: Sequence[Hop] | None = None) -> LatencyReport:
    """Aggregate records per hop.

    With ``hops`` given, exactly those hops are reported (empty ones get a
    zeroed row); otherwise every hop present in ``records`` is reported.
    Rows are always in canonical hop order.
    """
    by_hop: dict[Hop, list[HopRecord]] = {}
    for r in records:
        by_hop.setdefault(r.hop, []).append(r)
    wanted = sorted(set(hops) if hops is not None else set(by_hop), key=lambda h: h.order)
    rows = []
    for hop in wanted:
        recs = by_hop.get(hop, [])
        sent = len(recs)
        lat = sorted(r.latency_ms for r in recs if r.recv_ts_ms is not None)
        received = len(lat)
        drop = 100.0 * (sent - received) / sent if sent else 0.0
        if lat:
            arr = np.asarray(lat, dtype=np.float64)
            rows.append(
                HopStats(
                    hop, sent, received, drop,
                    # math.fsum keeps the mean independent of input order
                    math.fsum(lat) / received,
                    float(np.percentile(arr, 50)),
                    float(np.percentile(arr, 95)),
                    float(arr[0]),
                    float(arr[-1]),
                )
            )
        else:
            rows.append(HopStats(hop, sent, 0, drop, None, None, None, None, None))
    return LatencyReport(tuple(rows))


def _fmt(v: float | int | None) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and v.is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(v)


def records_csv(records: Iterable[HopRecord]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(RAW_COLUMNS)
    for r in sorted(records, key=HopRecord.sort_key):
        w.writerow([r.hop.value, r.msg_id, _fmt(r.send_ts_ms), _fmt(r.recv_ts_ms), _fmt(r.latency_ms)])
    return out.getvalue()


def report_csv(report: LatencyReport) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for h in report.hops:
        row = h.row()
        w.writerow([row["hop"]] + [_fmt(row[c]) for c in SUMMARY_COLUMNS[1:]])
    return out.getvalue()


def report_json(report: LatencyReport) -> str:
    return json.dumps(report.as_dict(), indent=2) + "\n"


def export(data: LatencyReport | Iterable[HopRecord], fmt: str, path: str | Path) -> Path:
    """Write raw records or a summary as CSV or JSON."""
    path = Path(path)
    fmt = fmt.lower()
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown export format {fmt!r}")
    if isinstance(data, LatencyReport):
        text = report_csv(data) if fmt == "csv" else report_json(data)
    elif fmt == "csv":
        text = records_csv(data)
    else:
        rows = [
            {"hop": r.hop.value, "msg_id": r.msg_id, "send_ts_ms": r.send_ts_ms,
             "recv_ts_ms": r.recv_ts_ms, "latency_ms": r.latency_ms}
            for r in sorted(data, key=HopRecord.sort_key)
        ]
        text = json.dumps(rows, indent=2) + "\n"
    path.write_text(text, encoding="utf-8")
    return path


def _num(s: str) -> float | int:
    try:
        return int(s)
    except ValueError:
        v = float(s)
        if not math.isfinite(v):
            raise ValueError(f"non-finite value {s!r}") from None
        return v


def parse_records_csv(text: str, first_line: int = 1) -> list[HopRecord]:
    """Parse a raw-records CSV; repeated header lines (concatenated files) are skipped."""
    out: list[HopRecord] = []
    header = ",".join(RAW_COLUMNS)
    lines = text.splitlines()
    if not lines or lines[0].strip() != header:
        raise ParseError(first_line, f"expected header {header!r}")
    for offset, line in enumerate(lines[1:], start=1):
        lineno = first_line + offset
        stripped = line.strip()
        if not stripped or stripped == header:
            continue
        parts = stripped.split(",")
        if len(parts) != len(RAW_COLUMNS):
            raise ParseError(lineno, f"expected {len(RAW_COLUMNS)} columns, got {len(parts)}")
        hop_s, id_s, send_s, recv_s, lat_s = parts
        try:
            hop = Hop(hop_s)
            msg_id = int(id_s)
            send = _num(send_s)
            recv = _num(recv_s) if recv_s else None
            if send < 0 or (recv is not None and recv <= send):
                raise ValueError("timestamps violate causality")
            if (lat_s == "") != (recv is None):
                raise ValueError("latency present iff received")
            if recv is not None and not math.isclose(_num(lat_s), recv - send, abs_tol=1e-6):
                raise ValueError("latency does not equal recv - send")
        except ValueError as e:
            raise ParseError(lineno, str(e)) from None
        out.append(HopRecord(hop, msg_id, send, recv))
    return out
