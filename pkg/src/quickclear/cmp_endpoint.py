"""Simulated Contingency Management Platform (CMP).

``CmpCore`` is the protocol state machine: it takes raw stream bytes per
connection and returns the bytes to write back to each connection. The
simulation drives it directly; ``CmpServer`` wraps it in an asyncio TCP
server for live runs.

Session protocol, all frames in the wire module's CMP framing:

1. client sends ``hello`` with its client_id, server answers ``ack`` seq 0;
2. each ``system`` or ``fault`` record is answered with the next ``ack``;
3. an accepted ``fault`` is broadcast as an ``alert`` to every registered
   connection, originator included, after the originator's ack.

Malformed frames get an ``error`` reply and the connection stays open.
"""

from __future__ import annotations

import asyncio
import errno
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from quickclear.errors import CmpDecodeError, PortInUse
from quickclear.wire import (
    Ack,
    Alert,
    CmpFrameBuffer,
    CmpRecord,
    ErrorReply,
    FaultMessage,
    Hello,
    SystemMessage,
    encode_cmp_record,
    record_to_json,
)

log = logging.getLogger(__name__)

DEFAULT_STALENESS_MS = 10_000


class ProtocolError(Exception):
    pass


class UnregisteredClient(ProtocolError):
    pass


@dataclass(frozen=True)
class FleetEntry:
    client_id: str
    last_system: SystemMessage
    last_update_ts_ms: int
    stale: bool = False


@dataclass(frozen=True)
class AlertRecord:
    alert_seq: int
    fault: FaultMessage
    received_ts_ms: int
    origin: str
    fanout: int = 0


@dataclass
class _Conn:
    conn_id: int
    buf: CmpFrameBuffer = field(default_factory=CmpFrameBuffer)
    client_id: str | None = None
    ack_seq: int = -1
    records: int = 0


Outgoing = list[tuple[int, bytes]]


class CmpCore:
    """Fleet table, alert log and per-connection session state.

    ``on_record(conn_id, client_id, index, record, now_ms)`` is called for
    every accepted system/fault record; ``index`` is the 1-based position of
    the record on its connection (equal to the ack seq it receives).
    """

    def __init__(
        self,
        staleness_ms: int = DEFAULT_STALENESS_MS,
        journal: Path | None = None,
        on_record: Callable[[int, str, int, CmpRecord, float], None] | None = None,
    ) -> None:
        self.staleness_ms = staleness_ms
        self.on_record = on_record
        self._conns: dict[int, _Conn] = {}
        self._clients: dict[str, int] = {}
        self.fleet: dict[str, FleetEntry] = {}
        self.alerts: list[AlertRecord] = []
        self.protocol_errors = 0
        self.alert_deliveries = 0
        self._journal = open(journal, "a", encoding="utf-8") if journal else None

    def close(self) -> None:
        if self._journal:
            self._journal.close()
            self._journal = None

    def _log(self, entry: dict) -> None:
        if self._journal:
            self._journal.write(json.dumps(entry, separators=(",", ":")) + "\n")
            self._journal.flush()

    # connection lifecycle -------------------------------------------------

    def connect(self, conn_id: int) -> None:
        if conn_id in self._conns:
            raise ValueError(f"connection {conn_id} already open")
        self._conns[conn_id] = _Conn(conn_id)

    def disconnect(self, conn_id: int) -> None:
        conn = self._conns.pop(conn_id, None)
        if conn and conn.client_id is not None:
            self._clients.pop(conn.client_id, None)

    @property
    def registered_clients(self) -> list[str]:
        return sorted(self._clients)

    # data path ------------------------------------------------------------

    def receive(self, conn_id: int, data: bytes, now_ms: float) -> Outgoing:
        """Feed raw bytes from ``conn_id``; returns frames to send, in order."""
        conn = self._conns[conn_id]
        conn.buf.feed(data)
        out: Outgoing = []
        while True:
            try:
                rec = conn.buf.pop()
            except CmpDecodeError as e:
                self._error(conn, f"{type(e).__name__}: {e}", out)
                continue
            if rec is None:
                return out
            try:
                out.extend(self.handle_record(conn_id, rec, now_ms))
            except ProtocolError as e:
                self._error(conn, f"{type(e).__name__}: {e}", out)

    def _error(self, conn: _Conn, reason: str, out: Outgoing) -> None:
        self.protocol_errors += 1
        log.debug("conn %d protocol error: %s", conn.conn_id, reason)
        self._log({"event": "error", "conn": conn.conn_id, "client_id": conn.client_id, "reason": reason})
        out.append((conn.conn_id, encode_cmp_record(ErrorReply(reason[:512]))))

    def _ack(self, conn: _Conn) -> tuple[int, bytes]:
        conn.ack_seq += 1
        return conn.conn_id, encode_cmp_record(Ack(conn.ack_seq))

    def handle_record(self, conn_id: int, record: CmpRecord, now_ms: float) -> Outgoing:
        conn = self._conns[conn_id]
        if isinstance(record, Hello):
            if conn.client_id is not None:
                raise ProtocolError("hello already completed on this connection")
            if record.client_id in self._clients:
                raise ProtocolError(f"client_id {record.client_id!r} already connected")
            conn.client_id = record.client_id
            self._clients[record.client_id] = conn_id
            self._log({"event": "hello", "conn": conn_id, "client_id": record.client_id, "ts": now_ms})
            return [self._ack(conn)]
        if not isinstance(record, (SystemMessage, FaultMessage)):
            raise ProtocolError(f"clients may not send {record.kind!r} records")
        if conn.client_id is None:
            raise UnregisteredClient("hello required before records")
        conn.records += 1
        now = round(now_ms)
        self._log({"event": record.kind, "client_id": conn.client_id, "ts": now, "record": record_to_json(record)})
        if self.on_record:
            self.on_record(conn_id, conn.client_id, conn.records, record, now_ms)
        if isinstance(record, SystemMessage):
            prev = self.fleet.get(conn.client_id)
            if prev is None or record.msg_timestamp_ms >= prev.last_system.msg_timestamp_ms:
                last_update = now if prev is None else max(now, prev.last_update_ts_ms)
                self.fleet[conn.client_id] = FleetEntry(conn.client_id, record, last_update)
            return [self._ack(conn)]
        alert = AlertRecord(len(self.alerts) + 1, record, now, conn.client_id, len(self._clients))
        self.alerts.append(alert)
        out = [self._ack(conn)]
        frame = encode_cmp_record(Alert(alert.alert_seq, alert.origin, alert.received_ts_ms, record))
        for cid in sorted(self._clients):
            out.append((self._clients[cid], frame))
        self.alert_deliveries += len(self._clients)
        self._log({"event": "alert", "alert_seq": alert.alert_seq, "origin": alert.origin,
                   "deliveries": len(self._clients), "ts": now})
        return out

    def query_fleet(self, now_ms: float) -> list[FleetEntry]:
        return [
            replace(e, stale=now_ms - e.last_update_ts_ms > self.staleness_ms)
            for _, e in sorted(self.fleet.items())
        ]


class CmpServer:
    """asyncio TCP front end for ``CmpCore``; all mutation runs on one loop."""

    def __init__(self, core: CmpCore, clock: Callable[[], float], host: str = "127.0.0.1", port: int = 8008) -> None:
        self.core = core
        self.clock = clock
        self.host = host
        self.port = port
        self._server: asyncio.base_events.Server | None = None
        self._writers: dict[int, asyncio.StreamWriter] = {}
        self._next_id = 0

    async def start(self) -> int:
        try:
            self._server = await asyncio.start_server(self._handle, self.host, self.port)
        except OSError as e:
            if e.errno == errno.EADDRINUSE:
                raise PortInUse(f"CMP port {self.port} in use") from e
            raise
        self.port = self._server.sockets[0].getsockname()[1]
        return self.port

    async def stop(self) -> None:
        if self._server:
            self._server.close()
            for w in list(self._writers.values()):
                w.close()
            await self._server.wait_closed()

    def _dispatch(self, out: Outgoing) -> None:
        for conn_id, data in out:
            w = self._writers.get(conn_id)
            if w is not None and not w.is_closing():
                w.write(data)

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self._next_id += 1
        conn_id = self._next_id
        self._writers[conn_id] = writer
        self.core.connect(conn_id)
        try:
            while data := await reader.read(65536):
                self._dispatch(self.core.receive(conn_id, data, self.clock()))
                await writer.drain()
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            self.core.disconnect(conn_id)
            self._writers.pop(conn_id, None)
            writer.close()


class CmpClient:
    """Minimal asyncio client: hello, send records, collect acks and alerts."""

    def __init__(self, client_id: str) -> None:
        self.client_id = client_id
        self.acks: list[int] = []
        self.alerts: list[Alert] = []
        self.errors: list[str] = []
        self._reader: asyncio.StreamReader | None = None
        self._writer: asyncio.StreamWriter | None = None
        self._task: asyncio.Task | None = None
        self._registered = asyncio.Event()
        self.on_alert: Callable[[Alert], None] | None = None
        self.on_ack: Callable[[int], None] | None = None

    async def connect(self, host: str, port: int) -> None:
        self._reader, self._writer = await asyncio.open_connection(host, port)
        self._task = asyncio.create_task(self._read_loop())
        self._writer.write(encode_cmp_record(Hello(self.client_id)))
        await self._writer.drain()
        await asyncio.wait_for(self._registered.wait(), 5.0)

    def send(self, record: CmpRecord) -> None:
        assert self._writer is not None, "not connected"
        self._writer.write(encode_cmp_record(record))

    def send_raw(self, data: bytes) -> None:
        assert self._writer is not None, "not connected"
        self._writer.write(data)

    async def drain(self) -> None:
        if self._writer:
            await self._writer.drain()

    async def _read_loop(self) -> None:
        buf = CmpFrameBuffer()
        assert self._reader is not None
        while data := await self._reader.read(65536):
            buf.feed(data)
            for rec in buf:
                if isinstance(rec, Ack):
                    self.acks.append(rec.seq)
                    if rec.seq == 0:
                        self._registered.set()
                    elif self.on_ack:
                        self.on_ack(rec.seq)
                elif isinstance(rec, Alert):
                    self.alerts.append(rec)
                    if self.on_alert:
                        self.on_alert(rec)
                elif isinstance(rec, ErrorReply):
                    self.errors.append(rec.reason)

    async def close(self) -> None:
        if self._writer:
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except ConnectionError:
                pass
        if self._task:
            self._task.cancel()
            try:
                await self._task
            except (asyncio.CancelledError, ConnectionError):
                pass
