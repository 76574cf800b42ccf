"""Minimal RFC 6455 WebSocket stack used for the camera frame relay.

The protocol logic is sans-IO: ``WsConnection`` consumes raw bytes via
``receive_data`` and returns events, and queues outgoing bytes that the
caller collects with ``data_to_send``. ``FrameRelayServer`` and
``WsClient`` put it on asyncio streams for live runs.

Supported: opening handshake, binary/text messages up to ``MAX_MESSAGE``,
fragment reassembly (at most ``MAX_FRAGMENTS`` frames per message),
ping/pong, closing handshake. Not supported: extensions, subprotocols, TLS.
"""

from __future__ import annotations

import asyncio
import base64
import binascii
import enum
import errno
import hashlib
import logging
import os
import struct
from dataclasses import dataclass
from typing import Callable
from urllib.parse import parse_qs, urlsplit

from quickclear.errors import PortInUse, QuickClearError
from quickclear.wire import FRAME_OVERHEAD, MAX_FRAME_PAYLOAD

log = logging.getLogger(__name__)

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
# one maximal FramePacket must fit in a single message
MAX_MESSAGE = MAX_FRAME_PAYLOAD + FRAME_OVERHEAD
MAX_FRAGMENTS = 16
MAX_HANDSHAKE = 8192


class Opcode(enum.IntEnum):
    CONTINUATION = 0x0
    TEXT = 0x1
    BINARY = 0x2
    CLOSE = 0x8
    PING = 0x9
    PONG = 0xA

    @property
    def is_control(self) -> bool:
        return bool(self & 0x8)


class CloseCode(enum.IntEnum):
    NORMAL = 1000
    GOING_AWAY = 1001
    PROTOCOL_ERROR = 1002
    INVALID_PAYLOAD = 1007
    MESSAGE_TOO_BIG = 1009


class BadKey(QuickClearError, ValueError):
    pass


class HandshakeError(QuickClearError):
    def __init__(self, msg: str, status: int = 400) -> None:
        super().__init__(msg)
        self.status = status


class ProtocolViolation(QuickClearError):
    def __init__(self, msg: str, code: int = CloseCode.PROTOCOL_ERROR) -> None:
        super().__init__(msg)
        self.code = code


class ConnectionClosed(QuickClearError):
    def __init__(self, code: int | None = None, reason: str = "") -> None:
        super().__init__(f"connection closed ({code}) {reason}".strip())
        self.code = code
        self.reason = reason


def handshake_accept_key(client_key: str) -> str:
    """Sec-WebSocket-Accept value for a client's Sec-WebSocket-Key."""
    if not isinstance(client_key, str) or len(client_key) != 24:
        raise BadKey("Sec-WebSocket-Key must be 24 base64 characters")
    try:
        raw = base64.b64decode(client_key.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError):
        raise BadKey("Sec-WebSocket-Key is not valid base64") from None
    if len(raw) != 16:
        raise BadKey("Sec-WebSocket-Key must decode to 16 bytes")
    digest = hashlib.sha1((client_key + WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def _apply_mask(payload: bytes, key: bytes) -> bytes:
    if not payload:
        return b""
    n = len(payload)
    # XOR as one big integer; much faster than a Python-level byte loop
    k = (key * (n // 4 + 1))[:n]
    return (int.from_bytes(payload, "big") ^ int.from_bytes(k, "big")).to_bytes(n, "big")


def encode_frame(
    opcode: int,
    payload: bytes,
    mask_key: bytes | None = None,
    fin: bool = True,
    rsv: int = 0,
) -> bytes:
    """Serialize one frame (RFC 6455 section 5.2)."""
    head = bytearray()
    head.append((0x80 if fin else 0) | ((rsv & 0x7) << 4) | (opcode & 0xF))
    mask_bit = 0x80 if mask_key is not None else 0
    n = len(payload)
    if n < 126:
        head.append(mask_bit | n)
    elif n < 1 << 16:
        head.append(mask_bit | 126)
        head += struct.pack(">H", n)
    else:
        head.append(mask_bit | 127)
        head += struct.pack(">Q", n)
    if mask_key is None:
        return bytes(head) + bytes(payload)
    if len(mask_key) != 4:
        raise ValueError("mask key must be 4 bytes")
    return bytes(head) + mask_key + _apply_mask(bytes(payload), mask_key)


@dataclass(frozen=True)
class Frame:
    fin: bool
    opcode: Opcode
    masked: bool
    payload: bytes


class FrameParser:
    """Incremental frame decoder.

    ``expect_masked`` enforces the direction rule: frames from a client
    must be masked, frames from a server must not be.
    """

    def __init__(self, expect_masked: bool, max_frame: int = MAX_MESSAGE) -> None:
        self.expect_masked = expect_masked
        self.max_frame = max_frame
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        frames = []
        while (f := self._next()) is not None:
            frames.append(f)
        return frames

    def _next(self) -> Frame | None:
        buf = self._buf
        if len(buf) < 2:
            return None
        b0, b1 = buf[0], buf[1]
        if b0 & 0x70:
            raise ProtocolViolation("reserved bits set without a negotiated extension")
        try:
            opcode = Opcode(b0 & 0x0F)
        except ValueError:
            raise ProtocolViolation(f"unknown opcode {b0 & 0x0F:#x}") from None
        fin = bool(b0 & 0x80)
        masked = bool(b1 & 0x80)
        if masked != self.expect_masked:
            raise ProtocolViolation("client frames must be masked" if self.expect_masked
                                    else "server frames must not be masked")
        n = b1 & 0x7F
        pos = 2
        if opcode.is_control and (not fin or n > 125):
            raise ProtocolViolation("control frames must be final and at most 125 bytes")
        if n == 126:
            if len(buf) < 4:
                return None
            (n,) = struct.unpack_from(">H", buf, 2)
            pos = 4
        elif n == 127:
            if len(buf) < 10:
                return None
            (n,) = struct.unpack_from(">Q", buf, 2)
            if n >> 63:
                raise ProtocolViolation("64-bit length with most significant bit set")
            pos = 10
        if n > self.max_frame:
            raise ProtocolViolation(f"frame of {n} bytes exceeds {self.max_frame}", CloseCode.MESSAGE_TOO_BIG)
        key = b""
        if masked:
            if len(buf) < pos + 4:
                return None
            key = bytes(buf[pos : pos + 4])
            pos += 4
        if len(buf) < pos + n:
            return None
        payload = bytes(buf[pos : pos + n])
        del buf[: pos + n]
        if masked:
            payload = _apply_mask(payload, key)
        return Frame(fin, opcode, masked, payload)


# events -------------------------------------------------------------------


@dataclass(frozen=True)
class Request:
    path: str
    query: dict[str, list[str]]
    key: str
    headers: dict[str, str]


@dataclass(frozen=True)
class Accepted:
    pass


@dataclass(frozen=True)
class Message:
    data: bytes | str

    @property
    def binary(self) -> bool:
        return isinstance(self.data, bytes)


@dataclass(frozen=True)
class Ping:
    payload: bytes


@dataclass(frozen=True)
class Pong:
    payload: bytes


@dataclass(frozen=True)
class Closed:
    code: int | None
    reason: str
    by_peer: bool


class State(enum.Enum):
    CONNECTING = "CONNECTING"
    OPEN = "OPEN"
    CLOSING = "CLOSING"
    CLOSED = "CLOSED"


def _parse_headers(lines: list[str]) -> dict[str, str]:
    headers: dict[str, str] = {}
    for line in lines:
        if ":" not in line:
            raise HandshakeError(f"malformed header line {line!r}")
        name, _, value = line.partition(":")
        name = name.strip().lower()
        value = value.strip()
        headers[name] = f"{headers[name]}, {value}" if name in headers else value
    return headers


def _has_token(value: str, token: str) -> bool:
    return token in (t.strip().lower() for t in value.split(","))


class WsConnection:
    """One endpoint of a WebSocket connection, server or client side."""

    def __init__(
        self,
        client: bool,
        max_message: int = MAX_MESSAGE,
        max_fragments: int = MAX_FRAGMENTS,
        mask_source: Callable[[], bytes] | None = None,
    ) -> None:
        self.client = client
        self.state = State.CONNECTING
        self.max_message = max_message
        self.max_fragments = max_fragments
        self._mask = mask_source or (lambda: os.urandom(4))
        self._in = bytearray()
        self._out = bytearray()
        self._parser = FrameParser(expect_masked=not client, max_frame=max_message)
        self._frag_op: Opcode | None = None
        self._frags: list[bytes] = []
        self._frag_size = 0
        self._request: Request | None = None
        self._client_key: str | None = None
        self.close_code: int | None = None
        self.close_sent = False

    # handshake ------------------------------------------------------------

    def initiate(self, host: str, path: str = "/", key: str | None = None) -> None:
        """Client side: queue the upgrade request."""
        assert self.client and self.state is State.CONNECTING
        self._client_key = key or base64.b64encode(os.urandom(16)).decode("ascii")
        req = (
            f"GET {path} HTTP/1.1\r\n"
            f"Host: {host}\r\n"
            "Upgrade: websocket\r\n"
            "Connection: Upgrade\r\n"
            f"Sec-WebSocket-Key: {self._client_key}\r\n"
            "Sec-WebSocket-Version: 13\r\n\r\n"
        )
        self._out += req.encode("ascii")

    def accept(self) -> None:
        """Server side: answer the pending upgrade request with 101."""
        assert not self.client and self._request is not None and self.state is State.CONNECTING
        resp = (
            "HTTP/1.1 101 Switching Protocols\r\n"
            "Upgrade: websocket\r\n"
            "Connection: Upgrade\r\n"
            f"Sec-WebSocket-Accept: {handshake_accept_key(self._request.key)}\r\n\r\n"
        )
        self._out += resp.encode("ascii")
        self.state = State.OPEN

    def reject(self, status: int = 400, reason: str = "Bad Request") -> None:
        body = reason.encode()
        self._out += (
            f"HTTP/1.1 {status} {reason}\r\nContent-Length: {len(body)}\r\nConnection: close\r\n\r\n"
        ).encode("ascii") + body
        self.state = State.CLOSED

    def _take_head(self) -> list[str] | None:
        end = self._in.find(b"\r\n\r\n")
        if end < 0:
            if len(self._in) > MAX_HANDSHAKE:
                raise HandshakeError("handshake too large", 431)
            return None
        head = bytes(self._in[:end]).decode("latin-1")
        del self._in[: end + 4]
        return head.split("\r\n")

    def _parse_request(self) -> Request | None:
        lines = self._take_head()
        if lines is None:
            return None
        parts = lines[0].split(" ")
        if len(parts) != 3 or parts[0] != "GET" or not parts[2].startswith("HTTP/1."):
            raise HandshakeError(f"not an HTTP GET upgrade request: {lines[0][:80]!r}")
        headers = _parse_headers(lines[1:])
        if "host" not in headers:
            raise HandshakeError("missing Host header")
        if headers.get("upgrade", "").lower() != "websocket":
            raise HandshakeError("missing Upgrade: websocket")
        if not _has_token(headers.get("connection", ""), "upgrade"):
            raise HandshakeError("missing Connection: Upgrade")
        if headers.get("sec-websocket-version") != "13":
            raise HandshakeError("unsupported Sec-WebSocket-Version", 426)
        key = headers.get("sec-websocket-key", "")
        try:
            handshake_accept_key(key)
        except BadKey as e:
            raise HandshakeError(str(e)) from None
        url = urlsplit(parts[1])
        return Request(url.path, parse_qs(url.query), key, headers)

    def _parse_response(self) -> bool:
        lines = self._take_head()
        if lines is None:
            return False
        parts = lines[0].split(" ", 2)
        if len(parts) < 2 or parts[1] != "101":
            raise HandshakeError(f"server refused upgrade: {lines[0][:80]!r}", int(parts[1]) if parts[1:2] and parts[1].isdigit() else 400)
        headers = _parse_headers(lines[1:])
        if headers.get("upgrade", "").lower() != "websocket" or not _has_token(headers.get("connection", ""), "upgrade"):
            raise HandshakeError("bad upgrade response headers")
        if headers.get("sec-websocket-accept") != handshake_accept_key(self._client_key or ""):
            raise HandshakeError("Sec-WebSocket-Accept mismatch")
        return True

    # data path ------------------------------------------------------------

    def receive_data(self, data: bytes) -> list:
        """Feed bytes from the peer and return the resulting events.

        A protocol violation queues a Close frame with the matching status
        code, moves to CLOSED and is reported as a ``Closed`` event with
        ``by_peer=False``.
        """
        if self.state is State.CLOSED:
            return []
        self._in += data
        events: list = []
        if self.state is State.CONNECTING:
            try:
                if self.client:
                    if not self._parse_response():
                        return events
                    self.state = State.OPEN
                    events.append(Accepted())
                else:
                    if self._request is not None:
                        # bytes after the upgrade request, before our 101
                        self._fail_handshake(events, HandshakeError("data sent before handshake completed"))
                        return events
                    req = self._parse_request()
                    if req is None:
                        return events
                    self._request = req
                    events.append(req)
                    if self._in:
                        self._fail_handshake(events, HandshakeError("data sent before handshake completed"))
                    return events
            except HandshakeError as e:
                self._fail_handshake(events, e)
                return events
        if self._in:
            data, self._in = bytes(self._in), bytearray()
            try:
                for frame in self._parser.feed(data):
                    self._on_frame(frame, events)
                    if self.state is State.CLOSED:
                        break
            except ProtocolViolation as e:
                self._fail(e.code, str(e), events)
        return events

    def _fail_handshake(self, events: list, e: HandshakeError) -> None:
        log.debug("handshake failed: %s", e)
        if not self.client:
            self.reject(e.status, "Bad Request")
        self.state = State.CLOSED
        events.append(Closed(None, str(e), by_peer=False))

    def _fail(self, code: int, reason: str, events: list) -> None:
        log.debug("protocol violation (%d): %s", code, reason)
        if not self.close_sent:
            self._send_close(code, reason)
        self.close_code = code
        self.state = State.CLOSED
        events.append(Closed(code, reason, by_peer=False))

    def _on_frame(self, f: Frame, events: list) -> None:
        if f.opcode is Opcode.PING:
            events.append(Ping(f.payload))
            if self.state is State.OPEN:
                self._queue(Opcode.PONG, f.payload)
            return
        if f.opcode is Opcode.PONG:
            events.append(Pong(f.payload))
            return
        if f.opcode is Opcode.CLOSE:
            code, reason = self._parse_close(f.payload)
            if not self.close_sent:
                self._send_close(code if code is not None else CloseCode.NORMAL)
            self.close_code = code
            self.state = State.CLOSED
            events.append(Closed(code, reason, by_peer=True))
            return
        if self.state is not State.OPEN:
            return
        if f.opcode is Opcode.CONTINUATION:
            if self._frag_op is None:
                raise ProtocolViolation("continuation frame without a message in progress")
        else:
            if self._frag_op is not None:
                raise ProtocolViolation("new data frame while a fragmented message is in progress")
            self._frag_op = f.opcode
        self._frags.append(f.payload)
        self._frag_size += len(f.payload)
        if len(self._frags) > self.max_fragments:
            raise ProtocolViolation(f"message split into more than {self.max_fragments} fragments")
        if self._frag_size > self.max_message:
            raise ProtocolViolation(f"message exceeds {self.max_message} bytes", CloseCode.MESSAGE_TOO_BIG)
        if not f.fin:
            return
        payload = b"".join(self._frags)
        op = self._frag_op
        self._frag_op, self._frags, self._frag_size = None, [], 0
        if op is Opcode.TEXT:
            try:
                events.append(Message(payload.decode("utf-8")))
            except UnicodeDecodeError:
                raise ProtocolViolation("text message is not UTF-8", CloseCode.INVALID_PAYLOAD) from None
        else:
            events.append(Message(payload))

    @staticmethod
    def _parse_close(payload: bytes) -> tuple[int | None, str]:
        if len(payload) == 0:
            return None, ""
        if len(payload) == 1:
            raise ProtocolViolation("close payload of 1 byte")
        (code,) = struct.unpack_from(">H", payload)
        try:
            reason = payload[2:].decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolViolation("close reason is not UTF-8", CloseCode.INVALID_PAYLOAD) from None
        return code, reason

    def _queue(self, opcode: int, payload: bytes, fin: bool = True) -> None:
        self._out += encode_frame(opcode, payload, self._mask() if self.client else None, fin=fin)

    def _send_close(self, code: int, reason: str = "") -> None:
        self._queue(Opcode.CLOSE, struct.pack(">H", code) + reason.encode("utf-8")[:120])
        self.close_sent = True

    def _require_open(self) -> None:
        if self.state is State.CONNECTING:
            raise ProtocolViolation("handshake not complete")
        if self.state is not State.OPEN:
            raise ConnectionClosed(self.close_code)

    def send_binary(self, payload: bytes, fragment_size: int | None = None) -> None:
        self._require_open()
        if len(payload) > self.max_message:
            raise ValueError(f"message of {len(payload)} bytes exceeds {self.max_message}")
        if not fragment_size or len(payload) <= fragment_size:
            self._queue(Opcode.BINARY, payload)
            return
        chunks = [payload[i : i + fragment_size] for i in range(0, len(payload), fragment_size)]
        for i, chunk in enumerate(chunks):
            self._queue(Opcode.BINARY if i == 0 else Opcode.CONTINUATION, chunk, fin=i == len(chunks) - 1)

    def send_text(self, text: str) -> None:
        self._require_open()
        self._queue(Opcode.TEXT, text.encode("utf-8"))

    def ping(self, payload: bytes = b"") -> None:
        self._require_open()
        self._queue(Opcode.PING, payload)

    def close(self, code: int = CloseCode.NORMAL, reason: str = "") -> None:
        if self.state is State.OPEN:
            self._send_close(code, reason)
            self.state = State.CLOSING

    def data_to_send(self) -> bytes:
        out, self._out = bytes(self._out), bytearray()
        return out


def connected_pair(path: str = "/publish", mask_source: Callable[[], bytes] | None = None) -> tuple[WsConnection, WsConnection]:
    """Client/server connections with the handshake already done in memory."""
    client = WsConnection(client=True, mask_source=mask_source)
    server = WsConnection(client=False)
    client.initiate("sim", path, key=base64.b64encode(b"quickclear-sim!!").decode("ascii"))
    server.receive_data(client.data_to_send())
    server.accept()
    client.receive_data(server.data_to_send())
    return client, server


# asyncio front ends ---------------------------------------------------------


class Role(enum.Enum):
    PUBLISHER = "PUBLISHER"
    OBSERVER = "OBSERVER"


def role_for(req: Request) -> Role | None:
    role = (req.query.get("role") or [""])[0].lower()
    if req.path == "/publish" or role == "publisher":
        return Role.PUBLISHER
    if req.path == "/observe" or role == "observer":
        return Role.OBSERVER
    return None


class FrameRelayServer:
    """Relays every publisher message verbatim to all current observers.

    Observers only see messages published after they joined; nothing is
    stored. ``on_publish(data, now)`` fires once per relayed message.
    """

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 8765,
        clock: Callable[[], float] | None = None,
        on_publish: Callable[[bytes, float], None] | None = None,
    ) -> None:
        self.host = host
        self.port = port
        self.clock = clock or (lambda: 0.0)
        self.on_publish = on_publish
        self._server: asyncio.base_events.Server | None = None
        self._observers: dict[int, tuple[WsConnection, asyncio.StreamWriter]] = {}
        self._next_id = 0
        self.violations: list[int] = []
        self.deliveries = 0

    @property
    def observer_count(self) -> int:
        return len(self._observers)

    async def start(self) -> int:
        try:
            self._server = await asyncio.start_server(self._handle, self.host, self.port)
        except OSError as e:
            if e.errno == errno.EADDRINUSE:
                raise PortInUse(f"WebSocket port {self.port} in use") from e
            raise
        self.port = self._server.sockets[0].getsockname()[1]
        return self.port

    async def stop(self) -> None:
        if self._server:
            self._server.close()
            for ws, w in list(self._observers.values()):
                ws.close(CloseCode.GOING_AWAY)
                w.write(ws.data_to_send())
                w.close()
            await self._server.wait_closed()

    def register_observer(self, ws: WsConnection, writer: asyncio.StreamWriter) -> int:
        self._next_id += 1
        self._observers[self._next_id] = (ws, writer)
        return self._next_id

    def broadcast(self, data: bytes) -> int:
        n = 0
        for oid, (ws, w) in list(self._observers.items()):
            if w.is_closing() or ws.state is not State.OPEN:
                self._observers.pop(oid, None)
                continue
            ws.send_binary(data)
            w.write(ws.data_to_send())
            n += 1
        self.deliveries += n
        return n

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        ws = WsConnection(client=False)
        role: Role | None = None
        oid: int | None = None
        try:
            while ws.state is not State.CLOSED:
                data = await reader.read(65536)
                if not data:
                    break
                for ev in ws.receive_data(data):
                    if isinstance(ev, Request):
                        role = role_for(ev)
                        if role is None:
                            ws.reject(404, "Not Found")
                        else:
                            ws.accept()
                            if role is Role.OBSERVER:
                                oid = self.register_observer(ws, writer)
                    elif isinstance(ev, Message) and role is Role.PUBLISHER and ev.binary:
                        if self.on_publish:
                            self.on_publish(ev.data, self.clock())
                        self.broadcast(ev.data)
                    elif isinstance(ev, Closed) and not ev.by_peer and ev.code is not None:
                        self.violations.append(ev.code)
                writer.write(ws.data_to_send())
                await writer.drain()
        except ConnectionError:
            pass
        finally:
            if oid is not None:
                self._observers.pop(oid, None)
            try:
                writer.write(ws.data_to_send())
                writer.close()
            except (ConnectionError, RuntimeError):
                pass


class WsClient:
    """asyncio WebSocket client used by the publisher and by observers."""

    def __init__(self) -> None:
        self.ws = WsConnection(client=True)
        self.messages: asyncio.Queue[bytes | str] = asyncio.Queue()
        self.closed = asyncio.Event()
        self.close_code: int | None = None
        self._reader: asyncio.StreamReader | None = None
        self._writer: asyncio.StreamWriter | None = None
        self._task: asyncio.Task | None = None

    async def connect(self, host: str, port: int, path: str) -> None:
        self._reader, self._writer = await asyncio.open_connection(host, port)
        self.ws.initiate(f"{host}:{port}", path)
        self._writer.write(self.ws.data_to_send())
        opened = asyncio.get_running_loop().create_future()
        self._task = asyncio.create_task(self._read_loop(opened))
        await asyncio.wait_for(opened, 5.0)

    async def _read_loop(self, opened: asyncio.Future) -> None:
        assert self._reader is not None and self._writer is not None
        try:
            while data := await self._reader.read(65536):
                for ev in self.ws.receive_data(data):
                    if isinstance(ev, Accepted) and not opened.done():
                        opened.set_result(True)
                    elif isinstance(ev, Message):
                        self.messages.put_nowait(ev.data)
                    elif isinstance(ev, Closed):
                        self.close_code = ev.code
                        if not opened.done():
                            opened.set_exception(ConnectionClosed(ev.code, ev.reason))
                out = self.ws.data_to_send()
                if out:
                    self._writer.write(out)
                if self.ws.state is State.CLOSED:
                    break
        except ConnectionError:
            pass
        finally:
            if not opened.done():
                opened.set_exception(ConnectionClosed(None, "connection lost during handshake"))
            self.closed.set()

    def send_binary(self, payload: bytes) -> None:
        assert self._writer is not None
        self.ws.send_binary(payload)
        self._writer.write(self.ws.data_to_send())

    async def drain(self) -> None:
        if self._writer:
            await self._writer.drain()

    async def recv(self, timeout: float = 5.0) -> bytes | str:
        return await asyncio.wait_for(self.messages.get(), timeout)

    async def close(self) -> None:
        if self._writer is None:
            return
        self.ws.close()
        try:
            self._writer.write(self.ws.data_to_send())
            await asyncio.wait_for(self.closed.wait(), 2.0)
        except (ConnectionError, asyncio.TimeoutError):
            pass
        self._writer.close()
        if self._task:
            self._task.cancel()
            try:
                await self._task
            except (asyncio.CancelledError, ConnectionError):
                pass
