"""Message types and wire codecs for each hop.

Three encodings live here:

* the fixed 56-byte CAV state frame carried over the air link and the
  OBU -> companion UDP datagram,
* the camera frame packet carried inside WebSocket binary messages,
* length-prefixed JSON records on the companion <-> CMP TCP stream.

All codecs are pure functions; ``CmpFrameBuffer`` holds the per-connection
reassembly state for the stream decoder.
"""

from __future__ import annotations

import enum
import json
import math
import struct
import zlib
from dataclasses import dataclass
from typing import Any, Union

from quickclear.errors import (
    BadHeader,
    BadMagic,
    BodyTooLarge,
    ChecksumMismatch,
    CmpDecodeError,
    FieldOutOfRange,
    FrameTruncated,
    InvalidMessage,
    MalformedBody,
    OutOfRange,
    UnknownKind,
)
from quickclear.geo import GeoPosition

U64_MAX = 2**64 - 1
U32_MAX = 2**32 - 1

# ---------------------------------------------------------------------------
# CAV state frame
# ---------------------------------------------------------------------------

CAV_MAGIC = b"V2"
CAV_VERSION = 1
CAV_MSG_TYPE = 1
_CAV_BODY = struct.Struct(">2sBBdddQQd")
_CRC = struct.Struct(">I")
CAV_FRAME_LEN = _CAV_BODY.size + _CRC.size  # 56


class IncidentType(enum.IntEnum):
    ACCIDENT = 1
    DEBRIS = 2
    STALLED_VEHICLE = 3


@dataclass(frozen=True, slots=True)
class CavStateMessage:
    pos: GeoPosition
    tx_timestamp_ms: int
    gps_time_ms: int
    ground_speed_mps: float

    def validate(self) -> None:
        if not isinstance(self.pos, GeoPosition):
            raise InvalidMessage("pos must be a GeoPosition")
        for name in ("tx_timestamp_ms", "gps_time_ms"):
            ts = getattr(self, name)
            if not _is_int(ts) or not 0 < ts <= U64_MAX:
                raise InvalidMessage(f"{name} must be a positive u64, got {ts!r}")
        v = self.ground_speed_mps
        if not _is_number(v) or not math.isfinite(v) or v < 0:
            raise InvalidMessage(f"ground_speed_mps must be finite and >= 0, got {v!r}")


def encode_cav_state(m: CavStateMessage) -> bytes:
    m.validate()
    body = _CAV_BODY.pack(
        CAV_MAGIC,
        CAV_VERSION,
        CAV_MSG_TYPE,
        float(m.pos.lat_deg),
        float(m.pos.lon_deg),
        float(m.pos.alt_m),
        m.tx_timestamp_ms,
        m.gps_time_ms,
        float(m.ground_speed_mps),
    )
    return body + _CRC.pack(zlib.crc32(body))


def decode_cav_state(b: bytes) -> CavStateMessage:
    if len(b) != CAV_FRAME_LEN:
        raise FrameTruncated(f"expected {CAV_FRAME_LEN} bytes, got {len(b)}")
    b = bytes(b)
    if b[:2] != CAV_MAGIC:
        raise BadMagic(f"bad magic {b[:2]!r}")
    (crc,) = _CRC.unpack_from(b, _CAV_BODY.size)
    if zlib.crc32(b[: _CAV_BODY.size]) != crc:
        raise ChecksumMismatch("CRC-32 mismatch")
    _, version, msg_type, lat, lon, alt, tx_ts, gps_ts, speed = _CAV_BODY.unpack_from(b)
    if version != CAV_VERSION or msg_type != CAV_MSG_TYPE:
        raise BadHeader(f"unsupported version/type {version}/{msg_type}")
    pos = _decode_position(lat, lon, alt)
    if tx_ts == 0:
        raise FieldOutOfRange("tx_timestamp_ms", tx_ts)
    if gps_ts == 0:
        raise FieldOutOfRange("gps_time_ms", gps_ts)
    if not math.isfinite(speed) or speed < 0:
        raise FieldOutOfRange("ground_speed_mps", speed)
    return CavStateMessage(pos, tx_ts, gps_ts, speed)


def _decode_position(lat: float, lon: float, alt: float) -> GeoPosition:
    try:
        return GeoPosition(lat, lon, alt)
    except OutOfRange as e:
        raise FieldOutOfRange(e.field, e.value) from None


# ---------------------------------------------------------------------------
# Camera frame packet
# ---------------------------------------------------------------------------

FRAME_MAGIC = b"QF"
FRAME_VERSION = 1
MAX_FRAME_PAYLOAD = 1_048_576
_FRAME_HEADER = struct.Struct(">2sBIQI")
FRAME_OVERHEAD = _FRAME_HEADER.size + _CRC.size


@dataclass(frozen=True, slots=True)
class FramePacket:
    frame_seq: int
    capture_ts_ms: int
    payload: bytes

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    def validate(self) -> None:
        if not _is_int(self.frame_seq) or not 0 <= self.frame_seq <= U32_MAX:
            raise InvalidMessage(f"frame_seq must be a u32, got {self.frame_seq!r}")
        if not _is_int(self.capture_ts_ms) or not 0 <= self.capture_ts_ms <= U64_MAX:
            raise InvalidMessage(f"capture_ts_ms must be a u64, got {self.capture_ts_ms!r}")
        if len(self.payload) > MAX_FRAME_PAYLOAD:
            raise InvalidMessage(f"payload of {len(self.payload)} bytes exceeds {MAX_FRAME_PAYLOAD}")


def encode_frame_packet(p: FramePacket) -> bytes:
    p.validate()
    head = _FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, p.frame_seq, p.capture_ts_ms, len(p.payload))
    body = head + bytes(p.payload)
    return body + _CRC.pack(zlib.crc32(body))


def decode_frame_packet(b: bytes) -> FramePacket:
    b = bytes(b)
    if len(b) < FRAME_OVERHEAD:
        raise FrameTruncated(f"frame packet shorter than {FRAME_OVERHEAD} bytes")
    if b[:2] != FRAME_MAGIC:
        raise BadMagic(f"bad magic {b[:2]!r}")
    _, version, seq, ts, length = _FRAME_HEADER.unpack_from(b)
    if version != FRAME_VERSION:
        raise BadHeader(f"unsupported frame version {version}")
    if length > MAX_FRAME_PAYLOAD:
        raise FieldOutOfRange("payload_len", length)
    if len(b) != FRAME_OVERHEAD + length:
        raise FrameTruncated(f"payload_len {length} does not match packet size {len(b)}")
    end = _FRAME_HEADER.size + length
    (crc,) = _CRC.unpack_from(b, end)
    if zlib.crc32(b[:end]) != crc:
        raise ChecksumMismatch("CRC-32 mismatch")
    return FramePacket(seq, ts, b[_FRAME_HEADER.size : end])


# ---------------------------------------------------------------------------
# CMP stream records
# ---------------------------------------------------------------------------

CMP_PREFIX = struct.Struct(">I")
MAX_CMP_BODY = 65_536


@dataclass(frozen=True, slots=True)
class SystemMessage:
    """Periodic CAV + UAV position report.

    ``cav_pos`` is ``None`` (and ``cav_age_ms`` is -1) until the companion
    has received its first CAV fix.
    """

    msg_timestamp_ms: int
    cav_pos: GeoPosition | None
    uav_pos: GeoPosition
    cav_age_ms: int

    kind = "system"


@dataclass(frozen=True, slots=True)
class FaultMessage:
    incident_pos: GeoPosition
    incident_time_ms: int
    incident_type: IncidentType

    kind = "fault"


@dataclass(frozen=True, slots=True)
class Hello:
    client_id: str

    kind = "hello"


@dataclass(frozen=True, slots=True)
class Ack:
    seq: int

    kind = "ack"


@dataclass(frozen=True, slots=True)
class Alert:
    alert_seq: int
    origin: str
    received_ts_ms: int
    fault: FaultMessage

    kind = "alert"


@dataclass(frozen=True, slots=True)
class ErrorReply:
    reason: str

    kind = "error"


CmpRecord = Union[SystemMessage, FaultMessage, Hello, Ack, Alert, ErrorReply]


def _is_int(v: object) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v: object) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _pos_json(p: GeoPosition) -> dict[str, float]:
    return {"lat_deg": float(p.lat_deg), "lon_deg": float(p.lon_deg), "alt_m": float(p.alt_m)}


def _check_ts(name: str, v: object) -> None:
    if not _is_int(v) or not 0 <= v <= U64_MAX:
        raise InvalidMessage(f"{name} must be a non-negative integer, got {v!r}")


def _fault_json(m: FaultMessage) -> dict[str, Any]:
    if not isinstance(m.incident_pos, GeoPosition):
        raise InvalidMessage("incident_pos must be a GeoPosition")
    _check_ts("incident_time_ms", m.incident_time_ms)
    try:
        code = IncidentType(m.incident_type)
    except ValueError:
        raise InvalidMessage(f"unknown incident_type {m.incident_type!r}") from None
    return {
        "incident_pos": _pos_json(m.incident_pos),
        "incident_time_ms": m.incident_time_ms,
        "incident_type": int(code),
    }


def record_to_json(m: CmpRecord) -> dict[str, Any]:
    """Validate ``m`` and return its JSON object form (``kind`` first)."""
    if isinstance(m, SystemMessage):
        _check_ts("msg_timestamp_ms", m.msg_timestamp_ms)
        if not isinstance(m.uav_pos, GeoPosition):
            raise InvalidMessage("uav_pos must be a GeoPosition")
        if not _is_int(m.cav_age_ms):
            raise InvalidMessage("cav_age_ms must be an integer")
        if m.cav_pos is None:
            if m.cav_age_ms != -1:
                raise InvalidMessage("cav_age_ms must be -1 when cav_pos is absent")
        elif not isinstance(m.cav_pos, GeoPosition):
            raise InvalidMessage("cav_pos must be a GeoPosition or None")
        elif m.cav_age_ms < 0:
            raise InvalidMessage("cav_age_ms must be >= 0 when cav_pos is present")
        return {
            "kind": "system",
            "msg_timestamp_ms": m.msg_timestamp_ms,
            "cav_pos": None if m.cav_pos is None else _pos_json(m.cav_pos),
            "uav_pos": _pos_json(m.uav_pos),
            "x_cav_age_ms": m.cav_age_ms,
        }
    if isinstance(m, FaultMessage):
        return {"kind": "fault", **_fault_json(m)}
    if isinstance(m, Hello):
        if not isinstance(m.client_id, str) or not m.client_id:
            raise InvalidMessage("client_id must be a non-empty string")
        return {"kind": "hello", "client_id": m.client_id}
    if isinstance(m, Ack):
        _check_ts("seq", m.seq)
        return {"kind": "ack", "seq": m.seq}
    if isinstance(m, Alert):
        _check_ts("alert_seq", m.alert_seq)
        _check_ts("received_ts_ms", m.received_ts_ms)
        if not isinstance(m.origin, str):
            raise InvalidMessage("origin must be a string")
        return {
            "kind": "alert",
            "alert_seq": m.alert_seq,
            "origin": m.origin,
            "received_ts_ms": m.received_ts_ms,
            "fault": _fault_json(m.fault),
        }
    if isinstance(m, ErrorReply):
        if not isinstance(m.reason, str):
            raise InvalidMessage("reason must be a string")
        return {"kind": "error", "reason": m.reason}
    raise InvalidMessage(f"not a CMP record: {type(m).__name__}")


def encode_cmp_record(m: CmpRecord) -> bytes:
    body = json.dumps(record_to_json(m), separators=(",", ":"), allow_nan=False).encode("utf-8")
    if len(body) > MAX_CMP_BODY:
        raise InvalidMessage(f"JSON body of {len(body)} bytes exceeds {MAX_CMP_BODY}")
    return CMP_PREFIX.pack(len(body)) + body


class _Malformed(Exception):
    pass


def _take(obj: dict, keys: tuple[str, ...]) -> list[Any]:
    if set(obj) != set(keys):
        raise _Malformed(f"expected fields {sorted(keys)}, got {sorted(obj)}")
    return [obj[k] for k in keys]


def _j_int(v: Any, name: str, lo: int = 0) -> int:
    if not _is_int(v) or not lo <= v <= U64_MAX:
        raise _Malformed(f"{name}: expected integer >= {lo}")
    return v


def _j_pos(v: Any, name: str) -> GeoPosition:
    if not isinstance(v, dict):
        raise _Malformed(f"{name}: expected object")
    lat, lon, alt = _take(v, ("lat_deg", "lon_deg", "alt_m"))
    try:
        return GeoPosition(lat, lon, alt)
    except OutOfRange as e:
        raise _Malformed(f"{name}.{e.field}: {e}") from None


def _j_fault(obj: Any) -> FaultMessage:
    if not isinstance(obj, dict):
        raise _Malformed("fault: expected object")
    pos, ts, code = _take(obj, ("incident_pos", "incident_time_ms", "incident_type"))
    if not _is_int(code):
        raise _Malformed("incident_type: expected integer code")
    try:
        itype = IncidentType(code)
    except ValueError:
        raise _Malformed(f"incident_type: unknown code {code}") from None
    return FaultMessage(_j_pos(pos, "incident_pos"), _j_int(ts, "incident_time_ms"), itype)


def record_from_json(obj: dict[str, Any]) -> CmpRecord:
    """Inverse of ``record_to_json``; raises ``_Malformed`` or ``UnknownKind``."""
    kind = obj.get("kind")
    fields = {k: v for k, v in obj.items() if k != "kind"}
    if kind == "system":
        ts, cav, uav, age = _take(fields, ("msg_timestamp_ms", "cav_pos", "uav_pos", "x_cav_age_ms"))
        age = _j_int(age, "x_cav_age_ms", lo=-1)
        if cav is None:
            if age != -1:
                raise _Malformed("x_cav_age_ms must be -1 when cav_pos is null")
            cav_pos = None
        else:
            cav_pos = _j_pos(cav, "cav_pos")
            if age < 0:
                raise _Malformed("x_cav_age_ms must be >= 0 when cav_pos is present")
        return SystemMessage(_j_int(ts, "msg_timestamp_ms"), cav_pos, _j_pos(uav, "uav_pos"), age)
    if kind == "fault":
        return _j_fault(fields)
    if kind == "hello":
        (cid,) = _take(fields, ("client_id",))
        if not isinstance(cid, str) or not cid:
            raise _Malformed("client_id: expected non-empty string")
        return Hello(cid)
    if kind == "ack":
        (seq,) = _take(fields, ("seq",))
        return Ack(_j_int(seq, "seq"))
    if kind == "alert":
        seq, origin, ts, fault = _take(fields, ("alert_seq", "origin", "received_ts_ms", "fault"))
        if not isinstance(origin, str):
            raise _Malformed("origin: expected string")
        return Alert(_j_int(seq, "alert_seq"), origin, _j_int(ts, "received_ts_ms"), _j_fault(fault))
    if kind == "error":
        (reason,) = _take(fields, ("reason",))
        if not isinstance(reason, str):
            raise _Malformed("reason: expected string")
        return ErrorReply(reason)
    raise UnknownKind(kind)


def decode_cmp_record(buf: bytes) -> tuple[CmpRecord, int] | None:
    """Decode the first complete frame in ``buf``.

    Returns ``(record, consumed)`` or ``None`` when more bytes are needed.
    Bytes past ``consumed`` belong to the next frame. On a bad body the
    raised error's ``consumed`` tells the caller how far to skip.
    """
    if len(buf) < CMP_PREFIX.size:
        return None
    (length,) = CMP_PREFIX.unpack_from(buf)
    if length > MAX_CMP_BODY:
        raise BodyTooLarge(length, MAX_CMP_BODY)
    end = CMP_PREFIX.size + length
    if len(buf) < end:
        return None
    body = bytes(buf[CMP_PREFIX.size : end])
    try:
        obj = json.loads(body.decode("utf-8"), parse_constant=_reject_constant)
    except (UnicodeDecodeError, ValueError, RecursionError) as e:
        raise MalformedBody(f"body is not UTF-8 JSON: {e}", consumed=end) from None
    if not isinstance(obj, dict):
        raise MalformedBody("body is not a JSON object", consumed=end)
    try:
        return record_from_json(obj), end
    except UnknownKind as e:
        raise UnknownKind(e.kind, consumed=end) from None
    except _Malformed as e:
        raise MalformedBody(str(e), consumed=end) from None


def _reject_constant(name: str) -> Any:
    raise ValueError(f"non-finite constant {name}")


class CmpFrameBuffer:
    """Per-connection incremental decoder for the CMP stream.

    Feed raw socket bytes with ``feed`` and drain with ``pop``. After a bad
    frame ``pop`` raises once and has already skipped past that frame, so
    the next ``pop`` continues with the following one. A frame whose length
    prefix exceeds the cap is discarded as its body arrives.
    """

    def __init__(self) -> None:
        self._buf = bytearray()
        self._skip = 0

    def feed(self, data: bytes) -> None:
        self._buf += data

    @property
    def buffered(self) -> int:
        return len(self._buf)

    def pop(self) -> CmpRecord | None:
        if self._skip:
            n = min(self._skip, len(self._buf))
            del self._buf[:n]
            self._skip -= n
            if self._skip:
                return None
        try:
            got = decode_cmp_record(self._buf)
        except BodyTooLarge:
            (length,) = CMP_PREFIX.unpack_from(self._buf)
            del self._buf[: CMP_PREFIX.size]
            self._skip = length
            raise
        except CmpDecodeError as e:
            del self._buf[: e.consumed]
            raise
        if got is None:
            return None
        record, consumed = got
        del self._buf[:consumed]
        return record

    def __iter__(self):
        while (rec := self.pop()) is not None:
            yield rec
