"""UAV companion computer logic.

The companion sits between the UAV's OBU and the two uplinks: it ingests
CAV state datagrams, composes System Messages on a 1-2 s cadence, raises
one Fault Message per incident zone the CAV enters, and publishes camera
frames to the frame relay. Everything here is transport-free; the
simulation and live harnesses feed it events and carry its output.
"""

from __future__ import annotations

import hashlib
import logging
import random
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

from quickclear.errors import DecodeError, QuickClearError
from quickclear.geo import GeoPosition, surface_distance_m
from quickclear.wire import (
    CavStateMessage,
    FaultMessage,
    FramePacket,
    IncidentType,
    SystemMessage,
    decode_cav_state,
    encode_frame_packet,
)

log = logging.getLogger(__name__)

DEFAULT_ZONE_RADIUS_M = 30.0
FRAME_RING_SIZE = 32


@dataclass(frozen=True)
class IncidentZone:
    id: str
    center: GeoPosition
    radius_m: float = DEFAULT_ZONE_RADIUS_M
    incident_type: IncidentType = IncidentType.ACCIDENT

    def __post_init__(self) -> None:
        if not self.radius_m > 0:
            raise ValueError(f"zone {self.id}: radius_m must be > 0")


@dataclass
class CompanionState:
    last_cav: tuple[CavStateMessage, float] | None = None
    last_system_sent_ms: float | None = None
    incident_latches: set[str] = field(default_factory=set)
    decode_errors: Counter = field(default_factory=Counter)
    stale_discarded: int = 0
    ingested: int = 0

    @property
    def error_count(self) -> int:
        return sum(self.decode_errors.values())


class Companion:
    """Stateful companion pipeline driven by timestamped events.

    ``uav_position`` maps a clock reading (ms) to the UAV's current position.
    ``epoch_ms`` is added to the local clock when stamping outgoing records,
    so records carry wall-style milliseconds-since-epoch timestamps.
    """

    def __init__(
        self,
        uav_position: Callable[[float], GeoPosition],
        zones: Iterable[IncidentZone] = (),
        min_interval_ms: int = 1000,
        max_interval_ms: int = 2000,
        epoch_ms: int = 0,
    ) -> None:
        if not 0 < min_interval_ms <= max_interval_ms:
            raise ValueError("need 0 < min_interval_ms <= max_interval_ms")
        self.uav_position = uav_position
        self.zones = list(zones)
        ids = [z.id for z in self.zones]
        if len(set(ids)) != len(ids):
            raise ValueError("incident zone ids must be unique")
        self.min_interval_ms = min_interval_ms
        self.max_interval_ms = max_interval_ms
        self.epoch_ms = epoch_ms
        self.state = CompanionState()

    def ingest_obu_datagram(self, b: bytes, recv_ts_ms: float) -> CavStateMessage | None:
        """Decode one OBU datagram and keep it if it is the newest fix.

        Returns the accepted message, or ``None`` when it was stale or a
        duplicate. Decode errors are counted and re-raised; state is left
        untouched in both rejection paths.
        """
        st = self.state
        try:
            msg = decode_cav_state(b)
        except DecodeError as e:
            st.decode_errors[type(e).__name__] += 1
            raise
        if st.last_cav is not None and msg.tx_timestamp_ms <= st.last_cav[0].tx_timestamp_ms:
            st.stale_discarded += 1
            return None
        st.last_cav = (msg, recv_ts_ms)
        st.ingested += 1
        return msg

    def has_fresh_fix(self) -> bool:
        st = self.state
        if st.last_cav is None:
            return False
        return st.last_system_sent_ms is None or st.last_cav[1] > st.last_system_sent_ms

    def compose_system_message(self, now_ms: float) -> SystemMessage | None:
        """Emit a System Message if the cadence allows it.

        A message goes out once ``min_interval_ms`` has passed and a fix
        arrived since the last one, or once ``max_interval_ms`` has passed
        regardless. The very first call always emits.
        """
        st = self.state
        last = st.last_system_sent_ms
        if last is not None:
            gap = now_ms - last
            if not (gap >= self.max_interval_ms or (gap >= self.min_interval_ms and self.has_fresh_fix())):
                return None
        if st.last_cav is None:
            cav_pos, age = None, -1
        else:
            cav, recv_ts = st.last_cav
            cav_pos, age = cav.pos, max(0, round(now_ms - recv_ts))
        msg = SystemMessage(
            msg_timestamp_ms=self.epoch_ms + round(now_ms),
            cav_pos=cav_pos,
            uav_pos=self.uav_position(now_ms),
            cav_age_ms=age,
        )
        st.last_system_sent_ms = now_ms
        return msg

    def check_incident(self, now_ms: float, zones: Iterable[IncidentZone] | None = None) -> FaultMessage | None:
        st = self.state
        if st.last_cav is None:
            return None
        pos = st.last_cav[0].pos
        for zone in self.zones if zones is None else zones:
            if zone.id in st.incident_latches:
                continue
            if surface_distance_m(pos, zone.center) <= zone.radius_m:
                st.incident_latches.add(zone.id)
                log.info("CAV entered zone %s at t=%s", zone.id, now_ms)
                return FaultMessage(zone.center, self.epoch_ms + round(now_ms), zone.incident_type)
        return None


class NotConnected(QuickClearError):
    """Frame could not be sent; it was kept in the publisher's ring."""

    def __init__(self, packet: FramePacket) -> None:
        super().__init__(f"frame {packet.frame_seq} buffered, socket not connected")
        self.packet = packet


class SyntheticCamera:
    """Deterministic pseudo-image source.

    Each payload starts with the frame number and is otherwise filled from
    a per-frame seeded byte stream, so any corruption shows in its hash.
    """

    def __init__(self, seed: int = 0, size: int = 16_384) -> None:
        if size < 8:
            raise ValueError("frame size must be at least 8 bytes")
        self.seed = seed
        self.size = size

    def capture(self, frame_seq: int) -> bytes:
        rng = random.Random((self.seed << 32) ^ frame_seq)
        return frame_seq.to_bytes(8, "big") + rng.randbytes(self.size - 8)


class FramePublisher:
    """Numbers frames and hands encoded packets to a send callback.

    While disconnected, packets queue in a ring of ``ring_size`` (oldest
    dropped first) and are flushed in order on ``connect``.
    """

    def __init__(self, camera: SyntheticCamera, ring_size: int = FRAME_RING_SIZE) -> None:
        self.camera = camera
        self._send: Callable[[bytes], None] | None = None
        self._ring: deque[FramePacket] = deque(maxlen=ring_size)
        self._seq = 0
        self.ring_dropped = 0
        self.published_hashes: dict[int, str] = {}

    @property
    def connected(self) -> bool:
        return self._send is not None

    @property
    def buffered(self) -> list[FramePacket]:
        return list(self._ring)

    def connect(self, send: Callable[[bytes], None]) -> int:
        """Attach a transport and flush the backlog; returns frames flushed."""
        self._send = send
        n = 0
        while self._ring:
            send(encode_frame_packet(self._ring.popleft()))
            n += 1
        return n

    def disconnect(self) -> None:
        self._send = None

    def publish_frame(self, now_ms: float) -> FramePacket:
        self._seq += 1
        pkt = FramePacket(self._seq, round(now_ms), self.camera.capture(self._seq))
        data = encode_frame_packet(pkt)
        self.published_hashes[pkt.frame_seq] = hashlib.sha256(data).hexdigest()
        if self._send is None:
            if len(self._ring) == self._ring.maxlen:
                self.ring_dropped += 1
            self._ring.append(pkt)
            raise NotConnected(pkt)
        self._send(data)
        return pkt
