"""Single-threaded discrete-event simulation of the full relay chain.

All actors share one integer-millisecond clock. Events are processed in
(time, priority, insertion sequence) order; deliveries sort ahead of new
transmissions at the same instant, in hop order.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import random
from pathlib import Path
from typing import Any, Callable

from quickclear.airlink import Channel, DeliveryOutcome
from quickclear.cmp_endpoint import CmpCore
from quickclear.companion import Companion, FramePublisher, NotConnected, SyntheticCamera
from quickclear.errors import DecodeError
from quickclear.framesock import Message, WsConnection, connected_pair
from quickclear.geo import slant_distance_m, surface_distance_m
from quickclear.harness.result import FaultArrival, RunResult, SystemArrival
from quickclear.metrics import Hop, Recorder
from quickclear.scenario import Scenario
from quickclear.wire import (
    Alert,
    CavStateMessage,
    CmpFrameBuffer,
    FaultMessage,
    Hello,
    SystemMessage,
    decode_frame_packet,
    encode_cav_state,
    encode_cmp_record,
)

log = logging.getLogger(__name__)

GPS_UTC_OFFSET_MS = 18_000
SPEED_PROBE_MS = 100

_PRIO = {
    "dsrc_rx": 0,
    "udp_rx": 1,
    "ws_rx": 2,
    "cmp_rx": 3,
    "cmp_down": 4,
    "ws_link": 5,
    "broadcast": 6,
    "tick": 7,
    "frame": 8,
}


class _OrderedLink:
    """Channel wrapper for stream transports: arrivals never overtake."""

    def __init__(self, channel: Channel) -> None:
        self.channel = channel
        self._last_arrival = 0

    def send(self, d_m: float, t: int) -> DeliveryOutcome:
        out = self.channel.transmit_at_distance(d_m, t)
        if out.delivered:
            arrival = max(out.arrival_ts_ms, self._last_arrival)
            self._last_arrival = arrival
            out = DeliveryOutcome(out.verdict, arrival)
        return out


class Simulation:
    def __init__(self, scenario: Scenario, duration_ms: int | None = None, journal: Path | None = None) -> None:
        self.sc = scenario
        cfg = scenario.config
        self.duration = duration_ms if duration_ms is not None else cfg.duration_ms
        self.epoch = cfg.epoch_ms
        self.recorder = Recorder()
        self.channels = {hop: Channel(p) for hop, p in scenario.channels.items()}
        self.companion = Companion(
            uav_position=scenario.uav.reported_position,
            zones=scenario.zones,
            min_interval_ms=cfg.cadence.min_interval_ms,
            max_interval_ms=cfg.cadence.max_interval_ms,
            epoch_ms=self.epoch,
        )
        self.result = RunResult(scenario, "SIM", [])
        self._queue: list[tuple[int, int, int, str, Any]] = []
        self._seq = 0
        self._cav_seq = 0
        self._udp_seq = 0

        # CMP: companion is connection 1, other fleet members follow
        self.cmp: CmpCore | None = None
        self._cmp_link: _OrderedLink | None = None
        if scenario.has_cmp:
            self.cmp = CmpCore(cfg.cmp.staleness_ms, journal=journal)
            self._cmp_link = _OrderedLink(self.channels[Hop.CMP_TCP])
        self._cmp_clients: dict[int, str] = {}
        self._cmp_bufs: dict[int, CmpFrameBuffer] = {}
        self._cmp_pending: dict[int, tuple[int, str, Any]] = {}
        self._cmp_records_sent = 0

        # frame relay: an in-memory WebSocket pair per participant
        mask_rng = random.Random(cfg.seed)
        self._ws_pub, self._ws_srv = connected_pair("/publish", mask_source=lambda: mask_rng.randbytes(4))
        self._observers: list[tuple[WsConnection, WsConnection]] = [
            connected_pair("/observe") for _ in range(cfg.frames.observers)
        ]
        self.result.observer_frames = [{} for _ in self._observers]
        self._ws_link = _OrderedLink(self.channels[Hop.WS])
        self._ws_pending: dict[int, int] = {}
        self.publisher = FramePublisher(SyntheticCamera(cfg.seed, cfg.frames.size_bytes))
        self._now = 0

    # scheduling -------------------------------------------------------------

    def _push(self, t: int, kind: str, payload: Any = None) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (t, _PRIO[kind], self._seq, kind, payload))

    def _log(self, ev: str, **fields: Any) -> None:
        self.result.events.append({"t": self._now, "ev": ev, **fields})

    def _distance(self, t: int) -> float:
        return slant_distance_m(self.sc.cav.true_position(t), self.sc.uav.true_position(t))

    def run(self) -> RunResult:
        cfg = self.sc.config
        self._push(0, "broadcast")
        self._push(0, "tick")
        self._push(0, "frame")
        for start, end in cfg.frames.outages:
            self._push(start, "ws_link", False)
            self._push(end, "ws_link", True)
        self.publisher.connect(self._ws_send)
        if self.cmp is not None:
            self._cmp_connect(1, cfg.cmp.client_id)
            for i, cid in enumerate(cfg.cmp.extra_clients, start=2):
                self._cmp_connect(i, cid)
        handlers: dict[str, Callable[[Any], None]] = {
            "broadcast": self._on_broadcast,
            "dsrc_rx": self._on_dsrc_rx,
            "udp_rx": self._on_udp_rx,
            "tick": self._on_tick,
            "cmp_rx": self._on_cmp_rx,
            "cmp_down": self._on_cmp_down,
            "frame": self._on_frame,
            "ws_rx": self._on_ws_rx,
            "ws_link": self._on_ws_link,
        }
        while self._queue:
            t, _, _, kind, payload = heapq.heappop(self._queue)
            self._now = t
            handlers[kind](payload)
        if self.cmp is not None:
            self.result.protocol_errors = self.cmp.protocol_errors
            self.cmp.close()
        self.result.records = self.recorder.records()
        self.result.companion_decode_errors = self.companion.state.error_count
        return self.result

    # DSRC + UDP ---------------------------------------------------------------

    def _on_broadcast(self, _: Any) -> None:
        t = self._now
        sc = self.sc
        self._cav_seq += 1
        mid = self._cav_seq
        here = sc.cav.true_position(t)
        ahead = sc.cav.true_position(t + SPEED_PROBE_MS)
        speed = surface_distance_m(here, ahead) * 1000.0 / SPEED_PROBE_MS
        tx = self.epoch + t
        msg = CavStateMessage(sc.cav.reported_position(t), tx, tx + GPS_UTC_OFFSET_MS, speed)
        data = encode_cav_state(msg)
        out = self.channels[Hop.DSRC].transmit(msg, here, sc.uav.true_position(t), t)
        if out.delivered:
            self._log("dsrc_tx", id=mid, arrival=out.arrival_ts_ms)
            self._push(out.arrival_ts_ms, "dsrc_rx", (mid, t, data))
        else:
            self._log("dsrc_drop", id=mid)
            self.recorder.record(Hop.DSRC, mid, t, None)
        nxt = t + sc.broadcast_interval_ms
        if nxt < self.duration:
            self._push(nxt, "broadcast")

    def _on_dsrc_rx(self, payload: tuple[int, int, bytes]) -> None:
        mid, sent, data = payload
        t = self._now
        self.recorder.record(Hop.DSRC, mid, sent, t)
        if self.result.first_dsrc_rx_ms is None:
            self.result.first_dsrc_rx_ms = t
        self._udp_seq += 1
        uid = self._udp_seq
        out = self.channels[Hop.UDP].transmit_at_distance(self._distance(t), t)
        if out.delivered:
            self._log("udp_tx", id=uid, dsrc_id=mid, arrival=out.arrival_ts_ms)
            self._push(out.arrival_ts_ms, "udp_rx", (uid, t, data))
        else:
            self._log("udp_drop", id=uid, dsrc_id=mid)
            self.recorder.record(Hop.UDP, uid, t, None)

    def _on_udp_rx(self, payload: tuple[int, int, bytes]) -> None:
        uid, sent, data = payload
        t = self._now
        self.recorder.record(Hop.UDP, uid, sent, t)
        try:
            accepted = self.companion.ingest_obu_datagram(data, t)
        except DecodeError as e:
            self._log("ingest_error", id=uid, error=type(e).__name__)
            return
        self._log("ingest", id=uid, accepted=accepted is not None)
        if accepted is not None and self.result.first_ingest_ms is None:
            self.result.first_ingest_ms = t

    # companion -> CMP -----------------------------------------------------------

    def _cmp_connect(self, conn_id: int, client_id: str) -> None:
        assert self.cmp is not None
        self.cmp.connect(conn_id)
        self._cmp_clients[conn_id] = client_id
        self._cmp_bufs[conn_id] = CmpFrameBuffer()
        self.result.alert_receipts[client_id] = []
        self._deliver_down(self.cmp.receive(conn_id, encode_cmp_record(Hello(client_id)), 0))

    def _on_tick(self, _: Any) -> None:
        t = self._now
        if self.cmp is not None:
            msg = self.companion.compose_system_message(t)
            if msg is not None:
                self._cmp_send(msg, None)
            before = set(self.companion.state.incident_latches)
            fault = self.companion.check_incident(t)
            if fault is not None:
                (zone_id,) = self.companion.state.incident_latches - before
                self.result.faults_sent[zone_id] = self.result.faults_sent.get(zone_id, 0) + 1
                self._log("fault", zone=zone_id)
                self._cmp_send(fault, zone_id)
        nxt = t + self.sc.config.tick_ms
        if nxt < self.duration:
            self._push(nxt, "tick")

    def _cmp_send(self, record: SystemMessage | FaultMessage, zone_id: str | None) -> None:
        assert self._cmp_link is not None
        t = self._now
        self._cmp_records_sent += 1
        k = self._cmp_records_sent
        out = self._cmp_link.send(self._distance(t), t)
        if not out.delivered:
            self._log("cmp_drop", id=k, kind=record.kind)
            self.recorder.record(Hop.CMP_TCP, k, t, None)
            return
        self._log("cmp_tx", id=k, kind=record.kind, arrival=out.arrival_ts_ms)
        self._cmp_pending[k] = (t, zone_id or "", record)
        self._push(out.arrival_ts_ms, "cmp_rx", (k, encode_cmp_record(record)))

    def _on_cmp_rx(self, payload: tuple[int, bytes]) -> None:
        assert self.cmp is not None
        k, data = payload
        t = self._now
        sent, zone_id, record = self._cmp_pending.pop(k)
        self.recorder.record(Hop.CMP_TCP, k, sent, t)
        if isinstance(record, SystemMessage):
            self.result.system_arrivals.append(SystemArrival(sent, t, record))
        else:
            self.result.fault_arrivals.append(FaultArrival(sent, t, zone_id, record))
        n_alerts = len(self.cmp.alerts)
        out = self.cmp.receive(1, data, t)
        if len(self.cmp.alerts) > n_alerts:
            a = self.cmp.alerts[-1]
            self.result.alert_fanout[a.alert_seq] = a.fanout
            self._log("alert", seq=a.alert_seq, fanout=a.fanout)
        self._deliver_down(out)

    def _deliver_down(self, out: list[tuple[int, bytes]]) -> None:
        latency = 0
        if self._cmp_link is not None:
            latency = max(1, round(self._cmp_link.channel.params.base_latency_ms))
        for conn_id, data in out:
            self._push(self._now + latency, "cmp_down", (conn_id, data))

    def _on_cmp_down(self, payload: tuple[int, bytes]) -> None:
        conn_id, data = payload
        buf = self._cmp_bufs[conn_id]
        buf.feed(data)
        for rec in buf:
            if isinstance(rec, Alert):
                cid = self._cmp_clients[conn_id]
                self.result.alert_receipts[cid].append(rec.alert_seq)
                if self.result.first_alert_ms is None:
                    self.result.first_alert_ms = self._now
                self._log("alert_rx", client=cid, seq=rec.alert_seq)

    # frames ---------------------------------------------------------------------

    def _on_frame(self, _: Any) -> None:
        t = self._now
        try:
            pkt = self.publisher.publish_frame(t)
            self._log("frame", seq=pkt.frame_seq)
        except NotConnected as e:
            self._log("frame_buffered", seq=e.packet.frame_seq)
        nxt = t + self.sc.config.frames.interval_ms
        if nxt < self.duration:
            self._push(nxt, "frame")

    def _on_ws_link(self, up: bool) -> None:
        if up:
            n = self.publisher.connect(self._ws_send)
            self._log("ws_up", flushed=n)
        else:
            self.publisher.disconnect()
            self._log("ws_down")

    def _ws_send(self, data: bytes) -> None:
        t = self._now
        seq = decode_frame_packet(data).frame_seq
        self.result.frames_sent[seq] = hashlib.sha256(data).hexdigest()
        self._ws_pub.send_binary(data)
        wire = self._ws_pub.data_to_send()
        out = self._ws_link.send(self._distance(t), t)
        if out.delivered:
            self._ws_pending[seq] = t
            self._push(out.arrival_ts_ms, "ws_rx", wire)
        else:
            self._log("ws_drop", seq=seq)
            self.recorder.record(Hop.WS, seq, t, None)

    def _on_ws_rx(self, wire: bytes) -> None:
        t = self._now
        for ev in self._ws_srv.receive_data(wire):
            if not isinstance(ev, Message):
                continue
            seq = decode_frame_packet(ev.data).frame_seq
            self.recorder.record(Hop.WS, seq, self._ws_pending.pop(seq), t)
            self.result.frames_at_server.append(seq)
            for i, (obs_client, obs_server) in enumerate(self._observers):
                obs_server.send_binary(ev.data)
                for oev in obs_client.receive_data(obs_server.data_to_send()):
                    if isinstance(oev, Message):
                        oseq = decode_frame_packet(oev.data).frame_seq
                        self.result.observer_frames[i][oseq] = hashlib.sha256(oev.data).hexdigest()
                        if self.result.first_observer_frame_ms is None:
                            self.result.first_observer_frame_ms = t
            self._log("ws_rx", seq=seq, observers=len(self._observers))


def simulate(scenario: Scenario, duration_ms: int | None = None, journal: Path | None = None) -> RunResult:
    return Simulation(scenario, duration_ms, journal).run()
