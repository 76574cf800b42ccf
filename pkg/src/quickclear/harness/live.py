"""Live loopback run: real UDP, TCP and WebSocket sockets on one host.

The DSRC radio is still simulated. Every other hop carries real traffic,
delayed on the sending side by the hop's channel model so that reports are
comparable with SIM runs. Time is milliseconds since the run started.
"""

from __future__ import annotations

import asyncio
import errno
import hashlib
import logging
import time
from collections import deque
from pathlib import Path
from typing import Any, Callable

from quickclear.airlink import Channel, DeliveryOutcome
from quickclear.cmp_endpoint import CmpClient, CmpCore, CmpServer
from quickclear.companion import Companion, FramePublisher, NotConnected, SyntheticCamera
from quickclear.errors import DecodeError, PortInUse
from quickclear.framesock import FrameRelayServer, WsClient
from quickclear.geo import slant_distance_m, surface_distance_m
from quickclear.harness.result import FaultArrival, RunResult, SystemArrival
from quickclear.harness.sim import GPS_UTC_OFFSET_MS, SPEED_PROBE_MS
from quickclear.metrics import Hop, Recorder
from quickclear.scenario import Scenario
from quickclear.wire import Alert, CavStateMessage, SystemMessage, decode_cav_state, decode_frame_packet, encode_cav_state

log = logging.getLogger(__name__)

HOST = "127.0.0.1"
DRAIN_SLACK_MS = 2000


class _Emulated:
    """Sender-side delay and loss for one hop; stream hops keep FIFO order."""

    def __init__(self, channel: Channel, ordered: bool) -> None:
        self.channel = channel
        self.ordered = ordered
        self._last_arrival = 0
        self._last_send = 0

    def outcome(self, d_m: float, now: float) -> DeliveryOutcome:
        t = max(self._last_send, round(now))
        self._last_send = t
        out = self.channel.transmit_at_distance(d_m, t)
        if out.delivered and self.ordered:
            arrival = max(out.arrival_ts_ms, self._last_arrival)
            self._last_arrival = arrival
            out = DeliveryOutcome(out.verdict, arrival)
        return out

    def worst_case_ms(self, d_max: float) -> float:
        p = self.channel.params
        return p.base_latency_ms + p.jitter_ms + p.latency_ms_per_m * d_max


class _UdpSink(asyncio.DatagramProtocol):
    def __init__(self, on_datagram: Callable[[bytes], None]) -> None:
        self.on_datagram = on_datagram

    def datagram_received(self, data: bytes, addr: Any) -> None:
        self.on_datagram(data)


class LiveRun:
    def __init__(
        self,
        scenario: Scenario,
        duration_ms: int | None = None,
        ports: dict[str, int] | None = None,
        journal: Path | None = None,
    ) -> None:
        self.sc = scenario
        cfg = scenario.config
        self.duration = duration_ms if duration_ms is not None else cfg.live_duration_ms
        self.ports = {"udp": cfg.ports.udp, "cmp": cfg.ports.cmp, "ws": cfg.ports.ws, **(ports or {})}
        self.journal = journal
        self.epoch = cfg.epoch_ms
        self.recorder = Recorder()
        self.links = {
            hop: _Emulated(Channel(p), ordered=hop in (Hop.CMP_TCP, Hop.WS))
            for hop, p in scenario.channels.items()
        }
        self.companion = Companion(
            uav_position=scenario.uav.reported_position,
            zones=scenario.zones,
            min_interval_ms=cfg.cadence.min_interval_ms,
            max_interval_ms=cfg.cadence.max_interval_ms,
            epoch_ms=self.epoch,
        )
        self.publisher = FramePublisher(SyntheticCamera(cfg.seed, cfg.frames.size_bytes))
        self.result = RunResult(scenario, "LIVE", [])
        self._t0 = 0.0
        self._loop: asyncio.AbstractEventLoop | None = None
        self._pending = 0
        self._cav_seq = 0
        self._udp_seq = 0
        self._udp_ids: dict[int, tuple[int, float]] = {}
        self._cmp_seq = 0
        self._cmp_inflight: deque[tuple[int, float, str, Any]] = deque()
        self._ws_sent: dict[int, float] = {}
        self._udp_out: asyncio.DatagramTransport | None = None
        self._cmp_client: CmpClient | None = None
        self._ws_pub: WsClient | None = None

    def now(self) -> float:
        return (time.perf_counter() - self._t0) * 1000.0

    def _log(self, ev: str, **fields: Any) -> None:
        self.result.events.append({"t": round(self.now(), 3), "ev": ev, **fields})

    def _later(self, arrival_ms: float, fn: Callable[..., None], *args: Any) -> None:
        assert self._loop is not None
        self._pending += 1

        def fire() -> None:
            self._pending -= 1
            fn(*args)

        self._loop.call_at(self._loop.time() + max(0.0, arrival_ms - self.now()) / 1000.0, fire)

    def _distance(self, t: float) -> float:
        ti = round(t)
        return slant_distance_m(self.sc.cav.true_position(ti), self.sc.uav.true_position(ti))

    # lifecycle ----------------------------------------------------------------

    async def run(self) -> RunResult:
        self._loop = asyncio.get_running_loop()
        self._t0 = time.perf_counter()
        cfg = self.sc.config
        core = CmpCore(cfg.cmp.staleness_ms, journal=self.journal, on_record=self._on_cmp_record) \
            if self.sc.has_cmp else None
        cmp_server = CmpServer(core, self.now, HOST, self.ports["cmp"]) if core else None
        relay = FrameRelayServer(HOST, self.ports["ws"], self.now, self._on_publish)
        udp_in: asyncio.DatagramTransport | None = None
        clients: list[CmpClient] = []
        observers: list[WsClient] = []
        readers: list[asyncio.Task] = []
        try:
            # servers first, then clients, then traffic
            try:
                udp_in, _ = await self._loop.create_datagram_endpoint(
                    lambda: _UdpSink(self._on_udp_rx), local_addr=(HOST, self.ports["udp"]))
            except OSError as e:
                if e.errno == errno.EADDRINUSE:
                    raise PortInUse(f"UDP port {self.ports['udp']} in use") from e
                raise
            udp_port = udp_in.get_extra_info("sockname")[1]
            if cmp_server:
                await cmp_server.start()
            await relay.start()
            self._udp_out, _ = await self._loop.create_datagram_endpoint(
                asyncio.DatagramProtocol, remote_addr=(HOST, udp_port))

            for i in range(cfg.frames.observers):
                obs = WsClient()
                await obs.connect(HOST, relay.port, "/observe")
                observers.append(obs)
                self.result.observer_frames.append({})
                readers.append(asyncio.create_task(self._observe(i, obs)))
            if cmp_server:
                for cid in [cfg.cmp.client_id, *cfg.cmp.extra_clients]:
                    c = CmpClient(cid)
                    c.on_alert = self._alert_handler(cid)
                    self.result.alert_receipts[cid] = []
                    await c.connect(HOST, cmp_server.port)
                    clients.append(c)
                self._cmp_client = clients[0]
            self._ws_pub = WsClient()
            await self._ws_pub.connect(HOST, relay.port, "/publish")
            self.publisher.connect(self._ws_send)

            # reset the clock so that traffic starts at t=0
            self._t0 = time.perf_counter()
            drivers = [
                self._every(self.sc.broadcast_interval_ms, self._broadcast),
                self._every(cfg.frames.interval_ms, self._frame),
                self._outages(),
            ]
            if core:
                drivers.append(self._every(cfg.tick_ms, self._tick))
            await asyncio.gather(*drivers)
            await self._drain()
        finally:
            for r in readers:
                r.cancel()
            for c in clients:
                await c.close()
            if self._ws_pub:
                await self._ws_pub.close()
            for o in observers:
                await o.close()
            await relay.stop()
            if cmp_server:
                await cmp_server.stop()
            if self._udp_out:
                self._udp_out.close()
            if udp_in:
                udp_in.close()
            if core:
                self.result.protocol_errors = core.protocol_errors
                for a in core.alerts:
                    self.result.alert_fanout[a.alert_seq] = a.fanout
                core.close()
        self.result.records = self.recorder.records()
        self.result.companion_decode_errors = self.companion.state.error_count
        return self.result

    async def _every(self, interval_ms: int, fn: Callable[[float], None]) -> None:
        k = 0
        while (t := k * interval_ms) < self.duration:
            delay = t - self.now()
            if delay > 0:
                await asyncio.sleep(delay / 1000.0)
            fn(self.now())
            k += 1

    async def _outages(self) -> None:
        for start, end in self.sc.config.frames.outages:
            if start >= self.duration:
                break
            await asyncio.sleep(max(0.0, start - self.now()) / 1000.0)
            self.publisher.disconnect()
            self._log("ws_down")
            await asyncio.sleep(max(0.0, end - self.now()) / 1000.0)
            self._log("ws_up", flushed=self.publisher.connect(self._ws_send))

    async def _drain(self) -> None:
        d_max = max(self._distance(t) for t in range(0, self.duration + 1, 1000))
        budget = sum(link.worst_case_ms(d_max) for link in self.links.values()) + DRAIN_SLACK_MS
        deadline = self.now() + budget
        while self.now() < deadline:
            if self._pending == 0 and not self._udp_ids and not self._cmp_inflight and not self._ws_sent:
                break
            await asyncio.sleep(0.02)
        # grace for alert fan-out and observer relays still on the wire
        await asyncio.sleep(0.2)
        t = self.now()
        for uid, (sent, _) in self._udp_ids.items():
            self.recorder.record(Hop.UDP, uid, sent, None)
        for k, sent, _, _ in self._cmp_inflight:
            self.recorder.record(Hop.CMP_TCP, k, sent, None)
        for seq, sent in self._ws_sent.items():
            self.recorder.record(Hop.WS, seq, sent, None)
        if self._udp_ids or self._cmp_inflight or self._ws_sent:
            log.warning("live drain ended at %.0f ms with messages in flight", t)

    # DSRC + UDP ---------------------------------------------------------------

    def _broadcast(self, t: float) -> None:
        sc = self.sc
        ti = round(t)
        self._cav_seq += 1
        mid = self._cav_seq
        here = sc.cav.true_position(ti)
        ahead = sc.cav.true_position(ti + SPEED_PROBE_MS)
        speed = surface_distance_m(here, ahead) * 1000.0 / SPEED_PROBE_MS
        tx = self.epoch + ti
        msg = CavStateMessage(sc.cav.reported_position(ti), tx, tx + GPS_UTC_OFFSET_MS, speed)
        out = self.links[Hop.DSRC].outcome(slant_distance_m(here, sc.uav.true_position(ti)), t)
        if out.delivered:
            self._later(out.arrival_ts_ms, self._obu_rx, mid, t, encode_cav_state(msg))
        else:
            self.recorder.record(Hop.DSRC, mid, t, None)
            self._log("dsrc_drop", id=mid)

    def _obu_rx(self, mid: int, sent: float, data: bytes) -> None:
        t = self.now()
        self.recorder.record(Hop.DSRC, mid, sent, t)
        if self.result.first_dsrc_rx_ms is None:
            self.result.first_dsrc_rx_ms = t
        self._udp_seq += 1
        uid = self._udp_seq
        out = self.links[Hop.UDP].outcome(self._distance(t), t)
        if not out.delivered:
            self.recorder.record(Hop.UDP, uid, t, None)
            self._log("udp_drop", id=uid, dsrc_id=mid)
            return
        self._udp_ids[decode_cav_state(data).tx_timestamp_ms] = (uid, t)
        self._later(out.arrival_ts_ms, self._udp_send, data)

    def _udp_send(self, data: bytes) -> None:
        assert self._udp_out is not None
        self._udp_out.sendto(data)

    def _on_udp_rx(self, data: bytes) -> None:
        t = self.now()
        try:
            accepted = self.companion.ingest_obu_datagram(data, t)
        except DecodeError as e:
            self._log("ingest_error", error=type(e).__name__)
            return
        key = decode_cav_state(data).tx_timestamp_ms
        if key in self._udp_ids:
            uid, sent = self._udp_ids.pop(key)
            self.recorder.record(Hop.UDP, uid, sent, t)
        if accepted is not None and self.result.first_ingest_ms is None:
            self.result.first_ingest_ms = t

    # companion -> CMP -----------------------------------------------------------

    def _tick(self, t: float) -> None:
        msg = self.companion.compose_system_message(t)
        if msg is not None:
            self._cmp_send(msg, "", t)
        before = set(self.companion.state.incident_latches)
        fault = self.companion.check_incident(t)
        if fault is not None:
            (zone_id,) = self.companion.state.incident_latches - before
            self.result.faults_sent[zone_id] = self.result.faults_sent.get(zone_id, 0) + 1
            self._log("fault", zone=zone_id)
            self._cmp_send(fault, zone_id, t)

    def _cmp_send(self, record: Any, zone_id: str, t: float) -> None:
        assert self._cmp_client is not None
        self._cmp_seq += 1
        k = self._cmp_seq
        out = self.links[Hop.CMP_TCP].outcome(self._distance(t), t)
        if not out.delivered:
            self.recorder.record(Hop.CMP_TCP, k, t, None)
            return
        self._cmp_inflight.append((k, t, zone_id, record))
        self._later(out.arrival_ts_ms, self._cmp_client.send, record)

    def _on_cmp_record(self, conn_id: int, client_id: str, index: int, record: Any, now: float) -> None:
        if client_id != self.sc.config.cmp.client_id or not self._cmp_inflight:
            return
        k, sent, zone_id, _ = self._cmp_inflight.popleft()
        self.recorder.record(Hop.CMP_TCP, k, sent, now)
        if isinstance(record, SystemMessage):
            self.result.system_arrivals.append(SystemArrival(sent, now, record))
        else:
            self.result.fault_arrivals.append(FaultArrival(sent, now, zone_id, record))

    def _alert_handler(self, client_id: str) -> Callable[[Alert], None]:
        def on_alert(a: Alert) -> None:
            self.result.alert_receipts[client_id].append(a.alert_seq)
            if self.result.first_alert_ms is None:
                self.result.first_alert_ms = self.now()
            self._log("alert_rx", client=client_id, seq=a.alert_seq)
        return on_alert

    # frames ---------------------------------------------------------------------

    def _frame(self, t: float) -> None:
        try:
            pkt = self.publisher.publish_frame(t)
            self._log("frame", seq=pkt.frame_seq)
        except NotConnected as e:
            self._log("frame_buffered", seq=e.packet.frame_seq)

    def _ws_send(self, data: bytes) -> None:
        assert self._ws_pub is not None
        t = self.now()
        seq = decode_frame_packet(data).frame_seq
        self.result.frames_sent[seq] = hashlib.sha256(data).hexdigest()
        out = self.links[Hop.WS].outcome(self._distance(t), t)
        if not out.delivered:
            self.recorder.record(Hop.WS, seq, t, None)
            return
        self._ws_sent[seq] = t
        self._later(out.arrival_ts_ms, self._ws_pub.send_binary, data)

    def _on_publish(self, data: bytes, now: float) -> None:
        seq = decode_frame_packet(data).frame_seq
        sent = self._ws_sent.pop(seq, None)
        if sent is not None:
            self.recorder.record(Hop.WS, seq, sent, now)
        self.result.frames_at_server.append(seq)

    async def _observe(self, i: int, obs: WsClient) -> None:
        seen = self.result.observer_frames[i]
        while True:
            data = await obs.messages.get()
            if isinstance(data, str):
                continue
            seen[decode_frame_packet(data).frame_seq] = hashlib.sha256(data).hexdigest()
            if self.result.first_observer_frame_ms is None:
                self.result.first_observer_frame_ms = self.now()


def run_live(
    scenario: Scenario,
    duration_ms: int | None = None,
    ports: dict[str, int] | None = None,
    journal: Path | None = None,
) -> RunResult:
    return asyncio.run(LiveRun(scenario, duration_ms, ports, journal).run())
