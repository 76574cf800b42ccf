import hashlib
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from quickclear.companion import (
    Companion,
    FramePublisher,
    IncidentZone,
    NotConnected,
    SyntheticCamera,
)
from quickclear.errors import DecodeError, FrameTruncated
from quickclear.geo import GeoPosition, offset_position
from quickclear.wire import CavStateMessage, IncidentType, decode_frame_packet, encode_cav_state

ORIGIN = GeoPosition(40.0, -83.0, 230.0)
UAV = ORIGIN.with_alt(260.0)
EPOCH = 1_620_000_000_000


def fix(tx, pos=ORIGIN):
    return encode_cav_state(CavStateMessage(pos, EPOCH + tx, EPOCH + tx + 18_000, 3.0))


def make(zones=(), **kw):
    return Companion(lambda t: UAV, zones, epoch_ms=EPOCH, **kw)


# ingest ---------------------------------------------------------------------------

def test_first_fix():
    c = make()
    msg = c.ingest_obu_datagram(fix(100), 150)
    assert c.state.last_cav == (msg, 150)
    assert msg.tx_timestamp_ms == EPOCH + 100


def test_older_fix_discarded():
    c = make()
    c.ingest_obu_datagram(fix(200), 250)
    before = c.state.last_cav
    assert c.ingest_obu_datagram(fix(100), 300) is None
    assert c.ingest_obu_datagram(fix(200), 300) is None
    assert c.state.last_cav == before
    assert c.state.stale_discarded == 2


def test_truncated_counted():
    c = make()
    c.ingest_obu_datagram(fix(200), 250)
    before = c.state.last_cav
    with pytest.raises(FrameTruncated):
        c.ingest_obu_datagram(fix(300)[:55], 350)
    assert c.state.decode_errors["FrameTruncated"] == 1
    assert c.state.last_cav == before


def test_error_count_equals_injected():
    rnd = random.Random(11)
    c = make()
    injected = 0
    for k in range(1, 500):
        b = bytearray(fix(k * 100))
        if rnd.random() < 0.2:
            injected += 1
            b[rnd.randrange(len(b))] ^= 1 << rnd.randrange(8)
        try:
            c.ingest_obu_datagram(bytes(b), k * 100 + 5)
        except DecodeError:
            pass
    assert c.state.error_count == injected
    assert c.state.ingested == 499 - injected


@given(st.lists(st.integers(1, 10**6), max_size=60))
def test_last_fix_nondecreasing(txs):
    c = make()
    seen = []
    for i, tx in enumerate(txs):
        c.ingest_obu_datagram(fix(tx), i)
        seen.append(c.state.last_cav[0].tx_timestamp_ms)
    assert seen == sorted(seen)


# cadence --------------------------------------------------------------------------

def test_first_call_emits_without_fix():
    m = make().compose_system_message(0)
    assert m.cav_pos is None and m.cav_age_ms == -1 and m.uav_pos == UAV


def test_gated_below_min():
    c = make()
    c.compose_system_message(10_000)
    c.ingest_obu_datagram(fix(10_100), 10_120)
    assert c.compose_system_message(10_500) is None


def test_emits_with_fresh_fix():
    c = make()
    c.compose_system_message(10_000)
    c.ingest_obu_datagram(fix(11_000), 11_050)
    m = c.compose_system_message(11_200)
    assert m.cav_pos == ORIGIN and m.uav_pos == UAV
    assert m.cav_age_ms == 150 and m.msg_timestamp_ms == EPOCH + 11_200


def test_stale_fix_waits_for_max():
    c = make()
    c.ingest_obu_datagram(fix(9_000), 9_000)
    c.compose_system_message(10_000)
    assert c.compose_system_message(11_500) is None
    m = c.compose_system_message(12_000)
    assert m is not None and m.cav_age_ms == 3_000


def test_sixty_second_cadence():
    c = make()
    sent = []
    for t in range(0, 60_000, 100):
        if t:
            c.ingest_obu_datagram(fix(t + 1), t + 30)
        if (m := c.compose_system_message(t)) is not None:
            sent.append(m.msg_timestamp_ms)
    gaps = [b - a for a, b in zip(sent, sent[1:])]
    assert gaps and all(1000 <= g <= 2000 for g in gaps)


@given(
    st.lists(st.integers(0, 50), min_size=1, max_size=300),
    st.sets(st.integers(0, 300)),
    st.integers(100, 1500),
    st.integers(0, 1500),
)
def test_cadence_properties(steps, fix_ticks, lo, extra):
    c = make(min_interval_ms=lo, max_interval_ms=lo + extra)
    t, sent = 0, []
    for i, dt in enumerate(steps):
        t += dt
        if i in fix_ticks:
            c.ingest_obu_datagram(fix(t + 1), t)
        if (m := c.compose_system_message(t)) is not None:
            sent.append((t, m))
    ts = [m.msg_timestamp_ms for _, m in sent]
    assert all(b > a for a, b in zip(ts, ts[1:]))
    assert all(b - a >= lo for a, b in zip(ts, ts[1:]))
    assert all(m.cav_age_ms >= 0 for _, m in sent if m.cav_pos is not None)


def test_bad_intervals():
    with pytest.raises(ValueError):
        make(min_interval_ms=2000, max_interval_ms=1000)


# geofence -------------------------------------------------------------------------

ZONE = IncidentZone("z1", offset_position(ORIGIN, 100, 0), 30.0, IncidentType.STALLED_VEHICLE)


def test_outside_radius():
    c = make([ZONE])
    c.ingest_obu_datagram(fix(1, offset_position(ORIGIN, 600, 0)), 2)
    assert c.check_incident(10) is None


def test_inside_radius():
    c = make([ZONE])
    c.ingest_obu_datagram(fix(1, offset_position(ORIGIN, 112, 0)), 2)
    f = c.check_incident(10)
    assert f.incident_pos == ZONE.center
    assert f.incident_type is IncidentType.STALLED_VEHICLE
    assert f.incident_time_ms == EPOCH + 10


def test_reentry_latched():
    c = make([ZONE])
    for k, east in enumerate((112, 600, 100, 95)):
        c.ingest_obu_datagram(fix(k + 1, offset_position(ORIGIN, east, 0)), k + 1)
        f = c.check_incident(k + 1)
        assert (f is not None) == (k == 0)


def test_no_fix_no_fault():
    assert make([ZONE]).check_incident(0) is None


def test_zone_validation():
    with pytest.raises(ValueError):
        IncidentZone("z", ORIGIN, 0.0)
    with pytest.raises(ValueError):
        make([ZONE, ZONE])


@given(st.lists(st.tuples(st.floats(-300, 300), st.floats(-300, 300)), max_size=80))
def test_at_most_one_fault_per_zone(path):
    zones = [ZONE, IncidentZone("z2", offset_position(ORIGIN, -50, 20), 40.0)]
    c = make(zones)
    count = {"z1": 0, "z2": 0}
    for k, (e, n) in enumerate(path):
        c.ingest_obu_datagram(fix(k + 1, offset_position(ORIGIN, e, n)), k + 1)
        while (f := c.check_incident(k + 1)) is not None:
            zid = "z1" if f.incident_pos == ZONE.center else "z2"
            count[zid] += 1
    assert max(count.values()) <= 1


# frames ---------------------------------------------------------------------------

def test_frame_counter():
    sent = []
    pub = FramePublisher(SyntheticCamera(1, 64))
    pub.connect(sent.append)
    assert [pub.publish_frame(t).frame_seq for t in (0, 1, 2)] == [1, 2, 3]
    assert [decode_frame_packet(b).frame_seq for b in sent] == [1, 2, 3]


def test_ring_keeps_last_32():
    pub = FramePublisher(SyntheticCamera(1, 64))
    for t in range(40):
        with pytest.raises(NotConnected):
            pub.publish_frame(t)
    assert [p.frame_seq for p in pub.buffered] == list(range(9, 41))
    assert pub.ring_dropped == 8


def test_flush_in_order_before_new():
    pub = FramePublisher(SyntheticCamera(1, 64))
    for t in range(3):
        with pytest.raises(NotConnected):
            pub.publish_frame(t)
    sent = []
    assert pub.connect(sent.append) == 3
    pub.publish_frame(3)
    assert [decode_frame_packet(b).frame_seq for b in sent] == [1, 2, 3, 4]


def test_published_hash_matches_bytes():
    sent = []
    pub = FramePublisher(SyntheticCamera(5))
    pub.connect(sent.append)
    pub.publish_frame(0)
    assert pub.published_hashes[1] == hashlib.sha256(sent[0]).hexdigest()
    assert len(decode_frame_packet(sent[0]).payload) == 16_384


def test_camera_deterministic():
    a, b = SyntheticCamera(3, 100), SyntheticCamera(3, 100)
    assert a.capture(7) == b.capture(7) != a.capture(8)
    assert a.capture(7)[:8] == (7).to_bytes(8, "big")
