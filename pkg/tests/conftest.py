import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from quickclear.geo import GeoPosition
from quickclear.wire import (
    Ack,
    Alert,
    CavStateMessage,
    ErrorReply,
    FaultMessage,
    FramePacket,
    Hello,
    IncidentType,
    SystemMessage,
)

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

U64 = 2**64 - 1

finite = dict(allow_nan=False, allow_infinity=False)

positions = st.builds(
    GeoPosition,
    st.floats(-90, 90, **finite),
    st.floats(-180, 180, **finite),
    st.floats(-1e6, 1e6, **finite),
)
timestamps = st.integers(1, U64)

cav_messages = st.builds(
    CavStateMessage,
    positions,
    timestamps,
    timestamps,
    st.floats(0, 1e4, **finite),
)

# JSON-safe integers: the CMP body is JSON, and int64-range stamps are plenty
json_ts = st.integers(1, 2**53)

system_messages = st.one_of(
    st.builds(SystemMessage, json_ts, positions, positions, st.integers(0, 10**9)),
    st.builds(SystemMessage, json_ts, st.none(), positions, st.just(-1)),
)
fault_messages = st.builds(FaultMessage, positions, json_ts, st.sampled_from(list(IncidentType)))
client_ids = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=64)
cmp_records = st.one_of(
    system_messages,
    fault_messages,
    st.builds(Hello, client_ids),
    st.builds(Ack, st.integers(0, 2**53)),
    st.builds(Alert, st.integers(1, 2**53), client_ids, json_ts, fault_messages),
    st.builds(ErrorReply, st.text(max_size=200)),
)
frame_packets = st.builds(
    FramePacket,
    st.integers(0, 2**32 - 1),
    st.integers(0, U64),
    st.binary(max_size=2048),
)


@pytest.fixture
def origin():
    return GeoPosition(40.0, -83.0, 230.0)


# plain seeded generators, used where hypothesis would be too slow at 10^4+ cases

def rand_position(r):
    return GeoPosition(r.uniform(-90, 90), r.uniform(-180, 180), r.uniform(-500, 10_000))


def rand_cav(r):
    return CavStateMessage(rand_position(r), r.randint(1, U64), r.randint(1, U64), r.uniform(0, 80))


def rand_fault(r):
    return FaultMessage(rand_position(r), r.randint(1, 2**53), r.choice(list(IncidentType)))


def rand_system(r):
    if r.random() < 0.1:
        return SystemMessage(r.randint(1, 2**53), None, rand_position(r), -1)
    return SystemMessage(r.randint(1, 2**53), rand_position(r), rand_position(r), r.randint(0, 10**7))


def rand_client_id(r):
    n = r.randint(1, 32)
    return "".join(chr(r.choice([r.randint(0x20, 0x7E), r.randint(0xA0, 0xD7FF)])) for _ in range(n))


def rand_frame(r):
    return FramePacket(r.randint(0, 2**32 - 1), r.randint(0, U64), r.randbytes(r.randint(0, 256)))


RANDOM_CMP = {
    "system": rand_system,
    "fault": rand_fault,
    "hello": lambda r: Hello(rand_client_id(r)),
    "ack": lambda r: Ack(r.randint(0, 2**53)),
    "alert": lambda r: Alert(r.randint(1, 2**53), rand_client_id(r), r.randint(1, 2**53), rand_fault(r)),
    "error": lambda r: ErrorReply(rand_client_id(r)),
}


# one PASS/FAIL line per exit criterion ------------------------------------------

_criteria: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "acceptance" not in report.keywords:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.rsplit("::", 1)[-1]
        _criteria[name] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("exit criteria")
    for name in sorted(_criteria):
        terminalreporter.write_line(f"{_criteria[name]}  {name}")
