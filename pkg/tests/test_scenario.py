import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from quickclear.companion import Companion
from quickclear.errors import ConfigError
from quickclear.geo import GeoPosition, slant_distance_m, surface_distance_m
from quickclear.metrics import Hop
from quickclear.scenario import (
    DriftModel,
    Preset,
    Trajectory,
    TrajectoryMode,
    Waypoint,
    apply_drift,
    build_experiment,
    circle_trajectory,
    deep_merge,
    hop_seed,
    load_config,
    load_config_file,
    position_at,
)
from quickclear.wire import CavStateMessage, encode_cav_state

O = GeoPosition(40.0, -83.0, 230.0)


def line():
    return Trajectory([Waypoint(0, O.with_alt(0)), Waypoint(10_000, O.with_alt(100))])


def test_t0_is_first_waypoint():
    assert position_at(line(), 0) == O.with_alt(0)


def test_midpoint():
    assert position_at(line(), 5_000).alt_m == pytest.approx(50.0)


def test_hold_last():
    assert position_at(line(), 99_000) == O.with_alt(100)


def test_loop_modulo():
    traj = circle_trajectory(O, 50.0, 60_000)
    assert position_at(traj, 125_000) == position_at(traj, 5_000)


@given(st.integers(0, 60_000), st.integers(0, 50))
def test_loop_exactly_periodic(t, k):
    traj = circle_trajectory(O, 40.0, 60_000, points=36)
    assert position_at(traj, t + k * 60_000) == position_at(traj, t)


def test_continuity_at_waypoints():
    traj = circle_trajectory(O, 40.0, 24_000, points=12)
    for w in traj.waypoints[1:-1]:
        left, right = traj.position_at(w.t_ms - 1e-6), traj.position_at(w.t_ms + 1e-6)
        assert slant_distance_m(left, w.pos) < 1e-3 and slant_distance_m(right, w.pos) < 1e-3


def test_circle_geometry():
    traj = circle_trajectory(O, 25.0, 60_000)
    for t in range(0, 60_000, 5_000):
        assert surface_distance_m(O, traj.position_at(t)) == pytest.approx(25.0, abs=0.1)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory([])
    with pytest.raises(ValueError):
        Trajectory([Waypoint(0, O), Waypoint(0, O)])
    with pytest.raises(ValueError):
        line().position_at(-1)


def test_drift():
    assert apply_drift(O, DriftModel(0.1, enabled=False), 100_000) == O
    assert apply_drift(O, DriftModel(0.1, enabled=True), 100_000).alt_m == pytest.approx(240.0)


def test_drift_cannot_move_geofence():
    # drift is altitude-only and the geofence is a surface distance, so the
    # reported position triggers exactly where the true one would
    sc = build_experiment("quick-clear")
    zones = sc.zones
    drifts = (DriftModel(), DriftModel(5.0, True))
    fired = []
    for drift in drifts:
        c = Companion(lambda t: O, zones, epoch_ms=1)
        hits = []
        for t in range(0, 48_000, 100):
            pos = apply_drift(sc.cav.true_position(t), drift, t)
            c.ingest_obu_datagram(encode_cav_state(CavStateMessage(pos, t + 1, t + 1, 0.0)), t)
            if c.check_incident(t) is not None:
                hits.append(t)
        fired.append(hits)
    assert fired[0] == fired[1] and len(fired[0]) == 2


def test_exp1_has_no_cmp():
    sc = build_experiment(Preset.EXP1)
    assert not sc.has_cmp and Hop.CMP_TCP not in sc.channels
    assert sc.hops == (Hop.DSRC, Hop.UDP, Hop.WS)


def test_exp2_four_hops():
    assert len(build_experiment("exp2").hops) == 4


def test_exp2_dynamic_loops():
    sc = build_experiment("exp2-dynamic")
    assert sc.cav.trajectory.mode is TrajectoryMode.LOOP
    assert sc.cav.trajectory.period_ms == 24_000
    # 120 m loop
    pts = [sc.cav.true_position(t) for t in range(0, 24_001, 100)]
    length = sum(surface_distance_m(a, b) for a, b in zip(pts, pts[1:]))
    assert length == pytest.approx(120.0, rel=0.01)


def test_exp2_is_stationary():
    sc = build_experiment("exp2")
    assert sc.cav.true_position(0) == sc.cav.true_position(50_000)


def test_uav_orbit():
    sc = build_experiment("exp2")
    for t in range(0, 60_000, 7_000):
        p = sc.uav.true_position(t)
        assert p.alt_m == 260.0
        assert surface_distance_m(p, sc.cav.true_position(t)) == pytest.approx(25.0, abs=0.1)


def test_preset_values():
    sc = build_experiment("exp2")
    assert sc.channels[Hop.UDP].base_latency_ms == 8_000
    assert sc.channels[Hop.CMP_TCP].base_latency_ms == 500
    e1 = build_experiment("exp1").channels
    assert e1[Hop.DSRC].base_latency_ms < e1[Hop.WS].base_latency_ms < e1[Hop.UDP].base_latency_ms


def test_seeds_distinct_per_hop():
    seeds = {hop_seed(42, h) for h in Hop}
    assert len(seeds) == 4 and hop_seed(42, Hop.UDP) == hop_seed(42, Hop.UDP) != hop_seed(43, Hop.UDP)


def test_dynamic_identical_to_stationary_without_coupling():
    sc = build_experiment("exp2-dynamic", {"hops": {k: {"latency_ms_per_m": 0.0}
                                                    for k in ("dsrc", "udp", "ws", "cmp_tcp")}})
    base = build_experiment("exp2")
    assert sc.channels == base.channels


@pytest.mark.parametrize("overrides,path", [
    ({"bogus": 1}, "bogus"),
    ({"hops": {"udp": {"p_base": 1.5}}}, "hops.udp.p_base"),
    ({"hops": {"udp": {"base_latency_ms": -1}}}, "hops.udp.base_latency_ms"),
    ({"hops": {"udp": {"d0_m": 900, "dmax_m": 100}}}, "hops.udp"),
    ({"zones": [{"id": "a", "center": {"lat_deg": 95, "lon_deg": 0, "alt_m": 0}}]}, "zones[0].center.lat_deg"),
    ({"actors": {"cav": {"trajectory": {"kind": "circle", "radius_m": -3}}}}, "actors.cav.trajectory"),
    ({"cadence": {"min_interval_ms": 3000}}, "cadence"),
    ({"frames": {"outages": [[500, 100]]}}, "frames.outages[0]"),
])
def test_config_errors_carry_path(overrides, path):
    with pytest.raises(ConfigError) as ei:
        load_config("exp2", overrides)
    assert ei.value.path.startswith(path)


def test_hop_wiring_enforced():
    with pytest.raises(ConfigError) as ei:
        load_config("exp1", {"hops": {"cmp_tcp": {"base_latency_ms": 5}}})
    assert ei.value.path == "hops.cmp_tcp"


def test_duplicate_ids():
    z = {"id": "a", "center": {"lat_deg": 40, "lon_deg": -83, "alt_m": 0}}
    with pytest.raises(ConfigError):
        load_config("exp2", {"zones": [z, z]})
    with pytest.raises(ConfigError):
        load_config("exp2", {"cmp": {"extra_clients": ["uav-1"]}})


def test_unknown_preset():
    with pytest.raises(ValueError):
        Preset.parse("exp9")


def test_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 7, "hops": {"udp": {"jitter_ms": 0}}}))
    cfg = load_config("exp2", load_config_file(p))
    assert cfg.seed == 7 and cfg.hops.udp.jitter_ms == 0 and cfg.hops.udp.base_latency_ms == 8000
    p.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config_file(p)
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "missing.json")


def test_waypoints_config():
    cfg = {"actors": {"cav": {"trajectory": {"kind": "waypoints", "mode": "LOOP",
                                             "waypoints": [[0, 40, -83, 230], [1000, 40.001, -83, 230],
                                                           [2000, 40, -83, 230]]}}}}
    sc = build_experiment("exp2", cfg)
    assert sc.cav.true_position(2500) == sc.cav.true_position(500)
    with pytest.raises(ConfigError):
        build_experiment("exp2", {"actors": {"cav": {"trajectory": {
            "kind": "waypoints", "waypoints": [[5, 40, -83, 0], [5, 40, -83, 0]]}}}})


def test_deep_merge():
    assert deep_merge({"a": {"b": 1, "c": 2}, "l": [1]}, {"a": {"c": 3}, "l": [2]}) == {"a": {"b": 1, "c": 3}, "l": [2]}


def test_broadcast_interval():
    assert build_experiment("exp1").broadcast_interval_ms == 100
    assert build_experiment("exp1", {"broadcast_hz": 4}).broadcast_interval_ms == 250


def test_quick_clear_zones_on_loop():
    sc = build_experiment("quick-clear")
    assert [z.id for z in sc.zones] == ["incident-1", "incident-2"]
    for z in sc.zones:
        closest = min(surface_distance_m(sc.cav.true_position(t), z.center) for t in range(0, 24_000, 50))
        assert closest < z.radius_m


def test_mean_slant_distance_grows_with_motion():
    moving, still = build_experiment("exp2-dynamic"), build_experiment("exp2")
    def mean_d(sc):
        ds = [slant_distance_m(sc.cav.true_position(t), sc.uav.true_position(t)) for t in range(0, 120_000, 100)]
        return math.fsum(ds) / len(ds)
    assert mean_d(moving) > mean_d(still)


def test_deep_merge_kind_switch_replaces():
    base = {"t": {"kind": "static", "position": 1}}
    assert deep_merge(base, {"t": {"kind": "circle", "radius_m": 3}}) == {"t": {"kind": "circle", "radius_m": 3}}
    assert deep_merge(base, {"t": {"position": 2}}) == {"t": {"kind": "static", "position": 2}}
