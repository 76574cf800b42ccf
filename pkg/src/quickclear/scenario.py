"""Trajectories, scenario configuration and experiment presets.

A scenario is described by a JSON config (schema: ``ScenarioConfig``). Each
preset supplies a full default config; a user config is deep-merged over it,
so it only needs the keys it changes. Unknown keys are rejected.
"""

from __future__ import annotations

import bisect
import copy
import enum
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Any, Literal, Mapping, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from quickclear.airlink import ChannelParams
from quickclear.companion import IncidentZone
from quickclear.errors import ConfigError
from quickclear.geo import GeoPosition, offset_position
from quickclear.metrics import Hop
from quickclear.wire import IncidentType

# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


class TrajectoryMode(enum.Enum):
    HOLD_LAST = "HOLD_LAST"
    LOOP = "LOOP"


@dataclass(frozen=True)
class Waypoint:
    t_ms: float
    pos: GeoPosition


class Trajectory:
    """Piecewise-linear path through timed waypoints.

    In LOOP mode the path repeats with period equal to the last waypoint's
    time; make the last waypoint coincide with the first for a closed loop.
    """

    def __init__(self, waypoints: list[Waypoint], mode: TrajectoryMode = TrajectoryMode.HOLD_LAST) -> None:
        if not waypoints:
            raise ValueError("trajectory needs at least one waypoint")
        times = [w.t_ms for w in waypoints]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("waypoint times must be strictly increasing")
        if mode is TrajectoryMode.LOOP and times[-1] <= 0:
            raise ValueError("LOOP trajectory needs a positive period (last t_ms)")
        self.waypoints = tuple(waypoints)
        self.mode = mode
        self._times = times

    @property
    def period_ms(self) -> float:
        return self._times[-1]

    def position_at(self, t_ms: float) -> GeoPosition:
        if t_ms < 0:
            raise ValueError("t_ms must be >= 0")
        wps = self.waypoints
        if self.mode is TrajectoryMode.LOOP:
            t_ms = math.fmod(t_ms, self.period_ms)
        if t_ms <= self._times[0]:
            return wps[0].pos
        if t_ms >= self._times[-1]:
            return wps[-1].pos
        i = bisect.bisect_right(self._times, t_ms)
        a, b = wps[i - 1], wps[i]
        f = (t_ms - a.t_ms) / (b.t_ms - a.t_ms)
        return GeoPosition(
            a.pos.lat_deg + f * (b.pos.lat_deg - a.pos.lat_deg),
            a.pos.lon_deg + f * (b.pos.lon_deg - a.pos.lon_deg),
            a.pos.alt_m + f * (b.pos.alt_m - a.pos.alt_m),
        )


def position_at(traj: Trajectory, t_ms: float) -> GeoPosition:
    return traj.position_at(t_ms)


def circle_trajectory(
    center: GeoPosition,
    radius_m: float,
    period_ms: float,
    points: int = 72,
    phase_deg: float = 0.0,
    clockwise: bool = False,
) -> Trajectory:
    """Closed polygonal loop approximating a circle, traversed once per period."""
    wps = []
    sign = -1.0 if clockwise else 1.0
    for k in range(points + 1):
        theta = math.radians(phase_deg) + sign * 2.0 * math.pi * (k % points) / points
        pos = offset_position(center, radius_m * math.cos(theta), radius_m * math.sin(theta))
        wps.append(Waypoint(period_ms * k / points, pos))
    return Trajectory(wps, TrajectoryMode.LOOP)


@dataclass(frozen=True)
class DriftModel:
    alt_drift_mps: float = 0.0
    enabled: bool = False


def apply_drift(pos: GeoPosition, drift: DriftModel, t_ms: float) -> GeoPosition:
    """Reported position: true altitude plus a linear GPS altitude drift."""
    if not drift.enabled:
        return pos
    return pos.with_alt(pos.alt_m + drift.alt_drift_mps * t_ms / 1000.0)


# ---------------------------------------------------------------------------
# configuration schema
# ---------------------------------------------------------------------------


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PositionCfg(_Model):
    lat_deg: float = Field(ge=-90, le=90)
    lon_deg: float = Field(ge=-180, le=180)
    alt_m: float = Field(allow_inf_nan=False)

    def geo(self) -> GeoPosition:
        return GeoPosition(self.lat_deg, self.lon_deg, self.alt_m)


class StaticTraj(_Model):
    kind: Literal["static"]
    position: PositionCfg


class CircleTraj(_Model):
    kind: Literal["circle"]
    center: PositionCfg
    radius_m: float = Field(gt=0)
    period_ms: int = Field(gt=0)
    points: int = Field(default=72, ge=3)
    phase_deg: float = 0.0
    clockwise: bool = False


class WaypointsTraj(_Model):
    kind: Literal["waypoints"]
    mode: Literal["HOLD_LAST", "LOOP"] = "HOLD_LAST"
    waypoints: list[tuple[int, float, float, float]] = Field(min_length=1)

    @model_validator(mode="after")
    def _increasing(self) -> WaypointsTraj:
        ts = [w[0] for w in self.waypoints]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("waypoint times must be strictly increasing")
        return self


TrajectoryCfg = Annotated[Union[StaticTraj, CircleTraj, WaypointsTraj], Field(discriminator="kind")]


class DriftCfg(_Model):
    enabled: bool = False
    alt_drift_mps: float = Field(default=0.0, allow_inf_nan=False)


class ActorCfg(_Model):
    trajectory: TrajectoryCfg
    drift: DriftCfg = DriftCfg()


class ActorsCfg(_Model):
    cav: ActorCfg
    uav: ActorCfg


class HopCfg(_Model):
    base_latency_ms: float = Field(ge=0, allow_inf_nan=False)
    jitter_ms: float = Field(default=0.0, ge=0, allow_inf_nan=False)
    p_base: float = Field(default=0.0, ge=0, le=1)
    d0_m: float = Field(default=300.0, ge=0, allow_inf_nan=False)
    dmax_m: float = Field(default=1000.0, ge=0, allow_inf_nan=False)
    latency_ms_per_m: float = Field(default=0.0, ge=0, allow_inf_nan=False)

    @model_validator(mode="after")
    def _range_order(self) -> HopCfg:
        if self.dmax_m < self.d0_m:
            raise ValueError("dmax_m must be >= d0_m")
        return self


class HopsCfg(_Model):
    dsrc: HopCfg | None = None
    udp: HopCfg | None = None
    ws: HopCfg | None = None
    cmp_tcp: HopCfg | None = None


class CadenceCfg(_Model):
    min_interval_ms: int = Field(default=1000, gt=0)
    max_interval_ms: int = Field(default=2000, gt=0)

    @model_validator(mode="after")
    def _order(self) -> CadenceCfg:
        if self.max_interval_ms < self.min_interval_ms:
            raise ValueError("max_interval_ms must be >= min_interval_ms")
        return self


class ZoneCfg(_Model):
    id: str = Field(min_length=1)
    center: PositionCfg
    radius_m: float = Field(default=30.0, gt=0)
    incident_type: Literal["ACCIDENT", "DEBRIS", "STALLED_VEHICLE"] = "ACCIDENT"


class CmpCfg(_Model):
    staleness_ms: int = Field(default=10_000, gt=0)
    extra_clients: list[str] = []
    client_id: str = "uav-1"


class FramesCfg(_Model):
    interval_ms: int = Field(default=1000, gt=0)
    size_bytes: int = Field(default=16_384, ge=8, le=1_048_576)
    observers: int = Field(default=2, ge=0)
    outages: list[tuple[int, int]] = []


class PortsCfg(_Model):
    udp: int = Field(default=5005, ge=0, le=65535)
    cmp: int = Field(default=8008, ge=0, le=65535)
    ws: int = Field(default=8765, ge=0, le=65535)


class ScenarioConfig(_Model):
    seed: int = Field(default=42, ge=0, lt=2**64)
    duration_ms: int = Field(default=120_000, gt=0)
    live_duration_ms: int = Field(default=20_000, gt=0)
    epoch_ms: int = Field(default=1_620_000_000_000, gt=0)
    broadcast_hz: float = Field(default=10.0, gt=0, le=1000)
    tick_ms: int = Field(default=100, gt=0)
    actors: ActorsCfg
    hops: HopsCfg
    cadence: CadenceCfg = CadenceCfg()
    zones: list[ZoneCfg] = []
    cmp: CmpCfg = CmpCfg()
    frames: FramesCfg = FramesCfg()
    ports: PortsCfg = PortsCfg()


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


class Preset(enum.Enum):
    EXP1 = "exp1"
    EXP2 = "exp2"
    EXP2_DYNAMIC = "exp2-dynamic"
    QUICK_CLEAR = "quick-clear"

    @classmethod
    def parse(cls, name: str | Preset) -> Preset:
        if isinstance(name, Preset):
            return name
        key = name.strip().lower().replace("_", "-")
        for p in cls:
            if p.value == key:
                return p
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {[p.value for p in cls]}")


PRESET_HOPS: dict[Preset, tuple[Hop, ...]] = {
    Preset.EXP1: (Hop.DSRC, Hop.UDP, Hop.WS),
    Preset.EXP2: (Hop.DSRC, Hop.UDP, Hop.WS, Hop.CMP_TCP),
    Preset.EXP2_DYNAMIC: (Hop.DSRC, Hop.UDP, Hop.WS, Hop.CMP_TCP),
    Preset.QUICK_CLEAR: (Hop.DSRC, Hop.UDP, Hop.WS, Hop.CMP_TCP),
}

_HOP_KEYS = {Hop.DSRC: "dsrc", Hop.UDP: "udp", Hop.WS: "ws", Hop.CMP_TCP: "cmp_tcp"}

# parking-lot reference point; ground level at 230 m
ORIGIN = GeoPosition(40.0, -83.0, 230.0)
CAV_LOOP_RADIUS_M = 120.0 / (2.0 * math.pi)


def _pos(p: GeoPosition) -> dict[str, float]:
    return p.as_dict()


def _lot(east_m: float, north_m: float, alt_m: float) -> dict[str, float]:
    return _pos(offset_position(ORIGIN, east_m, north_m, alt_m))


_UAV_ORBIT = {
    "trajectory": {"kind": "circle", "center": _lot(0, 0, 260.0), "radius_m": 25.0, "period_ms": 60_000},
}
_CAV_PARKED = {"trajectory": {"kind": "static", "position": _lot(0, 0, 230.0)}}
_CAV_LOOP = {
    "trajectory": {
        "kind": "circle",
        "center": _lot(0, 0, 230.0),
        "radius_m": CAV_LOOP_RADIUS_M,
        "period_ms": 24_000,
    }
}

_EXP1_HOPS = {
    "dsrc": {"base_latency_ms": 25.0, "jitter_ms": 10.0, "p_base": 0.02},
    "udp": {"base_latency_ms": 120.0, "jitter_ms": 40.0, "p_base": 0.01},
    "ws": {"base_latency_ms": 45.0, "jitter_ms": 15.0},
}
_EXP2_HOPS = {
    "dsrc": {"base_latency_ms": 35.0, "jitter_ms": 10.0, "p_base": 0.02},
    "udp": {"base_latency_ms": 8000.0, "jitter_ms": 1000.0, "p_base": 0.01},
    "ws": {"base_latency_ms": 55.0, "jitter_ms": 15.0},
    "cmp_tcp": {"base_latency_ms": 500.0, "jitter_ms": 100.0},
}
DYNAMIC_COUPLING_MS_PER_M = {"dsrc": 0.5, "udp": 10.0, "ws": 0.5, "cmp_tcp": 1.0}


def _with_coupling(hops: dict) -> dict:
    out = copy.deepcopy(hops)
    for key, k in DYNAMIC_COUPLING_MS_PER_M.items():
        out[key]["latency_ms_per_m"] = k
    return out


def _qc_zones() -> list[dict]:
    r = CAV_LOOP_RADIUS_M
    return [
        {"id": "incident-1", "center": _lot(-r, 0.0, 230.0), "radius_m": 30.0, "incident_type": "ACCIDENT"},
        {"id": "incident-2", "center": _lot(0.0, -r, 230.0), "radius_m": 15.0, "incident_type": "DEBRIS"},
    ]


PRESET_DEFAULTS: dict[Preset, dict[str, Any]] = {
    Preset.EXP1: {
        "actors": {
            "cav": {**_CAV_PARKED, "drift": {"enabled": True, "alt_drift_mps": 0.02}},
            "uav": _UAV_ORBIT,
        },
        "hops": _EXP1_HOPS,
    },
    Preset.EXP2: {
        "actors": {"cav": _CAV_PARKED, "uav": _UAV_ORBIT},
        "hops": _EXP2_HOPS,
    },
    Preset.EXP2_DYNAMIC: {
        "actors": {"cav": _CAV_LOOP, "uav": _UAV_ORBIT},
        "hops": _with_coupling(_EXP2_HOPS),
    },
    Preset.QUICK_CLEAR: {
        "actors": {"cav": _CAV_LOOP, "uav": _UAV_ORBIT},
        "hops": _with_coupling(_EXP2_HOPS),
        # aim mid-window so CMP transport jitter keeps arrivals inside 1-2 s
        "cadence": {"min_interval_ms": 1200, "max_interval_ms": 1800},
        "zones": _qc_zones(),
        "cmp": {"extra_clients": ["uav-2", "uav-3"]},
        # long enough for the CAV to reach the second zone and the fix to clear UDP
        "live_duration_ms": 30_000,
    },
}


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    """Recursively overlay ``override`` on ``base``; lists and scalars replace.

    A mapping whose ``kind`` differs from the base's replaces it whole, so
    switching trajectory kind does not inherit the old variant's fields.
    """
    out = copy.deepcopy(dict(base))
    for k, v in override.items():
        if (isinstance(v, Mapping) and isinstance(out.get(k), Mapping)
                and v.get("kind", out[k].get("kind")) == out[k].get("kind")):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _error_path(loc: tuple) -> str:
    parts = []
    for p in loc:
        if isinstance(p, int):
            parts.append(f"[{p}]")
        elif p in ("static", "circle", "waypoints"):
            continue  # discriminator tag pydantic inserts into the location
        else:
            parts.append(("." if parts else "") + str(p))
    return "".join(parts)


def load_config(preset: Preset | str, overrides: Mapping[str, Any] | None = None) -> ScenarioConfig:
    preset = Preset.parse(preset)
    merged = deep_merge(PRESET_DEFAULTS[preset], overrides or {})
    try:
        cfg = ScenarioConfig.model_validate(merged)
    except ValidationError as e:
        err = e.errors()[0]
        raise ConfigError(_error_path(err["loc"]), err["msg"]) from None
    wired = PRESET_HOPS[preset]
    for hop, key in _HOP_KEYS.items():
        present = getattr(cfg.hops, key) is not None
        if hop in wired and not present:
            raise ConfigError(f"hops.{key}", f"required by preset {preset.value}")
        if hop not in wired and present:
            raise ConfigError(f"hops.{key}", f"hop not wired in preset {preset.value}")
    ids = [z.id for z in cfg.zones]
    if len(set(ids)) != len(ids):
        raise ConfigError("zones", "zone ids must be unique")
    for i, (a, b) in enumerate(cfg.frames.outages):
        if not 0 <= a < b:
            raise ConfigError(f"frames.outages[{i}]", "need 0 <= start < end")
    clients = [cfg.cmp.client_id, *cfg.cmp.extra_clients]
    if len(set(clients)) != len(clients):
        raise ConfigError("cmp.extra_clients", "client ids must be unique")
    return cfg


def load_config_file(path: str | Path) -> dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError("config", f"cannot read {path}: {e.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a JSON object")
    return data


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Actor:
    name: str
    trajectory: Trajectory
    drift: DriftModel

    def true_position(self, t_ms: float) -> GeoPosition:
        return self.trajectory.position_at(t_ms)

    def reported_position(self, t_ms: float) -> GeoPosition:
        return apply_drift(self.true_position(t_ms), self.drift, t_ms)


def hop_seed(seed: int, hop: Hop) -> int:
    digest = hashlib.sha256(f"{seed}:{hop.value}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def build_trajectory(cfg: StaticTraj | CircleTraj | WaypointsTraj) -> Trajectory:
    if isinstance(cfg, StaticTraj):
        return Trajectory([Waypoint(0, cfg.position.geo())])
    if isinstance(cfg, CircleTraj):
        return circle_trajectory(cfg.center.geo(), cfg.radius_m, cfg.period_ms, cfg.points, cfg.phase_deg, cfg.clockwise)
    wps = [Waypoint(t, GeoPosition(lat, lon, alt)) for t, lat, lon, alt in cfg.waypoints]
    return Trajectory(wps, TrajectoryMode(cfg.mode))


@dataclass(frozen=True)
class Scenario:
    preset: Preset
    config: ScenarioConfig
    hops: tuple[Hop, ...]
    cav: Actor
    uav: Actor
    channels: dict[Hop, ChannelParams]
    zones: tuple[IncidentZone, ...]

    @property
    def has_cmp(self) -> bool:
        return Hop.CMP_TCP in self.hops

    @property
    def broadcast_interval_ms(self) -> int:
        return max(1, round(1000.0 / self.config.broadcast_hz))


def build_experiment(preset: Preset | str, config: Mapping[str, Any] | ScenarioConfig | None = None) -> Scenario:
    """Resolve a preset plus overrides into a wired scenario."""
    preset = Preset.parse(preset)
    if isinstance(config, ScenarioConfig):
        cfg = load_config(preset, config.model_dump())
    else:
        cfg = load_config(preset, config)
    actors = {}
    for name in ("cav", "uav"):
        a = getattr(cfg.actors, name)
        try:
            traj = build_trajectory(a.trajectory)
        except ValueError as e:
            raise ConfigError(f"actors.{name}.trajectory", str(e)) from None
        actors[name] = Actor(name, traj, DriftModel(a.drift.alt_drift_mps, a.drift.enabled))
    channels = {}
    for hop in PRESET_HOPS[preset]:
        h = getattr(cfg.hops, _HOP_KEYS[hop])
        channels[hop] = ChannelParams(
            base_latency_ms=h.base_latency_ms,
            jitter_ms=h.jitter_ms,
            p_base=h.p_base,
            d0_m=h.d0_m,
            dmax_m=h.dmax_m,
            seed=hop_seed(cfg.seed, hop),
            latency_ms_per_m=h.latency_ms_per_m,
        )
    zones = tuple(
        IncidentZone(z.id, z.center.geo(), z.radius_m, IncidentType[z.incident_type]) for z in cfg.zones
    )
    return Scenario(preset, cfg, PRESET_HOPS[preset], actors["cav"], actors["uav"], channels, zones)
