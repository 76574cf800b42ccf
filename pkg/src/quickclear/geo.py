"""WGS-84 positions and spherical-earth distances."""

from __future__ import annotations

import math
from dataclasses import dataclass

from quickclear.errors import OutOfRange

EARTH_RADIUS_M = 6_371_000.0


@dataclass(frozen=True, slots=True)
class GeoPosition:
    """Latitude/longitude in degrees, altitude in meters above the ellipsoid.

    Construction validates ranges; out-of-range values raise ``OutOfRange``
    instead of being clamped.
    """

    lat_deg: float
    lon_deg: float
    alt_m: float

    def __post_init__(self) -> None:
        _check("lat_deg", self.lat_deg, -90.0, 90.0)
        _check("lon_deg", self.lon_deg, -180.0, 180.0)
        _check("alt_m", self.alt_m, -math.inf, math.inf)

    def as_dict(self) -> dict[str, float]:
        return {"lat_deg": self.lat_deg, "lon_deg": self.lon_deg, "alt_m": self.alt_m}

    def with_alt(self, alt_m: float) -> GeoPosition:
        return GeoPosition(self.lat_deg, self.lon_deg, alt_m)


def _check(name: str, value: object, lo: float, hi: float) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise OutOfRange(name, value, "not a number")
    if not math.isfinite(value):
        raise OutOfRange(name, value, "not finite")
    if not lo <= value <= hi:
        raise OutOfRange(name, value, f"expected [{lo}, {hi}]")


def make_position(lat_deg: float, lon_deg: float, alt_m: float) -> GeoPosition:
    return GeoPosition(lat_deg, lon_deg, alt_m)


def surface_distance_m(a: GeoPosition, b: GeoPosition) -> float:
    """Haversine great-circle distance in meters, ignoring altitude."""
    phi1 = math.radians(a.lat_deg)
    phi2 = math.radians(b.lat_deg)
    dphi = phi2 - phi1
    dlmb = math.radians(b.lon_deg - a.lon_deg)
    h = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2.0) ** 2
    # rounding can push h a hair past 1 for antipodal points
    h = min(1.0, max(0.0, h))
    return 2.0 * EARTH_RADIUS_M * math.asin(math.sqrt(h))


def slant_distance_m(a: GeoPosition, b: GeoPosition) -> float:
    """Straight-line range combining surface distance and altitude gap."""
    return math.hypot(surface_distance_m(a, b), a.alt_m - b.alt_m)


def offset_position(origin: GeoPosition, east_m: float, north_m: float, alt_m: float | None = None) -> GeoPosition:
    """Small-offset local tangent-plane step from ``origin``.

    Adequate for parking-lot scale geometry; not a geodesic solver.
    """
    dlat = math.degrees(north_m / EARTH_RADIUS_M)
    dlon = math.degrees(east_m / (EARTH_RADIUS_M * math.cos(math.radians(origin.lat_deg))))
    return GeoPosition(
        origin.lat_deg + dlat,
        origin.lon_deg + dlon,
        origin.alt_m if alt_m is None else alt_m,
    )
