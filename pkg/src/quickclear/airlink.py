"""Seeded, distance-aware simulated link.

Models the CAV -> UAV DSRC broadcast: a piecewise-linear drop ramp over
range plus base latency, uniform jitter and an optional range-proportional
latency term. The same model, with its range-dependence switched off, is
reused for the wired/cellular hops in simulation.
"""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass
from typing import Any

from quickclear.geo import GeoPosition, slant_distance_m


class Verdict(enum.Enum):
    DELIVERED = "DELIVERED"
    DROPPED = "DROPPED"


@dataclass(frozen=True)
class ChannelParams:
    base_latency_ms: float = 30.0
    jitter_ms: float = 0.0
    p_base: float = 0.0
    d0_m: float = 300.0
    dmax_m: float = 1000.0
    seed: int = 0
    latency_ms_per_m: float = 0.0

    def __post_init__(self) -> None:
        for name in ("base_latency_ms", "jitter_ms", "latency_ms_per_m", "d0_m"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")
        if not 0.0 <= self.p_base <= 1.0:
            raise ValueError(f"p_base must lie in [0, 1], got {self.p_base!r}")
        if math.isnan(self.dmax_m) or self.dmax_m < self.d0_m:
            raise ValueError(f"need 0 <= d0_m <= dmax_m, got d0={self.d0_m} dmax={self.dmax_m}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class DeliveryOutcome:
    verdict: Verdict
    arrival_ts_ms: int | None = None

    @property
    def delivered(self) -> bool:
        return self.verdict is Verdict.DELIVERED


def drop_probability(d_m: float, p: ChannelParams) -> float:
    if d_m < 0:
        raise ValueError("distance must be >= 0")
    if d_m <= p.d0_m:
        return p.p_base
    if d_m >= p.dmax_m:
        return 1.0
    frac = (d_m - p.d0_m) / (p.dmax_m - p.d0_m)
    return p.p_base + (1.0 - p.p_base) * frac


class OutOfOrderSend(ValueError):
    pass


class Channel:
    """One simulated link with its own RNG stream.

    Every ``transmit`` consumes exactly two uniform variates (drop draw, then
    jitter draw) whatever the verdict, so the stream position depends only
    on how many messages were sent. Calls must come in nondecreasing
    ``send_ts_ms`` order.
    """

    def __init__(self, params: ChannelParams) -> None:
        self.params = params
        self._rng = random.Random(params.seed)
        self._last_send: float | None = None
        self.sent = 0
        self.dropped = 0

    def transmit_at_distance(self, d_m: float, send_ts_ms: int) -> DeliveryOutcome:
        if self._last_send is not None and send_ts_ms < self._last_send:
            raise OutOfOrderSend(f"send_ts {send_ts_ms} precedes previous send {self._last_send}")
        self._last_send = send_ts_ms
        out = _outcome(d_m, send_ts_ms, self.params, self._rng)
        self.sent += 1
        if not out.delivered:
            self.dropped += 1
        return out

    def transmit(self, m: Any, tx: GeoPosition, rx: GeoPosition, send_ts_ms: int) -> DeliveryOutcome:
        """Send ``m`` from ``tx`` to ``rx``; the payload itself does not affect the verdict."""
        return self.transmit_at_distance(slant_distance_m(tx, rx), send_ts_ms)


def transmit(
    m: Any,
    tx: GeoPosition,
    rx: GeoPosition,
    send_ts_ms: int,
    p: ChannelParams,
    rng: random.Random,
) -> DeliveryOutcome:
    """Stateless variant of ``Channel.transmit`` driven by a caller-owned RNG."""
    return _outcome(slant_distance_m(tx, rx), send_ts_ms, p, rng)


def _outcome(d_m: float, send_ts_ms: int, p: ChannelParams, rng: random.Random) -> DeliveryOutcome:
    u_drop = rng.random()
    u_jit = rng.random()
    if u_drop < drop_probability(d_m, p):
        return DeliveryOutcome(Verdict.DROPPED)
    latency = p.base_latency_ms + p.latency_ms_per_m * d_m + p.jitter_ms * (2.0 * u_jit - 1.0)
    # arrival must stay strictly after the send on an integer-ms clock
    return DeliveryOutcome(Verdict.DELIVERED, max(send_ts_ms + round(latency), send_ts_ms + 1))
