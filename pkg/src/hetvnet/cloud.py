"""Sensor data plane: generation, suppression, uplink, aggregation.

Each automated vehicle carries a set of synthetic sensor channels. Samples
pass delta suppression (a sample is kept only when it moved more than the
channel epsilon away from the last kept one), get classified by channel
route, and bulk routes compete for a shared uplink byte budget toward the
base station. The scheduler is round robin across vehicles and FIFO within
one vehicle, with a time-to-live after which unsent samples are dropped.
Uploaded observations land in a vehicular cloud pool that de-duplicates
repeated uploads and evicts stale entries.

Byte accounting is exact by construction: every byte offered to the uplink
is eventually counted as sent, dropped, or still queued.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, Optional, Sequence, Tuple

from .core import MessageClass, VehicleId
from .radio import assign_subband

UPLINK_TTL = 5.0
VC_TTL = 10.0

_PATTERNS = ("ramp", "sine", "constant", "sawtooth")


@dataclass(frozen=True)
class SensorChannel:
    """One synthetic data source on a vehicle.

    rate_hz and sample_bytes fix the offered load; epsilon drives the
    suppression; route names the message class the survivors travel as.
    Bulk data belongs on the infotainment route; the control routes carry
    no extra airtime because beacons already summarize vehicle state.
    """

    name: str
    rate_hz: float
    sample_bytes: int
    epsilon: float = 0.0
    route: MessageClass = MessageClass.INFOTAINMENT
    pattern: str = "ramp"
    base: float = 0.0
    slope: float = 1.0       # ramp and sawtooth, units per second
    amplitude: float = 1.0   # sine
    period: float = 10.0     # sine and sawtooth

    def __post_init__(self) -> None:
        if self.rate_hz <= 0:
            raise ValueError(f"channel {self.name}: rate_hz must be positive")
        if self.sample_bytes <= 0:
            raise ValueError(
                f"channel {self.name}: sample_bytes must be positive")
        if self.epsilon < 0:
            raise ValueError(f"channel {self.name}: epsilon must be >= 0")
        if self.pattern not in _PATTERNS:
            raise ValueError(f"channel {self.name}: unknown pattern "
                             f"{self.pattern!r}, expected one of {_PATTERNS}")
        if self.period <= 0:
            raise ValueError(f"channel {self.name}: period must be positive")

    def value(self, t: float) -> float:
        if self.pattern == "ramp":
            return self.base + self.slope * t
        if self.pattern == "sine":
            return self.base + self.amplitude * math.sin(
                2.0 * math.pi * t / self.period)
        if self.pattern == "sawtooth":
            return self.base + self.slope * (t % self.period)
        return self.base


@dataclass(frozen=True)
class SensorSample:
    vehicle: VehicleId
    channel: str
    t: float
    value: float
    size_bytes: int


def delta_suppress(values: Sequence[float], epsilon: float) -> List[int]:
    """Indices of the samples a delta filter keeps.

    The first sample is always kept; after that a sample survives only when
    it differs from the last kept one by strictly more than epsilon. The
    held value therefore never drifts more than epsilon from the truth.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    kept: List[int] = []
    last: Optional[float] = None
    for i, v in enumerate(values):
        if last is None or abs(v - last) > epsilon:
            kept.append(i)
            last = v
    return kept


def classify_route(channel: SensorChannel) -> Tuple[MessageClass, int]:
    """Message class and subband a channel's survivors are filed under."""
    return channel.route, assign_subband(channel.route)


@dataclass
class SensorStream:
    """Stateful per-vehicle-per-channel sampler with inline suppression."""

    vehicle: VehicleId
    channel: SensorChannel
    last_kept: Optional[float] = None
    _credit: float = 0.0

    def emit(self, t: float, dt: float) -> Tuple[List[SensorSample], int]:
        """Samples kept during (t, t+dt], plus the byte count generated.

        Sampling instants are spaced 1/rate_hz apart; fractional samples
        per step carry over so long-run rate is exact.
        """
        self._credit += self.channel.rate_hz * dt
        n = int(self._credit + 1e-9)
        self._credit -= n
        kept: List[SensorSample] = []
        for k in range(n):
            instant = t + (k + 1) / self.channel.rate_hz
            v = self.channel.value(instant)
            if self.last_kept is None or \
                    abs(v - self.last_kept) > self.channel.epsilon:
                self.last_kept = v
                kept.append(SensorSample(
                    vehicle=self.vehicle, channel=self.channel.name,
                    t=instant, value=v,
                    size_bytes=self.channel.sample_bytes))
        return kept, n * self.channel.sample_bytes


@dataclass
class UplinkItem:
    sample: SensorSample
    enqueued_at: float


@dataclass
class UplinkScheduler:
    """Shared byte budget toward the base station.

    capacity_bps is in bytes per second. Budget accrues per drained step
    and carries over while any queue is backlogged, so quantization never
    costs throughput; it resets when there is nothing to send.
    """

    capacity_bps: float
    ttl: float = UPLINK_TTL
    queues: Dict[VehicleId, Deque[UplinkItem]] = field(default_factory=dict)
    offered_bytes: int = 0
    sent_bytes: int = 0
    dropped_bytes: int = 0
    dropped_count: int = 0
    _credit: float = 0.0
    _last_served: Optional[VehicleId] = None

    def offer(self, sample: SensorSample, now: float) -> None:
        q = self.queues.setdefault(sample.vehicle, deque())
        q.append(UplinkItem(sample=sample, enqueued_at=now))
        self.offered_bytes += sample.size_bytes

    def queued_bytes(self) -> int:
        return sum(item.sample.size_bytes
                   for q in self.queues.values() for item in q)

    def drain(self, now: float, dt: float
              ) -> Tuple[List[SensorSample], List[SensorSample]]:
        """One step of service: returns (sent, expired) samples."""
        expired: List[SensorSample] = []
        for vid in sorted(self.queues):
            q = self.queues[vid]
            while q and now - q[0].enqueued_at > self.ttl + 1e-9:
                item = q.popleft()
                self.dropped_bytes += item.sample.size_bytes
                self.dropped_count += 1
                expired.append(item.sample)

        self._credit += self.capacity_bps * dt
        sent: List[SensorSample] = []
        order = sorted(vid for vid, q in self.queues.items() if q)
        if order:
            if self._last_served is not None:
                shift = sum(1 for vid in order if vid <= self._last_served)
                order = order[shift:] + order[:shift]
            rotation: Deque[VehicleId] = deque(order)
            while rotation:
                vid = rotation.popleft()
                q = self.queues[vid]
                if not q or q[0].sample.size_bytes > self._credit + 1e-6:
                    continue
                item = q.popleft()
                self._credit -= item.sample.size_bytes
                self.sent_bytes += item.sample.size_bytes
                self._last_served = vid
                sent.append(item.sample)
                if q:
                    rotation.append(vid)
        if not any(self.queues.values()):
            self._credit = 0.0
        return sent, expired


@dataclass
class VcEntry:
    sample: SensorSample
    received_at: float


@dataclass
class VehicularCloud:
    """De-duplicating observation pool with time-based eviction."""

    ttl: float = VC_TTL
    entries: Dict[Tuple[VehicleId, float, str], VcEntry] = \
        field(default_factory=dict)
    duplicates: int = 0

    def add(self, sample: SensorSample, now: float) -> bool:
        """Insert an upload; returns False when it was already present."""
        key = (sample.vehicle, sample.t, sample.channel)
        if key in self.entries:
            self.duplicates += 1
            return False
        self.entries[key] = VcEntry(sample=sample, received_at=now)
        return True

    def evict(self, now: float) -> int:
        stale = [key for key, entry in self.entries.items()
                 if now - entry.received_at > self.ttl + 1e-9]
        for key in stale:
            del self.entries[key]
        return len(stale)

    def coverage(self, channel: str) -> int:
        """Distinct vehicles currently contributing to a channel."""
        return len({key[0] for key in self.entries if key[2] == channel})

    def size(self) -> int:
        return len(self.entries)


def vc_aggregate(uploads: Iterable[Tuple[SensorSample, float]],
                 cloud: Optional[VehicularCloud] = None,
                 ttl: float = VC_TTL) -> VehicularCloud:
    """Fold (sample, arrival time) pairs into a pool, evicting as time runs.

    Uploads must arrive in nondecreasing time order; eviction runs at each
    arrival so the pool never reports entries older than the TTL.
    """
    if cloud is None:
        cloud = VehicularCloud(ttl=ttl)
    for sample, now in uploads:
        cloud.add(sample, now)
        cloud.evict(now)
    return cloud
