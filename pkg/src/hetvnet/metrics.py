"""Run metrics, computed one way from two sources.

The engine updates a Counters instance inline while it runs; the report
command rebuilds an identical Counters by replaying a recorded trace. Both
end in the same finalize() arithmetic, so a full-recording run and the
recomputation from its own trace file agree field for field.

Latency and speed populations are held as exact value counters (the radio
model only produces a small set of distinct latencies), so percentiles are
true population percentiles at O(distinct values) memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from . import trace as tr


class ValueCounter:
    """Multiset of floats with exact nearest-rank percentiles."""

    __slots__ = ("counts", "n")

    def __init__(self):
        self.counts: Dict[float, int] = {}
        self.n = 0

    def add(self, value: float, times: int = 1) -> None:
        self.counts[value] = self.counts.get(value, 0) + times
        self.n += times

    def percentile(self, q: float) -> Optional[float]:
        """Nearest-rank percentile, q in (0, 1]; None on an empty counter."""
        if self.n == 0:
            return None
        if not 0.0 < q <= 1.0:
            raise ValueError("q must be in (0, 1]")
        rank = math.ceil(q * self.n)
        seen = 0
        for value in sorted(self.counts):
            seen += self.counts[value]
            if seen >= rank:
                return value
        return max(self.counts)  # unreachable, defensive

    def mean(self) -> Optional[float]:
        if self.n == 0:
            return None
        total = sum(v * c for v, c in sorted(self.counts.items()))
        return total / self.n

    def max(self) -> Optional[float]:
        return max(self.counts) if self.counts else None

    def summary(self) -> Optional[Dict[str, float]]:
        if self.n == 0:
            return None
        return {"n": self.n, "mean": self.mean(), "p50": self.percentile(0.5),
                "p95": self.percentile(0.95), "p99": self.percentile(0.99),
                "max": self.max()}


@dataclass
class Counters:
    """Everything the final report is computed from."""

    sent: Dict[str, int] = field(default_factory=dict)           # class -> msgs
    sent_targets: Dict[str, int] = field(default_factory=dict)   # class -> rcvrs
    delivered: Dict[str, int] = field(default_factory=dict)
    lost: Dict[str, int] = field(default_factory=dict)
    latency: Dict[str, ValueCounter] = field(default_factory=dict)
    link_delivered: Dict[str, int] = field(default_factory=dict)
    link_lost: Dict[str, int] = field(default_factory=dict)
    subband_msgs: Dict[int, int] = field(default_factory=dict)
    subband_bits: Dict[int, int] = field(default_factory=dict)
    subband_collisions: Dict[int, int] = field(default_factory=dict)
    subband_slots: Dict[int, ValueCounter] = field(default_factory=dict)
    atm_actions: Dict[str, int] = field(default_factory=dict)
    conflicts_detected: int = 0
    conflicts_resolved: int = 0
    meetings_resolved: int = 0
    near_misses: int = 0
    collisions: int = 0
    speed: ValueCounter = field(default_factory=ValueCounter)
    vehicle_steps: int = 0
    uplink_offered: int = 0
    uplink_sent: int = 0
    uplink_dropped: int = 0
    uplink_queued: int = 0
    subband_backlog: Dict[int, int] = field(default_factory=dict)

    # -- engine-side fast paths -------------------------------------------

    def note_sent(self, cls: str, subband: int, bits: int, targets: int,
                  slots: int, collisions: int,
                  atm_action: Optional[str] = None) -> None:
        self.sent[cls] = self.sent.get(cls, 0) + 1
        self.sent_targets[cls] = self.sent_targets.get(cls, 0) + targets
        self.subband_msgs[subband] = self.subband_msgs.get(subband, 0) + 1
        self.subband_bits[subband] = self.subband_bits.get(subband, 0) + bits
        self.subband_collisions[subband] = \
            self.subband_collisions.get(subband, 0) + collisions
        self.subband_slots.setdefault(subband, ValueCounter()).add(float(slots))
        if atm_action is not None:
            self.atm_actions[atm_action] = \
                self.atm_actions.get(atm_action, 0) + 1

    def note_delivered(self, cls: str, link: str, latency: float,
                       times: int = 1) -> None:
        self.delivered[cls] = self.delivered.get(cls, 0) + times
        self.link_delivered[link] = self.link_delivered.get(link, 0) + times
        self.latency.setdefault(cls, ValueCounter()).add(latency, times)

    def note_lost(self, cls: str, link: str, times: int = 1) -> None:
        self.lost[cls] = self.lost.get(cls, 0) + times
        self.link_lost[link] = self.link_lost.get(link, 0) + times

    def note_state(self, speed: float) -> None:
        self.speed.add(speed)
        self.vehicle_steps += 1

    # -- trace-side replay -------------------------------------------------

    def consume(self, rec: Dict[str, object]) -> None:
        kind = rec["kind"]
        if kind == tr.K_SENT:
            self.note_sent(cls=rec["cls"], subband=rec["subband"],
                           bits=rec["bits"], targets=rec["targets"],
                           slots=rec["slots"], collisions=rec["collisions"],
                           atm_action=rec.get("action"))
            if rec["cls"] == "SensorBulk":
                # Uplink bytes obey queued = offered - sent - dropped, so the
                # backlog can be replayed without a scheduler snapshot.
                size = rec["bits"] // 8
                self.uplink_offered += size
                self.uplink_queued += size
        elif kind == tr.K_DELIVERED:
            self.note_delivered(rec["cls"], rec["link"], rec["latency"],
                                times=len(rec["receivers"]))
            if rec["cls"] == "SensorBulk":
                self.uplink_sent += rec["bytes"]
                self.uplink_queued -= rec["bytes"]
        elif kind == tr.K_LOST:
            self.note_lost(rec["cls"], rec["link"],
                           times=len(rec["receivers"]))
            if rec["cls"] == "SensorBulk":
                self.uplink_dropped += rec["bytes"]
                self.uplink_queued -= rec["bytes"]
        elif kind == tr.K_STATE:
            self.note_state(rec["speed"])
        elif kind == tr.K_CONFLICT:
            self.conflicts_detected += 1
        elif kind == tr.K_RESOLVED:
            self.conflicts_resolved += 1
            if rec.get("meeting"):
                self.meetings_resolved += 1
        elif kind == tr.K_NEAR_MISS:
            self.near_misses += 1
        elif kind == tr.K_COLLISION:
            self.collisions += 1

    # -- report -------------------------------------------------------------

    def finalize(self, duration: float, road_km: Optional[float] = None,
                 dt: Optional[float] = None) -> Dict[str, object]:
        classes = sorted(set(self.sent) | set(self.delivered) | set(self.lost))
        messages = {}
        for cls in classes:
            delivered = self.delivered.get(cls, 0)
            lost = self.lost.get(cls, 0)
            targets = self.sent_targets.get(cls, 0)
            resolved = delivered + lost
            lat = self.latency.get(cls, ValueCounter())
            messages[cls] = {
                "sent": self.sent.get(cls, 0),
                "targets": targets,
                "delivered": delivered,
                "lost": lost,
                "in_flight": targets - resolved,
                "pdr": (delivered / resolved) if resolved else None,
                "latency": lat.summary(),
            }
        links = {}
        for link in sorted(set(self.link_delivered) | set(self.link_lost)):
            d = self.link_delivered.get(link, 0)
            l = self.link_lost.get(link, 0)
            links[link] = {"delivered": d, "lost": l,
                           "pdr": (d / (d + l)) if d + l else None}
        subbands = {}
        for band in sorted(set(self.subband_msgs) | set(self.subband_backlog)):
            slots = self.subband_slots.get(band, ValueCounter())
            bits = self.subband_bits.get(band, 0)
            subbands[str(band)] = {
                "messages": self.subband_msgs.get(band, 0),
                "bits": bits,
                "collisions": self.subband_collisions.get(band, 0),
                "throughput_bps": bits / duration if duration > 0 else None,
                "backlog": self.subband_backlog.get(band, 0),
                "slots": slots.summary(),
            }
        mean_speed = self.speed.mean()
        density = None
        flow = None
        if road_km and dt and duration > 0:
            density = self.vehicle_steps * dt / duration / road_km
            if mean_speed is not None:
                flow = density * mean_speed * 3.6
        return {
            "duration_s": duration,
            "messages": messages,
            "links": links,
            "subbands": subbands,
            "atm_actions": dict(sorted(self.atm_actions.items())),
            "safety": {
                "conflicts_detected": self.conflicts_detected,
                "conflicts_resolved": self.conflicts_resolved,
                "meetings_resolved": self.meetings_resolved,
                "near_misses": self.near_misses,
                "collisions": self.collisions,
            },
            "traffic": {
                "vehicle_steps": self.vehicle_steps,
                "mean_speed": mean_speed,
                "p50_speed": self.speed.percentile(0.5),
                "density_veh_per_km": density,
                "flow_veh_per_h": flow,
            },
            "uplink": {
                "offered_bytes": self.uplink_offered,
                "admitted_bytes": self.uplink_sent,
                "deferred_bytes": self.uplink_queued,
                "dropped_bytes": self.uplink_dropped,
            },
        }


def report_from_trace(path: str, duration: Optional[float] = None,
                      road_km: Optional[float] = None,
                      dt: Optional[float] = None) -> Dict[str, object]:
    """Recompute the metrics report by replaying a recorded trace file.

    Run geometry (duration, road length, step size) is taken from the
    trace's own header record unless overridden; a headerless trace falls
    back to the last record timestamp as the duration.
    """
    counters = Counters()
    last_t = 0.0
    for rec in tr.read_trace(path):
        if rec["kind"] == tr.K_META:
            if duration is None:
                duration = rec.get("duration")
            if road_km is None:
                road_km = rec.get("road_km")
            if dt is None:
                dt = rec.get("dt")
            continue
        counters.consume(rec)
        last_t = max(last_t, rec["t"])
    if duration is None:
        duration = last_t
    return counters.finalize(duration, road_km=road_km, dt=dt)
