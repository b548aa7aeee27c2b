"""Connectionless control-message plane: PSM/ATM generation, broadcast
delivery sets, and the per-vehicle neighbor view built from received
messages.

The transport is pure broadcast: no connection setup, no acknowledgements,
no retransmission. Reliability comes from periodic re-broadcast (PSMs every
beacon period, emergency ATMs every period while active) and is accounted,
not hidden: every loss becomes a trace record.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .core import (
    ActionFootprint,
    AtmAction,
    AtmPayload,
    Message,
    MessageClass,
    PsmPayload,
    RoadNetwork,
    VehicleId,
    VehicleState,
)
from .radio import LinkModel, link_distance

# A neighbor entry is evicted once older than this many beacon periods.
STALENESS_PERIODS = 3.0


def generate_psm(ego_id: VehicleId, state: VehicleState, t: float,
                 seq: int) -> Message:
    """Build the periodic beacon: a verbatim snapshot of the sender state."""
    return Message(sender=ego_id, timestamp=t, seq=seq,
                   msg_class=MessageClass.PSM, payload=PsmPayload.of(state))


def generate_atm(ego_id: VehicleId, action: AtmAction,
                 footprint: ActionFootprint, t: float, seq: int,
                 detail: str = "") -> Message:
    """Build an action announcement carrying the maneuver's footprint.

    Footprint validity is enforced by construction (ActionFootprint refuses
    empty boxes), so an ATM can never announce a degenerate claim.
    """
    return Message(sender=ego_id, timestamp=t, seq=seq,
                   msg_class=MessageClass.ATM,
                   payload=AtmPayload(action=action, footprint=footprint,
                                      detail=detail))


def atp_broadcast(msg: Message,
                  sender_pos: Tuple[int, float],
                  candidates: Sequence[Tuple[VehicleId, int, float]],
                  link: LinkModel,
                  network: RoadNetwork,
                  rng) -> Tuple[List[VehicleId], List[VehicleId]]:
    """One-to-all-in-range broadcast: split candidates into reached and lost.

    Candidates are (id, segment, position) triples excluding the sender.
    Receivers out of link range are lost deterministically; in-range
    receivers lose independently with the link's packet error rate. The
    result order follows the candidate order, which callers keep sorted by
    ascending id so the loss draws are reproducible.
    """
    in_range = []
    lost = []
    seg_a, s_a = sender_pos
    for vid, seg_b, s_b in candidates:
        d = link_distance(network, seg_a, s_a, seg_b, s_b)
        if d <= link.range:
            in_range.append(vid)
        else:
            lost.append(vid)
    if in_range and link.base_per > 0.0:
        draws = rng.random(len(in_range))
        delivered = []
        for vid, u in zip(in_range, draws):
            if u < link.base_per:
                lost.append(vid)
            else:
                delivered.append(vid)
        return delivered, lost
    return in_range, lost


@dataclass
class NeighborEntry:
    """Latest beacon from one neighbor plus bookkeeping for staleness."""

    sender: VehicleId
    payload: PsmPayload
    seq: int
    received_at: float

    def age(self, t: float) -> float:
        return t - self.received_at

    def is_stale(self, t: float, psm_period: float) -> bool:
        # Stale means at least one expected beacon was missed.
        return self.age(t) > psm_period + 1e-9


@dataclass
class AnnouncedAction:
    """Latest action announcement from one neighbor; expires with its claim."""

    sender: VehicleId
    payload: AtmPayload
    seq: int
    received_at: float

    def active(self, t: float) -> bool:
        return self.payload.footprint.t_end >= t


@dataclass
class NeighborTable:
    """Receiver-side view of surrounding traffic, fed only by messages.

    PSMs upsert per-sender entries with latest-seq-wins semantics, so
    out-of-order deliveries cannot roll the view back. ATMs land in two
    places: a per-sender announcement slot (latest wins, consulted by
    conflict detection until the claimed footprint expires) and a one-step
    event list consumed by action selection in the same step.
    """

    owner: VehicleId
    entries: Dict[VehicleId, NeighborEntry] = field(default_factory=dict)
    announced: Dict[VehicleId, AnnouncedAction] = field(default_factory=dict)
    step_events: List[AnnouncedAction] = field(default_factory=list)

    def ingest(self, delivered: Iterable[Message], t: float) -> None:
        for msg in delivered:
            if msg.sender == self.owner:
                continue
            if msg.msg_class is MessageClass.PSM:
                cur = self.entries.get(msg.sender)
                if cur is None or msg.seq > cur.seq:
                    self.entries[msg.sender] = NeighborEntry(
                        sender=msg.sender, payload=msg.payload,
                        seq=msg.seq, received_at=t)
            elif msg.msg_class is MessageClass.ATM:
                event = AnnouncedAction(sender=msg.sender, payload=msg.payload,
                                        seq=msg.seq, received_at=t)
                self.step_events.append(event)
                cur = self.announced.get(msg.sender)
                if cur is None or msg.seq > cur.seq:
                    self.announced[msg.sender] = event

    def evict(self, t: float, psm_period: float) -> None:
        horizon = STALENESS_PERIODS * psm_period
        dead = [vid for vid, e in self.entries.items()
                if e.age(t) > horizon + 1e-9]
        for vid in dead:
            del self.entries[vid]
        expired = [vid for vid, a in self.announced.items() if not a.active(t)]
        for vid in expired:
            del self.announced[vid]

    def clear_step_events(self) -> None:
        self.step_events.clear()

    def view(self) -> List[NeighborEntry]:
        """Current entries in ascending sender order (deterministic)."""
        return [self.entries[vid] for vid in sorted(self.entries)]

    def active_announcements(self, t: float) -> List[AnnouncedAction]:
        return [self.announced[vid] for vid in sorted(self.announced)
                if self.announced[vid].active(t)]

    def active_emergency(self, t: float) -> Optional[AnnouncedAction]:
        """Earliest-sender active emergency claim, if any."""
        for vid in sorted(self.announced):
            ann = self.announced[vid]
            if (ann.active(t) and ann.payload.action
                    is AtmAction.EMERGENCY_VEHICLE_AVOIDANCE):
                return ann
        return None


@dataclass
class StaticContext:
    """Slow-changing surroundings: road geometry plus signal phases.

    Geometry comes straight from the road network. Signal phase normally
    arrives as periodic roadside broadcasts; when no fresh phase message is
    held, the published schedule is the fallback, so a lost phase beacon
    degrades to timetable knowledge instead of blindness.
    """

    network: RoadNetwork
    light_reports: Dict[int, Tuple[Tuple[int, ...], float]] = \
        field(default_factory=dict)

    def note_light_report(self, intersection_id: int,
                          green_for: Tuple[int, ...],
                          valid_until: float) -> None:
        self.light_reports[intersection_id] = (tuple(green_for), valid_until)

    def green(self, intersection_id: int, incoming: int, t: float) -> bool:
        report = self.light_reports.get(intersection_id)
        if report is not None:
            green_for, valid_until = report
            if t <= valid_until:
                return incoming in green_for
        for inter in self.network.intersections:
            if inter.id == intersection_id:
                return inter.light_state(t, incoming)
        raise KeyError(f"unknown intersection {intersection_id}")

    def speed_limit(self, segment_id: int) -> float:
        return self.network.segment_by_id[segment_id].speed_limit

    def lane_count(self, segment_id: int) -> int:
        return self.network.segment_by_id[segment_id].lane_count
