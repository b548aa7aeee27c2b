"""Cooperative maneuver coordination.

Small scale, evaluated per vehicle per step over the message-built view:
select exactly one action by a fixed rule cascade, detect conflicts against
what neighbors have announced or are known to occupy, and resolve conflicts
by a fixed priority order (emergency above all, safety braking above normal
driving, elective maneuvers below everything, right-of-way between turns by
the meeting rule, ties by ascending vehicle id).

Large scale, evaluated centrally between steps from beacons received at the
base station: per-segment traffic state, travel-time path planning, short
horizon density prediction, and emergency dissemination planning.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .core import (
    Action,
    ActionFootprint,
    AtmAction,
    AtmPayload,
    BehaviorMode,
    Maneuver,
    Message,
    MessageClass,
    RoadNetwork,
    VehicleId,
    VehicleState,
    footprints_conflict,
    AVOIDANCE,
    CAR_FOLLOWING,
    FREE_DRIVING,
    LANE_KEEPING,
)
from .mobility import (
    IdmParams,
    ManeuverPlan,
    OvertakeContext,
    emergency_pullover,
    occupancy_strip,
    plan_lane_change,
    plan_overtake,
)

# Rule-2 lookahead: if the bumper gap closes within this time, brake now.
PREDICTED_OVERLAP_HORIZON = 1.0

# How long an emergency-spread advisory stays active on a segment.
AEA_ADVISORY_WINDOW = 30.0

#: The fixed priority order, highest first. This is the single source the
#: Action constructor draws ordinals from (see core.action_priority); it is
#: reproduced here as data for introspection and tests.
PRIORITY_TABLE: Tuple[Tuple[str, int], ...] = (
    ("EmergencyAvoidance", 6),
    ("Avoidance/Brake", 5),
    ("CarFollowing", 4),
    ("LaneKeeping/FreeDriving/IntersectionQueuing", 3),
    ("LaneChanging/Turning", 2),
    ("Overtaking", 1),
    ("Platooning(join)", 0),
)

# Elective maneuvers are demoted to lane keeping when they lose; safety
# actions never are.
_ELECTIVE = (Maneuver.LANE_CHANGING, Maneuver.OVERTAKING, Maneuver.TURNING,
             Maneuver.PLATOONING)

_TURN_RANK = {"straight": 2, "right": 1, "left": 0}


@dataclass(frozen=True)
class OasDecision:
    """Outcome of action selection: the action plus its execution plan.

    Passive outcomes (keep lane, follow, brake) carry no plan; maneuver
    outcomes carry the plan that commits them.
    """

    action: Action
    plan: Optional[ManeuverPlan] = None
    rule: int = 0  # 1-based index of the cascade rule that fired


def oas_select(ego_id: VehicleId, ego: VehicleState, table, t: float,
               p: IdmParams, dt: float, lane_count: int, axis_offset: float,
               leader: Optional[VehicleState] = None,
               ring_length: Optional[float] = None,
               approach_lane: Optional[int] = None,
               overtake_ctx: Optional[OvertakeContext] = None,
               no_electives: bool = False) -> OasDecision:
    """Deterministic rule cascade; exactly one action comes out.

    Rules, first hit wins:
      1. an active emergency claim covering the ego's vicinity: pull over.
      2. bumper gap below standstill minimum, or predicted to close within
         the lookahead: brake.
      3. slower leader and a safe passing slot (or a running overtake ready
         to return): overtake.
      4. wrong lane for the upcoming turn: align.
      5. leader present: follow.
      6. otherwise: free driving.
    no_electives skips rules 3 and 4 and pins rule 1 to braking without
    steering; it covers platoon members (the head owns lateral motion) and
    any vehicle running with cooperation disabled.
    """
    view = table.view()

    emergency = table.active_emergency(t)
    if emergency is not None:
        own_axis_s = axis_offset + ego.s
        claim = emergency.payload.footprint
        if claim.s_min - 500.0 <= own_axis_s <= claim.s_max + 500.0:
            plan = emergency_pullover(
                ego_id, ego, claim, view, p, t, dt, lane_count, axis_offset,
                is_platoon_follower=no_electives,
                ring_length=ring_length)
            return OasDecision(action=plan.action, plan=plan, rule=1)

    if leader is not None:
        gap = leader.s - leader.length - ego.s
        closing = ego.speed - leader.speed
        if gap < p.s0 or gap - closing * PREDICTED_OVERLAP_HORIZON < 0.0:
            fp = occupancy_strip(ego.lane, ego.s, ego.speed, t, axis_offset,
                                 length=ego.length)
            action = Action(kind=AVOIDANCE, footprint=fp, issuer=ego_id)
            return OasDecision(action=action, rule=2)

    if not no_electives:
        plan = plan_overtake(ego_id, ego, leader, view, p, t, dt, lane_count,
                             axis_offset, ring_length=ring_length,
                             ctx=overtake_ctx)
        if plan is not None:
            return OasDecision(action=plan.action, plan=plan, rule=3)

        if approach_lane is not None and approach_lane != ego.lane:
            step_lane = ego.lane + (1 if approach_lane > ego.lane else -1)
            plan = plan_lane_change(ego_id, ego, step_lane, view, p, t, dt,
                                    axis_offset, ring_length=ring_length)
            if plan is not None:
                return OasDecision(action=plan.action, plan=plan, rule=4)

    if leader is not None:
        fp = occupancy_strip(ego.lane, ego.s, ego.speed, t, axis_offset,
                             length=ego.length)
        return OasDecision(action=Action(kind=CAR_FOLLOWING, footprint=fp,
                                         issuer=ego_id), rule=5)

    fp = occupancy_strip(ego.lane, ego.s, ego.speed, t, axis_offset,
                         length=ego.length)
    return OasDecision(action=Action(kind=FREE_DRIVING, footprint=fp,
                                     issuer=ego_id), rule=6)


def acd_check(mine: Action, neighbors: Iterable[Action]) -> List[Action]:
    """All neighbor claims whose footprints intersect mine.

    An empty result means the action is executable as claimed. Own claims
    are skipped so a vehicle never conflicts with itself.
    """
    return [other for other in neighbors
            if other.issuer != mine.issuer
            and footprints_conflict(mine.footprint, other.footprint)]


def _apa_key(action: Action) -> Tuple[int, int, int]:
    turn_rank = 0
    if action.kind.kind is Maneuver.TURNING:
        turn_rank = _TURN_RANK[action.kind.turn]
    return (action.priority, turn_rank, -action.issuer)


def apa_resolve(conflicts: Sequence[Action]
                ) -> Tuple[Action, List[Tuple[Action, Optional[BehaviorMode]]]]:
    """Pick the one action that proceeds; assign fallbacks to the rest.

    Winner is the maximum of (priority, turn rank, lower id wins). Elective
    losers (lane change, overtake, turn, platoon join) fall back to lane
    keeping and must re-attempt later; safety losers keep their action, a
    braking vehicle never stops braking because it lost a tie.
    """
    if not conflicts:
        raise ValueError("apa_resolve needs a non-empty conflict set")
    ordered = sorted(conflicts, key=_apa_key, reverse=True)
    winner = ordered[0]
    losers: List[Tuple[Action, Optional[BehaviorMode]]] = []
    for action in ordered[1:]:
        if action.kind.kind in _ELECTIVE:
            losers.append((action, LANE_KEEPING))
        else:
            losers.append((action, None))
    return winner, losers


@dataclass
class Incident:
    segment: int
    vehicle: VehicleId
    t: float
    kind: str  # 'malfunction' | 'emergency'


@dataclass
class SegmentTraffic:
    density: float = 0.0  # vehicles per km
    mean_speed: Optional[float] = None
    history: deque = field(default_factory=deque)  # recent density values


@dataclass
class CloudState:
    """Centrally aggregated per-segment traffic picture."""

    segments: Dict[int, SegmentTraffic] = field(default_factory=dict)
    incidents: List[Incident] = field(default_factory=list)
    history_length: int = 30
    dropped: int = 0  # beacons naming segments the network does not have

    def traffic(self, segment_id: int) -> SegmentTraffic:
        if segment_id not in self.segments:
            self.segments[segment_id] = SegmentTraffic(
                history=deque(maxlen=self.history_length))
        return self.segments[segment_id]


def cloud_ingest(state: CloudState, uplinked: Sequence[Message],
                 network: RoadNetwork, t: float) -> CloudState:
    """Fold a window of base-station-received messages into the picture.

    The latest beacon per sender wins, so each vehicle contributes exactly
    one position sample per window. Malfunction beacons and emergency
    announcements become incidents. Beacons with unknown segments are
    dropped and counted, never fatal.
    """
    latest: Dict[VehicleId, Message] = {}
    dropped = 0
    for msg in uplinked:
        if msg.msg_class is MessageClass.PSM:
            if msg.payload.segment not in network.segment_by_id:
                dropped += 1
                continue
            cur = latest.get(msg.sender)
            if cur is None or msg.seq > cur.seq:
                latest[msg.sender] = msg
        elif msg.msg_class is MessageClass.ATM:
            if msg.payload.action is AtmAction.EMERGENCY_VEHICLE_AVOIDANCE:
                seg = _segment_of_axis(network, msg.payload.footprint.s_min)
                if seg is not None and not _incident_known(state, msg.sender):
                    state.incidents.append(Incident(
                        segment=seg, vehicle=msg.sender, t=t,
                        kind="emergency"))

    per_segment: Dict[int, List[float]] = {}
    for vid in sorted(latest):
        msg = latest[vid]
        snap = msg.payload
        per_segment.setdefault(snap.segment, []).append(snap.speed)
        if snap.malfunction and not _incident_known(state, vid):
            state.incidents.append(Incident(segment=snap.segment, vehicle=vid,
                                            t=t, kind="malfunction"))

    for seg in network.segments:
        traffic = state.traffic(seg.id)
        speeds = per_segment.get(seg.id, [])
        traffic.density = len(speeds) / (seg.length / 1000.0)
        traffic.mean_speed = (sum(speeds) / len(speeds)) if speeds else None
        traffic.history.append(traffic.density)
    state.dropped += dropped
    return state


def _incident_known(state: CloudState, vehicle: VehicleId) -> bool:
    return any(inc.vehicle == vehicle for inc in state.incidents)


def _segment_of_axis(network: RoadNetwork, axis_s: float) -> Optional[int]:
    for seg in network.segments:
        off = network.axis_offset(seg.id)
        if off <= axis_s <= off + seg.length:
            return seg.id
    return None


def segment_travel_time(state: CloudState, network: RoadNetwork,
                        segment_id: int, v_floor: float) -> float:
    """Traversal time under observed mean speed, free-flow when unobserved."""
    seg = network.segment_by_id[segment_id]
    traffic = state.segments.get(segment_id)
    speed = seg.speed_limit
    if traffic is not None and traffic.mean_speed is not None:
        speed = traffic.mean_speed
    return seg.length / max(speed, v_floor)


def cloud_opp(state: CloudState, network: RoadNetwork, src: int, dst: int,
              v_floor: float = 1.0) -> Optional[List[int]]:
    """Minimum-travel-time route over the segment graph.

    Cost of a path is the sum of per-segment traversal times over every
    segment on it, endpoints included. Equal-cost candidates resolve to the
    lexicographically smallest segment-id sequence. Returns the segment
    list, [] when src == dst, or None when dst is unreachable.
    """
    if src not in network.segment_by_id or dst not in network.segment_by_id:
        raise KeyError("src and dst must be network segments")
    if src == dst:
        return []
    out_edges: Dict[int, List[int]] = {}
    for inter in network.intersections:
        for turn in inter.turns:
            out_edges.setdefault(turn.source, []).append(turn.target)
    for targets in out_edges.values():
        targets.sort()

    start_cost = segment_travel_time(state, network, src, v_floor)
    heap: List[Tuple[float, Tuple[int, ...]]] = [(start_cost, (src,))]
    best: Dict[int, Tuple[float, Tuple[int, ...]]] = {}
    while heap:
        cost, path = heapq.heappop(heap)
        node = path[-1]
        seen = best.get(node)
        if seen is not None and (seen[0], seen[1]) < (cost, path):
            continue
        if node == dst:
            return list(path)
        for nxt in out_edges.get(node, []):
            if nxt in path:
                continue
            ncost = cost + segment_travel_time(state, network, nxt, v_floor)
            cand = (ncost, path + (nxt,))
            seen = best.get(nxt)
            if seen is None or cand < seen:
                best[nxt] = cand
                heapq.heappush(heap, cand)
    return None


def cloud_rtp(state: CloudState, horizon: float, cadence: float
              ) -> Dict[int, float]:
    """Mean-plus-trend density forecast per segment, clamped at zero.

    The history holds one density sample per cadence interval. A least
    squares line through it is evaluated one horizon past the newest
    sample; constant history forecasts itself and linear history
    extrapolates exactly.
    """
    out: Dict[int, float] = {}
    for seg_id in sorted(state.segments):
        history = list(state.segments[seg_id].history)
        if not history:
            raise ValueError(f"segment {seg_id}: empty density history")
        n = len(history)
        if n == 1:
            out[seg_id] = max(0.0, history[0])
            continue
        xs = [i * cadence for i in range(n)]
        x_mean = sum(xs) / n
        y_mean = sum(history) / n
        sxx = sum((x - x_mean) ** 2 for x in xs)
        sxy = sum((x - x_mean) * (y - y_mean)
                  for x, y in zip(xs, history))
        slope = sxy / sxx
        forecast = y_mean + slope * (xs[-1] + horizon - x_mean)
        out[seg_id] = max(0.0, forecast)
    return out


def cloud_aea(incident: Incident, network: RoadNetwork, t: float,
              r_hops: int = 2) -> Tuple[List[int], AtmPayload]:
    """Plan the emergency spread: which segments get the warning, and what.

    Segments are the breadth-first neighborhood of the incident segment
    within r hops of the turn graph. The warning is a braking advisory
    claiming the incident segment for the advisory window.
    """
    frontier = {incident.segment}
    covered = {incident.segment}
    for _ in range(r_hops):
        nxt = set()
        for seg_id in frontier:
            nxt |= set(network.neighbors[seg_id]) - covered
        covered |= nxt
        frontier = nxt
        if not frontier:
            break
    seg = network.segment_by_id[incident.segment]
    off = network.axis_offset(incident.segment)
    footprint = ActionFootprint(
        lane_from=0, lane_to=seg.lane_count - 1,
        s_min=off, s_max=off + seg.length,
        t_start=t, t_end=t + AEA_ADVISORY_WINDOW)
    payload = AtmPayload(action=AtmAction.BRAKE, footprint=footprint,
                         detail=f"incident:{incident.kind}")
    return sorted(covered), payload
