"""Longitudinal and lane dynamics: car following, two-phase overtaking,
emergency pull-over, and intersection right-of-way.

Car following is the Intelligent Driver Model. Lane changes are gap-checked
against the message-built neighbor view and executed instantaneously one
step after they are committed and announced; there is no lateral continuum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from .core import (
    Action,
    ActionFootprint,
    AtmAction,
    BehaviorMode,
    Maneuver,
    VehicleId,
    VehicleState,
    CAR_FOLLOWING,
    EMERGENCY_AVOIDANCE,
    OVERTAKING_1,
    OVERTAKING_2,
)

# Hard deceleration floor: emergency braking cap in m/s^2.
ACCEL_MIN = -8.0

# A leader must be at least this much slower than the ego's desired speed
# before an overtake is considered; prevents trigger oscillation.
OVERTAKE_HYSTERESIS = 2.0

# A slow leader only warrants passing once it is close enough to bind the
# ego's progress: within this many seconds of travel (floored so a crawl
# behind a stopped vehicle still qualifies).
OVERTAKE_ENGAGE_TIME = 6.0
OVERTAKE_ENGAGE_FLOOR = 30.0

# After a failed or lost maneuver attempt, wait this long before retrying.
RETRY_BACKOFF = 2.0

# Beacons carry no body length, so gap math over the neighbor view assumes
# a nominal one.
ASSUMED_NEIGHBOR_LENGTH = 5.0

# Space-time claim sizing for maneuver footprints and occupancy strips.
# Claims are deliberately tight around the landing slot: kinematic spacing
# is the gap-acceptance test's job, conflict detection guards the slot
# itself, so long reaches would only manufacture false conflicts with
# vehicles that are safely clear.
CLAIM_WINDOW = 3.0  # seconds a maneuver claim stays asserted
STRIP_MARGIN = 2.0  # standstill margin around a vehicle body, m
STRIP_HORIZON = 0.5  # seconds of forward travel covered by a claim/strip


@dataclass(frozen=True)
class IdmParams:
    """Intelligent Driver Model parameters.

    a_max: maximum acceleration, m/s^2
    b_comfort: comfortable deceleration, m/s^2
    s0: standstill minimum gap, m
    T_headway: desired time headway, s
    delta: free-flow acceleration exponent
    """

    a_max: float = 1.5
    b_comfort: float = 2.0
    s0: float = 2.0
    T_headway: float = 1.5
    delta: float = 4.0

    def __post_init__(self) -> None:
        for name in ("a_max", "b_comfort", "s0", "T_headway", "delta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")


def desired_gap(p: IdmParams, speed: float, closing: float) -> float:
    """Dynamic desired gap s* = s0 + v*T + v*dv / (2*sqrt(a_max*b_comfort)).

    closing is ego speed minus leader speed (positive when approaching).
    """
    return (p.s0 + speed * p.T_headway
            + speed * closing / (2.0 * math.sqrt(p.a_max * p.b_comfort)))


def car_following_accel(ego: VehicleState, leader: Optional[VehicleState],
                        p: IdmParams) -> float:
    """IDM acceleration toward the desired speed, braking for the leader.

    Args:
        ego: the following vehicle.
        leader: the vehicle ahead in the same lane, or None on a free road.
            Callers project leaders from a neighboring segment into the
            ego's frame before calling.
        p: model parameters.

    Returns:
        Acceleration clamped to [-8, a_max] m/s^2. A non-positive bumper gap
        returns the full braking floor; it is the caller's collision
        condition, not a numeric fault.
    """
    v = ego.speed
    free = 1.0 - (v / ego.desired_speed) ** p.delta
    if leader is None:
        raw = p.a_max * free
    else:
        gap = leader.s - leader.length - ego.s
        if gap <= 0.0:
            return ACCEL_MIN
        want = desired_gap(p, v, v - leader.speed)
        raw = p.a_max * (free - (want / gap) ** 2)
    return max(ACCEL_MIN, min(p.a_max, raw))


def integrate(ego: VehicleState, accel: float, dt: float) -> VehicleState:
    """Semi-implicit Euler step: update speed first, then position.

    Speed is floored at zero (no reversing). Lane is untouched; lane changes
    are applied by the engine when a plan's phase deadline passes.
    """
    v_next = max(0.0, ego.speed + accel * dt)
    return ego.with_(s=ego.s + v_next * dt, speed=v_next, accel=accel)


def relative_gap(ego_s: float, other_s: float,
                 ring_length: Optional[float]) -> float:
    """Signed front-bumper separation, wrapped onto a ring when present."""
    rel = other_s - ego_s
    if ring_length:
        rel = (rel + ring_length / 2.0) % ring_length - ring_length / 2.0
    return rel


def lane_neighbors(ego: VehicleState, lane: int, view: Sequence,
                   ring_length: Optional[float] = None):
    """Nearest beacon-known lead and lag vehicles in a lane.

    view entries carry a PSM snapshot in `payload`. Returns
    ((lead_entry, lead_gap), (lag_entry, lag_gap)) with bumper-to-bumper
    gaps; absent sides are None. Body length of neighbors is the assumed
    nominal since beacons do not carry it.
    """
    lead = None
    lead_rel = math.inf
    lag = None
    lag_rel = -math.inf
    for entry in view:
        snap = entry.payload
        if snap.segment != ego.segment or snap.lane != lane:
            continue
        rel = relative_gap(ego.s, snap.s, ring_length)
        if 0.0 <= rel < lead_rel:
            lead, lead_rel = entry, rel
        elif lag_rel < rel < 0.0:
            lag, lag_rel = entry, rel
    lead_out = None
    if lead is not None:
        lead_out = (lead, lead_rel - ASSUMED_NEIGHBOR_LENGTH)
    lag_out = None
    if lag is not None:
        lag_out = (lag, -lag_rel - ego.length)
    return lead_out, lag_out


def adjacent_lane_safe(ego: VehicleState, target_lane: int, view: Sequence,
                       p: IdmParams,
                       ring_length: Optional[float] = None) -> bool:
    """Gap acceptance for a lane change into target_lane.

    The slot is safe when the lead gap covers the ego's dynamic desired gap
    and the lag gap covers the follower's. Unknown sides count as open:
    this is a view-based check, and an empty view means nothing is known to
    object (the cooperative safety net lives in conflict detection, driven
    by the same messages).
    """
    lead, lag = lane_neighbors(ego, target_lane, view, ring_length)
    if lead is not None:
        entry, gap = lead
        if gap < desired_gap(p, ego.speed, ego.speed - entry.payload.speed):
            return False
    if lag is not None:
        entry, gap = lag
        follower_v = entry.payload.speed
        if gap < desired_gap(p, follower_v, follower_v - ego.speed):
            return False
    return True


def lane_change_footprint(ego: VehicleState, target_lane: int, t: float,
                          axis_offset: float) -> ActionFootprint:
    """Space-time box claimed by a lane change: the landing slot only.

    The claim lives in the target lane around the ego's longitudinal
    position; the departure lane is already protected by the ego's own
    occupancy strip.
    """
    reach = max(6.0, STRIP_MARGIN + STRIP_HORIZON * ego.speed)
    back = ego.length + STRIP_MARGIN
    return ActionFootprint(lane_from=target_lane, lane_to=target_lane,
                           s_min=axis_offset + ego.s - back,
                           s_max=axis_offset + ego.s + reach,
                           t_start=t, t_end=t + CLAIM_WINDOW)


def occupancy_strip(lane: int, s: float, speed: float, t: float,
                    axis_offset: float,
                    length: float = ASSUMED_NEIGHBOR_LENGTH) -> ActionFootprint:
    """Where a beacon says a vehicle's body is and will shortly be.

    Used as the message-inferred claim of vehicles that announced nothing.
    """
    return ActionFootprint(
        lane_from=lane, lane_to=lane,
        s_min=axis_offset + s - length - STRIP_MARGIN,
        s_max=axis_offset + s + STRIP_MARGIN + STRIP_HORIZON * speed,
        t_start=t, t_end=t + CLAIM_WINDOW)


@dataclass(frozen=True)
class ManeuverPlan:
    """A committed maneuver: what to announce, what to execute, and when.

    The footprint duplicates the action's claim for direct access. Optional
    fields drive execution: target_lane (instantaneous change at the phase
    deadline), target_speed (speed ceiling while the plan holds), and
    hold_until (plans that persist past their deadline, e.g. pull-overs).
    """

    action: Action
    footprint: ActionFootprint
    phase_deadline: float
    atm_tag: AtmAction
    target_lane: Optional[int] = None
    target_speed: Optional[float] = None
    hold_until: Optional[float] = None
    atm_detail: str = ""

    def __post_init__(self) -> None:
        if self.footprint is not self.action.footprint:
            raise ValueError("plan footprint must be the action's footprint")


@dataclass
class OvertakeContext:
    """Engine-side memory of an overtake in progress."""

    target_id: VehicleId
    original_lane: int
    passing_lane: int
    phase: int = 1
    started: float = 0.0  # commit time, for stall abandonment


def passing_lane_of(lane: int) -> Optional[int]:
    """The adjacent passing lane (one to the left), if it exists."""
    return lane - 1 if lane >= 1 else None


def plan_overtake(ego_id: VehicleId, ego: VehicleState,
                  leader: Optional[VehicleState], view: Sequence,
                  p: IdmParams, t: float, dt: float, lane_count: int,
                  axis_offset: float,
                  ring_length: Optional[float] = None,
                  ctx: Optional[OvertakeContext] = None
                  ) -> Optional[ManeuverPlan]:
    """Two-phase overtaking: move out behind a slow leader, pass, move back.

    Phase 1 fires only when the sensed leader is slower than the ego's
    desired speed by the hysteresis margin and the passing-lane slot passes
    gap acceptance; otherwise no plan is returned and the caller schedules
    the retry backoff. With an active context, this produces the return
    plan once the ego leads the overtaken vehicle by a safe headway plus
    its own body length.
    """
    if ctx is None:
        if leader is None:
            return None
        if leader.speed >= ego.desired_speed - OVERTAKE_HYSTERESIS:
            return None
        engage = max(ego.speed * OVERTAKE_ENGAGE_TIME, OVERTAKE_ENGAGE_FLOOR)
        if leader.s - leader.length - ego.s > engage:
            return None
        target = passing_lane_of(ego.lane)
        if target is None or target >= lane_count:
            return None
        if not adjacent_lane_safe(ego, target, view, p, ring_length):
            return None
        fp = lane_change_footprint(ego, target, t, axis_offset)
        action = Action(kind=OVERTAKING_1, footprint=fp, issuer=ego_id)
        return ManeuverPlan(action=action, footprint=fp,
                            phase_deadline=t + dt, atm_tag=AtmAction.OVERTAKE,
                            target_lane=target)

    # Phase 2: return once clear of the overtaken vehicle.
    cleared = True
    for entry in view:
        if entry.sender != ctx.target_id:
            continue
        snap = entry.payload
        if snap.segment != ego.segment:
            break
        rel = relative_gap(ego.s, snap.s, ring_length)
        lead_by = -rel  # how far the ego's front is past the target's front
        needed = p.s0 + snap.speed * p.T_headway + ego.length
        cleared = lead_by >= needed
        break
    if not cleared:
        return None
    if not adjacent_lane_safe(ego, ctx.original_lane, view, p, ring_length):
        return None
    fp = lane_change_footprint(ego, ctx.original_lane, t, axis_offset)
    action = Action(kind=OVERTAKING_2, footprint=fp, issuer=ego_id)
    return ManeuverPlan(action=action, footprint=fp, phase_deadline=t + dt,
                        atm_tag=AtmAction.CHANGE_LANES,
                        target_lane=ctx.original_lane)


def plan_lane_change(ego_id: VehicleId, ego: VehicleState, target_lane: int,
                     view: Sequence, p: IdmParams, t: float, dt: float,
                     axis_offset: float,
                     ring_length: Optional[float] = None,
                     tag: AtmAction = AtmAction.CHANGE_LANES
                     ) -> Optional[ManeuverPlan]:
    """Single gap-checked lane change (e.g. approach-lane alignment)."""
    if target_lane == ego.lane:
        return None
    if not adjacent_lane_safe(ego, target_lane, view, p, ring_length):
        return None
    fp = lane_change_footprint(ego, target_lane, t, axis_offset)
    kind = BehaviorMode(Maneuver.LANE_CHANGING)
    action = Action(kind=kind, footprint=fp, issuer=ego_id)
    return ManeuverPlan(action=action, footprint=fp, phase_deadline=t + dt,
                        atm_tag=tag, target_lane=target_lane)


def emergency_pullover(ego_id: VehicleId, ego: VehicleState,
                       emergency_footprint: ActionFootprint,
                       view: Sequence, p: IdmParams, t: float, dt: float,
                       lane_count: int, axis_offset: float,
                       is_platoon_follower: bool = False,
                       ring_length: Optional[float] = None) -> ManeuverPlan:
    """React to an emergency claim: slow down and make for the curb lane.

    Moves one lane rightward per plan until the rightmost lane is reached;
    already-rightmost vehicles only decelerate. Platoon followers never
    steer themselves (the head owns lateral motion), so their plan is
    longitudinal only. The plan holds until the emergency claim expires.
    """
    rightmost = lane_count - 1
    target: Optional[int] = None
    if not is_platoon_follower and ego.lane < rightmost:
        step_lane = ego.lane + 1
        lead, lag = lane_neighbors(ego, step_lane, view, ring_length)
        # Minimal physical slot only: priority clears the way, bodies do not.
        open_enough = ((lead is None or lead[1] >= p.s0)
                       and (lag is None or lag[1] >= p.s0))
        if open_enough:
            target = step_lane
    fp = lane_change_footprint(
        ego, target if target is not None else ego.lane, t, axis_offset)
    action = Action(kind=EMERGENCY_AVOIDANCE, footprint=fp, issuer=ego_id)
    return ManeuverPlan(action=action, footprint=fp, phase_deadline=t + dt,
                        atm_tag=AtmAction.CHANGE_LANES, target_lane=target,
                        target_speed=0.0,
                        hold_until=emergency_footprint.t_end)


def meeting_priority(a: Action, b: Action) -> VehicleId:
    """Right-of-way between two turns into the same slot.

    Straight beats both turns, right beats left, and equal classes fall
    back to the lower vehicle id.
    """
    rank = {"straight": 2, "right": 1, "left": 0}
    ra = rank[a.kind.turn]
    rb = rank[b.kind.turn]
    if ra != rb:
        return a.issuer if ra > rb else b.issuer
    return min(a.issuer, b.issuer)


def turn_footprint(target_lane: int, axis_offset: float, box_length: float,
                   t: float, crossing_time: float) -> ActionFootprint:
    """Claim on the outgoing segment's entry box for one turning movement."""
    return ActionFootprint(lane_from=target_lane, lane_to=target_lane,
                           s_min=axis_offset, s_max=axis_offset + box_length,
                           t_start=t, t_end=t + crossing_time)


def plan_turn(ego_id: VehicleId, ego: VehicleState, direction: str,
              target_lane: int, target_axis_offset: float, box_length: float,
              t: float, dt: float, speed_cap: float) -> ManeuverPlan:
    """Commit to crossing the intersection into the target lane."""
    pace = max(min(ego.speed, speed_cap), 2.0)
    crossing_time = box_length / pace + 2.0
    fp = turn_footprint(target_lane, target_axis_offset, box_length, t,
                        crossing_time)
    action = Action(kind=BehaviorMode(Maneuver.TURNING, turn=direction),
                    footprint=fp, issuer=ego_id)
    return ManeuverPlan(action=action, footprint=fp, phase_deadline=t + dt,
                        atm_tag=AtmAction.OTHER, target_lane=target_lane)


def stopline_phantom(segment_length: float, ego: VehicleState,
                     p: IdmParams) -> VehicleState:
    """A standing virtual leader that makes IDM settle at the stop line."""
    eps = 0.01
    return VehicleState(segment=ego.segment, s=segment_length + p.s0 + eps,
                        lane=ego.lane, speed=0.0, desired_speed=eps,
                        length=eps)


def zone_speed_target(ego: VehicleState, dist_to_zone: float,
                      speed_cap: float, p: IdmParams) -> Optional[float]:
    """Speed ceiling while inside or braking-distance-close to a capped zone.

    Uses a comfortable-deceleration envelope with margin so a vehicle never
    enters the zone above the cap.
    """
    if ego.speed <= speed_cap and dist_to_zone > 0:
        return None
    if dist_to_zone <= 0:
        return speed_cap
    envelope = (ego.speed ** 2 - speed_cap ** 2) / (2.0 * (p.b_comfort * 0.7))
    if dist_to_zone <= envelope + ego.speed * 1.0:
        return speed_cap
    return None
