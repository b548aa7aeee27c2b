"""Domain types shared by every part of the simulator.

Roads are one dimensional: a position is (segment id, meters along the
segment axis, integer lane index). Lane indices grow from the passing side
to the curb side, so lane 0 is the leftmost lane and lane_count - 1 is the
rightmost lane (the pull-over target). There is no 2-D geometry.

For conflict footprints, longitudinal coordinates live on a single global
axis: every segment owns a disjoint range of that axis (its offset plus its
length, with a wide separating gap), so footprints on different segments can
never overlap and the conflict test stays a pure three-interval check.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Iterable, Mapping, Optional, Union

VehicleId = int

# Urban intersection zones are capped at 40 km/h.
INTERSECTION_SPEED_CAP = 40.0 / 3.6

# Gap inserted between segment ranges on the global footprint axis. Larger
# than any plausible footprint reach so cross-segment boxes stay disjoint.
SEGMENT_AXIS_GAP = 10_000.0


class VehicleKind(Enum):
    MDV = "Mdv"
    ADV = "Adv"
    PLATOON_HEAD = "PlatoonHead"
    PLATOON_FOLLOWER = "PlatoonFollower"


class Heading(Enum):
    LANE_ALIGNED = "LaneAligned"
    TURNING = "Turning"


class Maneuver(Enum):
    FREE_DRIVING = "FreeDriving"
    CAR_FOLLOWING = "CarFollowing"
    LANE_KEEPING = "LaneKeeping"
    LANE_CHANGING = "LaneChanging"
    OVERTAKING = "Overtaking"
    AVOIDANCE = "Avoidance"
    EMERGENCY_AVOIDANCE = "EmergencyAvoidance"
    PLATOONING = "Platooning"
    INTERSECTION_QUEUING = "IntersectionQueuing"
    TURNING = "Turning"


TURN_DIRECTIONS = ("left", "right", "straight")


@dataclass(frozen=True)
class BehaviorMode:
    """A maneuver tag, parametrized for the two modes that need it.

    Overtaking carries a phase (1 = move to the passing lane, 2 = pass and
    return); Turning carries a direction. All other modes are bare tags.
    """

    kind: Maneuver
    phase: Optional[int] = None
    turn: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind is Maneuver.OVERTAKING:
            if self.phase not in (1, 2):
                raise ValueError("Overtaking phase must be 1 or 2")
        elif self.phase is not None:
            raise ValueError(f"{self.kind.value} takes no phase")
        if self.kind is Maneuver.TURNING:
            if self.turn not in TURN_DIRECTIONS:
                raise ValueError(f"turn must be one of {TURN_DIRECTIONS}")
        elif self.turn is not None:
            raise ValueError(f"{self.kind.value} takes no turn direction")

    def label(self) -> str:
        """Stable human-readable form used in traces, e.g. 'Overtaking(2)'."""
        if self.kind is Maneuver.OVERTAKING:
            return f"Overtaking({self.phase})"
        if self.kind is Maneuver.TURNING:
            return f"Turning({self.turn})"
        return self.kind.value


FREE_DRIVING = BehaviorMode(Maneuver.FREE_DRIVING)
CAR_FOLLOWING = BehaviorMode(Maneuver.CAR_FOLLOWING)
LANE_KEEPING = BehaviorMode(Maneuver.LANE_KEEPING)
LANE_CHANGING = BehaviorMode(Maneuver.LANE_CHANGING)
AVOIDANCE = BehaviorMode(Maneuver.AVOIDANCE)
EMERGENCY_AVOIDANCE = BehaviorMode(Maneuver.EMERGENCY_AVOIDANCE)
PLATOONING = BehaviorMode(Maneuver.PLATOONING)
INTERSECTION_QUEUING = BehaviorMode(Maneuver.INTERSECTION_QUEUING)
OVERTAKING_1 = BehaviorMode(Maneuver.OVERTAKING, phase=1)
OVERTAKING_2 = BehaviorMode(Maneuver.OVERTAKING, phase=2)


def turning(direction: str) -> BehaviorMode:
    return BehaviorMode(Maneuver.TURNING, turn=direction)


def parse_behavior_label(label: str) -> Optional[BehaviorMode]:
    """Inverse of BehaviorMode.label(); None for anything unrecognized.

    Action announcements carry the sender's behavior label so that every
    receiver reconstructs the exact mode (phase and turn direction
    included) and independently computes the same conflict-resolution
    ordering the sender does.
    """
    if label.startswith("Overtaking(") and label.endswith(")"):
        inner = label[len("Overtaking("):-1]
        if inner in ("1", "2"):
            return BehaviorMode(Maneuver.OVERTAKING, phase=int(inner))
        return None
    if label.startswith("Turning(") and label.endswith(")"):
        inner = label[len("Turning("):-1]
        if inner in TURN_DIRECTIONS:
            return BehaviorMode(Maneuver.TURNING, turn=inner)
        return None
    for kind in Maneuver:
        if kind.value == label and kind not in (Maneuver.OVERTAKING,
                                                Maneuver.TURNING):
            return BehaviorMode(kind)
    return None


def action_priority(behavior: BehaviorMode) -> int:
    """Fixed priority ordinal of a maneuver; larger wins.

    Emergency avoidance is the maximum; braking/avoidance outranks every
    normal driving mode; elective maneuvers (lane change, turn, overtake)
    rank below keep-lane modes so they always yield; platoon joining is the
    weakest claim. Turning shares the lane-change tier; right-of-way among
    turns is decided by the meeting rule, not this table.
    """
    kind = behavior.kind
    if kind is Maneuver.EMERGENCY_AVOIDANCE:
        return 6
    if kind is Maneuver.AVOIDANCE:
        return 5
    if kind is Maneuver.CAR_FOLLOWING:
        return 4
    if kind in (Maneuver.FREE_DRIVING, Maneuver.LANE_KEEPING,
                Maneuver.INTERSECTION_QUEUING):
        return 3
    if kind in (Maneuver.LANE_CHANGING, Maneuver.TURNING):
        return 2
    if kind is Maneuver.OVERTAKING:
        return 1
    return 0  # Platooning (join)


@dataclass(frozen=True)
class VehicleState:
    """Kinematics, lane occupancy and behavior of one vehicle.

    `s` is meters from the start of `segment`; the vehicle body occupies
    [s - length, s] in its lane, i.e. `s` is the front bumper.
    """

    segment: int
    s: float
    lane: int
    speed: float
    desired_speed: float
    length: float = 4.8
    heading: Heading = Heading.LANE_ALIGNED
    accel: float = 0.0
    malfunction: bool = False
    behavior: BehaviorMode = FREE_DRIVING

    def __post_init__(self) -> None:
        if self.speed < 0:
            raise ValueError("speed must be >= 0")
        if self.length <= 0:
            raise ValueError("length must be > 0")
        if self.desired_speed <= 0:
            raise ValueError("desired_speed must be > 0")
        if self.lane < 0:
            raise ValueError("lane must be >= 0")

    def with_(self, **changes) -> "VehicleState":
        return replace(self, **changes)


@dataclass(frozen=True)
class PlatoonDescriptor:
    head: VehicleId
    followers: tuple
    active: bool = True

    def __post_init__(self) -> None:
        if self.active and not self.followers:
            raise ValueError("active platoon needs at least one follower")
        if self.head in self.followers:
            raise ValueError("head cannot be its own follower")
        if len(set(self.followers)) != len(self.followers):
            raise ValueError("duplicate follower ids")


@dataclass(frozen=True)
class RoadSegment:
    id: int
    length: float
    lane_count: int
    speed_limit: float
    loop: bool = False  # ring road: positions wrap at length

    def __post_init__(self) -> None:
        if self.length <= 0 or self.lane_count < 1 or self.speed_limit <= 0:
            raise ValueError(f"segment {self.id}: non-positive geometry")


@dataclass(frozen=True)
class Turn:
    source: int
    target: int
    direction: str  # 'left' | 'right' | 'straight'

    def __post_init__(self) -> None:
        if self.direction not in TURN_DIRECTIONS:
            raise ValueError(f"turn direction must be one of {TURN_DIRECTIONS}")


@dataclass(frozen=True)
class LightPhase:
    green_for: tuple  # incoming segment ids with right of way
    duration: float

    def __post_init__(self) -> None:
        if self.duration <= 0:
            raise ValueError("light phase duration must be > 0")


@dataclass(frozen=True)
class Intersection:
    id: int
    incoming: tuple
    turns: tuple  # Turn entries, sources must be in `incoming`
    light_cycle: tuple = ()  # empty means signal-free
    zone_length: float = 15.0  # meters of capped approach/exit around the box
    speed_cap: float = INTERSECTION_SPEED_CAP

    def __post_init__(self) -> None:
        if self.speed_cap > INTERSECTION_SPEED_CAP + 1e-9:
            raise ValueError("intersection speed cap above the 40 km/h urban cap")
        for turn in self.turns:
            if turn.source not in self.incoming:
                raise ValueError(
                    f"intersection {self.id}: turn source {turn.source} "
                    "not an incoming segment")

    def light_state(self, t: float, incoming: int) -> bool:
        """True if `incoming` has green at sim time t; signal-free is green."""
        if not self.light_cycle:
            return True
        cycle = sum(p.duration for p in self.light_cycle)
        into = t % cycle
        for phase in self.light_cycle:
            if into < phase.duration:
                return incoming in phase.green_for
            into -= phase.duration
        return incoming in self.light_cycle[-1].green_for


@dataclass(frozen=True)
class RoadNetwork:
    segments: tuple
    intersections: tuple = ()

    def __post_init__(self) -> None:
        ids = [seg.id for seg in self.segments]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate segment ids")

    @cached_property
    def segment_by_id(self) -> Mapping[int, RoadSegment]:
        return {seg.id: seg for seg in self.segments}

    @cached_property
    def _offsets(self) -> Mapping[int, float]:
        # Disjoint global-axis ranges, assigned in ascending segment id order.
        offsets = {}
        cursor = 0.0
        for seg in sorted(self.segments, key=lambda s: s.id):
            offsets[seg.id] = cursor
            cursor += seg.length + SEGMENT_AXIS_GAP
        return offsets

    def axis_offset(self, segment_id: int) -> float:
        """Global footprint-axis offset of a segment's position 0."""
        return self._offsets[segment_id]

    @cached_property
    def turn_map(self) -> Mapping[tuple, Turn]:
        out = {}
        for inter in self.intersections:
            for turn in inter.turns:
                out[(inter.id, turn.source, turn.target)] = turn
        return out

    @cached_property
    def intersection_of_incoming(self) -> Mapping[int, Intersection]:
        out = {}
        for inter in self.intersections:
            for seg_id in inter.incoming:
                out[seg_id] = inter
        return out

    @cached_property
    def neighbors(self) -> Mapping[int, frozenset]:
        """Undirected segment adjacency induced by turns (for R-hop spread)."""
        adj = {seg.id: set() for seg in self.segments}
        for inter in self.intersections:
            for turn in inter.turns:
                adj[turn.source].add(turn.target)
                adj[turn.target].add(turn.source)
        return {sid: frozenset(peers) for sid, peers in adj.items()}


class MessageClass(Enum):
    PSM = "Psm"
    ATM = "Atm"
    INFOTAINMENT = "Infotainment"


class AtmAction(Enum):
    CHANGE_LANES = "ChangeLanes"
    OVERTAKE = "Overtake"
    BRAKE = "Brake"
    EMERGENCY_VEHICLE_AVOIDANCE = "EmergencyVehicleAvoidance"
    OTHER = "Other"


@dataclass(frozen=True)
class ActionFootprint:
    """Axis-aligned space-time box claimed by a maneuver.

    Lane bounds are inclusive. Longitudinal bounds are on the global segment
    axis (see module docstring). All intervals are treated as closed, so
    boxes that merely touch are in conflict; that is the conservative choice.
    """

    lane_from: int
    lane_to: int
    s_min: float
    s_max: float
    t_start: float
    t_end: float

    def __post_init__(self) -> None:
        if self.lane_from > self.lane_to:
            raise ValueError("lane_from must be <= lane_to")
        if not self.s_min < self.s_max:
            raise ValueError("need s_min < s_max")
        if not self.t_start < self.t_end:
            raise ValueError("need t_start < t_end")


def footprints_conflict(a: ActionFootprint, b: ActionFootprint) -> bool:
    """True iff the lane, longitudinal and time intervals all intersect.

    Symmetric and reflexive; a pure function of the two boxes.
    """
    return (a.lane_from <= b.lane_to and b.lane_from <= a.lane_to
            and a.s_min <= b.s_max and b.s_min <= a.s_max
            and a.t_start <= b.t_end and b.t_start <= a.t_end)


@dataclass(frozen=True)
class Action:
    """A maneuver intent with its space-time claim.

    The priority ordinal is derived from the fixed table, never supplied:
    construction cannot produce an off-table priority.
    """

    kind: BehaviorMode
    footprint: ActionFootprint
    issuer: VehicleId
    priority: int = field(default=-1)

    def __post_init__(self) -> None:
        object.__setattr__(self, "priority", action_priority(self.kind))


@dataclass(frozen=True)
class PsmPayload:
    """State snapshot carried by a periodic state message."""

    segment: int
    s: float
    lane: int
    heading: str
    speed: float
    malfunction: bool
    behavior: str = Maneuver.FREE_DRIVING.value

    @staticmethod
    def of(state: VehicleState) -> "PsmPayload":
        return PsmPayload(segment=state.segment, s=state.s, lane=state.lane,
                          heading=state.heading.value, speed=state.speed,
                          malfunction=state.malfunction,
                          behavior=state.behavior.label())


@dataclass(frozen=True)
class AtmPayload:
    action: AtmAction
    footprint: ActionFootprint
    detail: str = ""


@dataclass(frozen=True)
class InfotainmentPayload:
    size: int  # bytes

    def __post_init__(self) -> None:
        if self.size <= 0:
            raise ValueError("infotainment size must be > 0 bytes")


Payload = Union[PsmPayload, AtmPayload, InfotainmentPayload]

_PAYLOAD_OF_CLASS = {
    MessageClass.PSM: PsmPayload,
    MessageClass.ATM: AtmPayload,
    MessageClass.INFOTAINMENT: InfotainmentPayload,
}


@dataclass(frozen=True)
class Message:
    sender: VehicleId
    timestamp: float
    seq: int
    msg_class: MessageClass
    payload: Payload

    def __post_init__(self) -> None:
        expected = _PAYLOAD_OF_CLASS[self.msg_class]
        if not isinstance(self.payload, expected):
            raise ValueError(
                f"{self.msg_class.value} message needs {expected.__name__}")
        if self.seq < 0:
            raise ValueError("seq must be >= 0")


def validate_world(network: RoadNetwork,
                   vehicles: Mapping[VehicleId, VehicleState],
                   kinds: Optional[Mapping[VehicleId, VehicleKind]] = None,
                   platoons: Iterable[PlatoonDescriptor] = ()) -> list:
    """Collect every static invariant violation; an empty list means ok.

    Violations are returned as data, not raised: callers decide whether a
    broken world is fatal (the CLI treats any entry as a config error).
    """
    violations = []
    for vid in sorted(vehicles):
        state = vehicles[vid]
        seg = network.segment_by_id.get(state.segment)
        if seg is None:
            violations.append(f"vehicle {vid}: unknown segment {state.segment}")
            continue
        if not 0 <= state.lane < seg.lane_count:
            violations.append(
                f"vehicle {vid}: lane {state.lane} outside 0..{seg.lane_count - 1}")
        if not 0 <= state.s <= seg.length:
            violations.append(
                f"vehicle {vid}: position {state.s:.1f} outside segment "
                f"0..{seg.length:.0f}")
        if state.speed > seg.speed_limit + 1e-9:
            violations.append(
                f"vehicle {vid}: speed {state.speed:.1f} above limit "
                f"{seg.speed_limit:.1f}")
        if state.desired_speed > seg.speed_limit + 1e-9:
            violations.append(
                f"vehicle {vid}: desired speed {state.desired_speed:.1f} "
                f"above limit {seg.speed_limit:.1f}")

    # Same-lane body overlap among initial positions.
    by_lane = {}
    for vid in sorted(vehicles):
        state = vehicles[vid]
        by_lane.setdefault((state.segment, state.lane), []).append((state.s, vid))
    for (seg_id, lane), entries in sorted(by_lane.items()):
        entries.sort()
        for (s_rear, vid_rear), (s_front, vid_front) in zip(entries, entries[1:]):
            front_state = vehicles[vid_front]
            if s_front - front_state.length < s_rear:
                violations.append(
                    f"overlap: vehicles {vid_rear} and {vid_front} on segment "
                    f"{seg_id} lane {lane}")

    heads_seen = set()
    followers_seen = set()
    for desc in platoons:
        if desc.head not in vehicles:
            violations.append(f"dangling platoon head {desc.head}")
        heads_seen.add(desc.head)
        for fid in desc.followers:
            if fid not in vehicles:
                violations.append(f"dangling platoon follower {fid}")
            followers_seen.add(fid)
    if kinds:
        for vid in sorted(vehicles):
            kind = kinds.get(vid)
            if kind is VehicleKind.PLATOON_FOLLOWER and vid not in followers_seen:
                violations.append(
                    f"vehicle {vid}: follower kind without a platoon descriptor")
            if kind is VehicleKind.PLATOON_HEAD and vid not in heads_seen:
                violations.append(
                    f"vehicle {vid}: head kind without a platoon descriptor")
    return violations
