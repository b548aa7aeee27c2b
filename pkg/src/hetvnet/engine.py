"""Discrete-time simulation core.

Each step runs a fixed phase order at simulated time t = k*dt:

  1. deliver radio transmissions that completed since the last step
  2. age out stale beacons, expired claims and expired advisories
  3. fold base-station traffic into the central traffic picture (on its own
     cadence) and plan incident dissemination
  4. per-vehicle decisions in ascending id order: revalidate committed
     maneuvers against newly heard claims, run the action-selection cascade,
     gate intersection crossings
  5. motion: car following, speed governors, instantaneous lane changes one
     step after commitment, segment transitions, spawns and despawns,
     near-miss and collision bookkeeping
  6. message generation and radio service: beacons, announcements,
     infotainment, the sensor data plane, and the slotted subband scheduler

Every random draw flows through one generator in this fixed order, so a
(scenario, seed) pair fully determines the run, including its trace bytes.
"""

from __future__ import annotations

import math
import time
from bisect import bisect_right, bisect_left
from dataclasses import dataclass, field
from heapq import heappush, heappop
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .cloud import SensorStream, UplinkScheduler, VehicularCloud
from .cooperation import (
    CloudState,
    OasDecision,
    acd_check,
    apa_resolve,
    cloud_aea,
    cloud_ingest,
    cloud_rtp,
    oas_select,
)
from .core import (
    Action,
    ActionFootprint,
    AtmAction,
    BehaviorMode,
    InfotainmentPayload,
    Maneuver,
    Message,
    MessageClass,
    PlatoonDescriptor,
    RoadNetwork,
    VehicleId,
    VehicleKind,
    VehicleState,
    parse_behavior_label,
    turning,
    validate_world,
    AVOIDANCE,
    CAR_FOLLOWING,
    EMERGENCY_AVOIDANCE,
    FREE_DRIVING,
    INTERSECTION_QUEUING,
    LANE_CHANGING,
    LANE_KEEPING,
    OVERTAKING_1,
    PLATOONING,
)
from .messaging import NeighborTable, StaticContext, generate_atm, generate_psm
from .metrics import Counters
from .mobility import (
    ACCEL_MIN,
    IdmParams,
    ManeuverPlan,
    OvertakeContext,
    RETRY_BACKOFF,
    adjacent_lane_safe,
    car_following_accel,
    emergency_pullover,
    integrate,
    lane_change_footprint,
    lane_neighbors,
    plan_turn,
    relative_gap,
    stopline_phantom,
    zone_speed_target,
)
from .radio import (
    BASE_STATION,
    SUBBAND_COUNT,
    LinkKind,
    LinkModel,
    SubbandConfig,
    SubbandScheduler,
    assign_subband,
    latency_from_slots,
    link_distance,
)
from . import trace as tr

EPS = 1e-9

# Safety-event thresholds. Entry edges are below the IDM standstill gap so
# a healthy standing queue never counts; exits carry hysteresis margins so
# one event is one record.
NEAR_MISS_GAP = 1.0
NEAR_MISS_TTC = 1.0
NEAR_MISS_CLOSING = 0.5
NEAR_MISS_EXIT_GAP = 1.25
NEAR_MISS_EXIT_TTC = 1.5
CONTACT_EXIT_GAP = 0.25

# How long one emergency announcement's claim stays valid.
EVA_CLAIM_WINDOW = 1.0
EVA_CLAIM_BACK = 30.0
EVA_CLAIM_AHEAD = 150.0

# Give up on an overtake that has not found its return slot in this long.
OVERTAKE_TIMEOUT = 30.0

# Multi-lane approaches align onto the turn lane within this distance.
APPROACH_ALIGN_DISTANCE = 200.0

# Movement intent becomes visible (and arbitrated on) this far from the
# stop line; the defer horizon converts a rival's speed into reach.
INTENT_DISTANCE = 60.0
DEFER_TIME_HORIZON = 2.5
DEFER_SLACK = 2.0

_TURN_RANK = {"straight": 2, "right": 1, "left": 0}

_ELECTIVE_KINDS = (Maneuver.LANE_CHANGING, Maneuver.OVERTAKING,
                   Maneuver.TURNING, Maneuver.PLATOONING)

_ATM_FALLBACK_MODE = {
    AtmAction.CHANGE_LANES: LANE_CHANGING,
    AtmAction.OVERTAKE: OVERTAKING_1,
    AtmAction.BRAKE: AVOIDANCE,
    AtmAction.EMERGENCY_VEHICLE_AVOIDANCE: EMERGENCY_AVOIDANCE,
    AtmAction.OTHER: LANE_KEEPING,
}


class EngineInvariantError(RuntimeError):
    """A world invariant broke mid-run; the simulation is not trustworthy."""


@dataclass(frozen=True)
class Script:
    """A timed scripted condition on one vehicle."""

    vehicle: VehicleId
    start: float
    end: float
    kind: str  # 'emergency_run' | 'malfunction'

    def __post_init__(self) -> None:
        if self.kind not in ("emergency_run", "malfunction"):
            raise ValueError(f"unknown script kind {self.kind!r}")
        if not self.start < self.end:
            raise ValueError("script needs start < end")


@dataclass(frozen=True)
class SpawnEvent:
    t: float
    vehicle: VehicleId
    kind: VehicleKind
    segment: int
    lane: int
    s: float
    speed: float
    desired_speed: float
    length: float = 4.8
    turn_direction: Optional[str] = None


@dataclass
class EngineParams:
    dt: float = 0.1
    duration: float = 60.0
    psm_period: float = 0.1
    coop: bool = True
    idm: IdmParams = field(default_factory=IdmParams)
    subbands: SubbandConfig = field(default_factory=SubbandConfig)
    links: Dict[LinkKind, LinkModel] = field(default_factory=lambda: {
        LinkKind.V2V: LinkModel(LinkKind.V2V),
        LinkKind.V2F: LinkModel(LinkKind.V2F),
        LinkKind.V2B: LinkModel(LinkKind.V2B),
    })
    psm_bytes: int = 100
    atm_bytes: int = 100
    info_bytes: int = 1000
    info_rate_hz: float = 0.0
    uplink_capacity_bps: float = 0.0  # bytes/s; zero disables the data plane
    uplink_ttl: float = 5.0
    cloud_cadence: float = 1.0
    rtp_horizon: float = 5.0
    aea_hops: int = 2
    advisory_speed_factor: float = 0.5
    vc_ttl: float = 10.0
    scripts: Tuple[Script, ...] = ()

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.duration < 0:
            raise ValueError("dt must be positive and duration nonnegative")
        ratio = self.psm_period / self.dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("psm_period must be a positive integer "
                             "multiple of dt")
        slot_ratio = self.dt / self.subbands.slot
        if abs(slot_ratio - round(slot_ratio)) > 1e-9 or round(slot_ratio) < 1:
            raise ValueError("dt must be a positive integer multiple of the "
                             "radio slot")


@dataclass
class VehicleRuntime:
    vid: VehicleId
    kind: VehicleKind
    state: VehicleState
    table: Optional[NeighborTable] = None
    seq: int = 0
    plan: Optional[ManeuverPlan] = None
    plan_executed: bool = False
    crossing: bool = False
    overtake_ctx: Optional[OvertakeContext] = None
    backoff_until: float = -1.0
    turn_direction: Optional[str] = None
    streams: List[SensorStream] = field(default_factory=list)
    info_credit: float = 0.0
    emergency_active: bool = False
    saved_desired: Optional[float] = None
    predecessor: Optional[VehicleId] = None  # platoon-internal leader
    is_platoon_member: bool = False
    alive: bool = True
    spawned_this_step: bool = False

    @property
    def equipped(self) -> bool:
        return self.kind is not VehicleKind.MDV


@dataclass
class World:
    network: RoadNetwork
    runtimes: Dict[VehicleId, VehicleRuntime]
    platoons: Tuple[PlatoonDescriptor, ...] = ()
    spawns: Tuple[SpawnEvent, ...] = ()


@dataclass
class _PendingSend:
    msg: Message
    targets: Tuple[VehicleId, ...]  # in-range vehicles at send time
    to_bs: bool
    subband: int
    bits: int
    atm_label: Optional[str] = None
    light: Optional[Tuple[int, Tuple[int, ...], float]] = None


@dataclass
class RunResult:
    metrics: Dict[str, object]
    counters: Counters
    cloud: CloudState
    vc: VehicularCloud
    uplink: Optional[UplinkScheduler]
    forecast: Dict[int, float]
    final_states: Dict[VehicleId, VehicleState]
    steps: int
    duration: float
    wall_s: float
    records_emitted: int


def _clamp(value: float, lo: float, hi: float) -> float:
    return max(lo, min(hi, value))


class SimulationEngine:
    """Runs one scenario to completion under a single seeded generator."""

    def __init__(self, world: World, params: EngineParams, rng,
                 writer: Optional[tr.TraceWriter] = None,
                 counters: Optional[Counters] = None):
        self.world = world
        self.net = world.network
        self.params = params
        self.rng = rng
        self.writer = writer if writer is not None else tr.TraceWriter()
        self.counters = counters if counters is not None else Counters()

        problems = validate_world(
            self.net, {v: rt.state for v, rt in world.runtimes.items()},
            kinds={v: rt.kind for v, rt in world.runtimes.items()},
            platoons=world.platoons)
        if problems:
            raise EngineInvariantError("; ".join(problems))

        p = params
        self.period_steps = round(p.psm_period / p.dt)
        self.slots_per_step = round(p.dt / p.subbands.slot)
        self.cadence_steps = max(1, round(p.cloud_cadence / p.dt))
        self.scheduler = SubbandScheduler(p.subbands)
        self.ctx = StaticContext(network=self.net)
        self.cloud = CloudState()
        self.vc = VehicularCloud(ttl=p.vc_ttl)
        self.uplink = (UplinkScheduler(capacity_bps=p.uplink_capacity_bps,
                                       ttl=p.uplink_ttl)
                       if p.uplink_capacity_bps > 0 else None)
        self.forecast: Dict[int, float] = {}

        self._inflight: List[tuple] = []  # (due, sender, seq, link, msg, rcvrs)
        self._bs_inbox: List[Message] = []
        self._bs_seq = 0
        self._advisories: Dict[int, Tuple[float, float]] = {}  # seg -> cap,until
        self._disseminated: Set[VehicleId] = set()
        self._contact: Set[Tuple[int, int]] = set()
        self._near: Set[Tuple[int, int]] = set()
        self._pending_spawns = sorted(world.spawns,
                                      key=lambda e: (e.t, e.vehicle))
        self._index: Dict[Tuple[int, int], List[Tuple[float, int]]] = {}
        self._seg_index: Dict[int, List[Tuple[float, int]]] = {}
        self._leader_cache: Dict[int, Tuple[Optional[VehicleState],
                                            Optional[int]]] = {}
        self._records: List[tr.TraceRecord] = []
        self._sends: List[_PendingSend] = []
        self._step_count = 0

        for rt in world.runtimes.values():
            if rt.equipped and rt.table is None:
                rt.table = NeighborTable(owner=rt.vid)
        for desc in world.platoons:
            if not desc.active:
                continue
            chain = (desc.head,) + tuple(desc.followers)
            for prev, cur in zip(chain, chain[1:]):
                member = world.runtimes[cur]
                member.predecessor = prev
                member.is_platoon_member = True
            world.runtimes[desc.head].is_platoon_member = True

    # ------------------------------------------------------------------ run

    def run(self) -> RunResult:
        started = time.perf_counter()
        n_steps = math.ceil(self.params.duration / self.params.dt - EPS)
        road_km = sum(s.length for s in self.net.segments) / 1000.0
        if n_steps > 0 and self.writer.wants(tr.K_META):
            self.writer.push(tr.TraceRecord(
                t=0.0, vehicle=BASE_STATION, kind=tr.K_META,
                data={"duration": self.params.duration, "dt": self.params.dt,
                      "road_km": road_km, "schema": 1}))
        for k in range(n_steps):
            self.step(k)
        self.writer.flush(n_steps * self.params.dt + 1.0)
        self.writer.close()
        wall = time.perf_counter() - started

        if self.uplink is not None:
            self.counters.uplink_offered = self.uplink.offered_bytes
            self.counters.uplink_sent = self.uplink.sent_bytes
            self.counters.uplink_dropped = self.uplink.dropped_bytes
            self.counters.uplink_queued = self.uplink.queued_bytes()
        for band in range(1, SUBBAND_COUNT + 1):
            backlog = self.scheduler.backlog(band)
            if backlog:
                self.counters.subband_backlog[band] = backlog
        metrics = self.counters.finalize(self.params.duration,
                                         road_km=road_km, dt=self.params.dt)
        return RunResult(
            metrics=metrics, counters=self.counters, cloud=self.cloud,
            vc=self.vc, uplink=self.uplink, forecast=dict(self.forecast),
            final_states={v: rt.state
                          for v, rt in sorted(self.world.runtimes.items())
                          if rt.alive},
            steps=n_steps, duration=self.params.duration, wall_s=wall,
            records_emitted=self.writer.emitted)

    # ----------------------------------------------------------------- step

    def step(self, k: int) -> None:
        now = k * self.params.dt
        self._records = []
        self._sends = []

        self._deliver_due(now)
        self._refresh_tables(now)
        if k % self.cadence_steps == 0 and k > 0:
            self._cloud_cycle(now)
        self._apply_scripts(now)
        self._build_index()
        self._decide_all(now)
        self._beacon_all(k, now)
        self._move_all(now)
        self._sensor_plane(now)
        self._serve_radio(now)

        self.writer.extend(self._records)
        self.writer.flush(now)
        self._step_count += 1

    # ------------------------------------------------------------- delivery

    def _deliver_due(self, now: float) -> None:
        # One record per transmission, not per receiver: every receiver of a
        # broadcast shares the same link latency, so the roster form carries
        # the identical delivery population at a fraction of the volume.
        while self._inflight and self._inflight[0][0] <= now + EPS:
            due, sender, seq, link_value, msg, receivers = heappop(
                self._inflight)
            latency = round(due - msg.timestamp, 9)
            t_rec = round(due, 9)
            cls = msg.msg_class.value
            delivered: List[VehicleId] = []
            gone: List[VehicleId] = []
            for vid in receivers:
                if vid == BASE_STATION:
                    self._bs_inbox.append(msg)
                    delivered.append(vid)
                    continue
                rt = self.world.runtimes.get(vid)
                if rt is None or not rt.alive:
                    gone.append(vid)
                    continue
                if sender == BASE_STATION and msg.msg_class is MessageClass.ATM:
                    pass  # advisory notification; caps applied road-side
                elif rt.table is not None:
                    rt.table.ingest([msg], t_rec)
                delivered.append(vid)
            if delivered:
                self.counters.note_delivered(cls, link_value, latency,
                                             times=len(delivered))
                if self.writer.wants(tr.K_DELIVERED):
                    self._records.append(tr.TraceRecord(
                        t=t_rec, vehicle=sender, kind=tr.K_DELIVERED,
                        data={"cls": cls, "sender": sender, "seq": seq,
                              "link": link_value, "latency": latency,
                              "receivers": delivered}))
            if gone:
                self.counters.note_lost(cls, link_value, times=len(gone))
                if self.writer.wants(tr.K_LOST):
                    self._records.append(tr.TraceRecord(
                        t=t_rec, vehicle=sender, kind=tr.K_LOST,
                        data={"cls": cls, "sender": sender, "seq": seq,
                              "link": link_value, "reason": "gone",
                              "receivers": gone}))

    def _refresh_tables(self, now: float) -> None:
        for vid in sorted(self.world.runtimes):
            rt = self.world.runtimes[vid]
            if rt.alive and rt.table is not None:
                rt.table.evict(now, self.params.psm_period)
                rt.table.clear_step_events()
        expired = [seg for seg, (_, until) in self._advisories.items()
                   if until < now]
        for seg in expired:
            del self._advisories[seg]

    # ---------------------------------------------------------------- cloud

    def _cloud_cycle(self, now: float) -> None:
        cloud_ingest(self.cloud, self._bs_inbox, self.net, now)
        self._bs_inbox = []
        if any(traffic.history for traffic in self.cloud.segments.values()):
            self.forecast = cloud_rtp(self.cloud, self.params.rtp_horizon,
                                      self.params.cloud_cadence)
        for incident in self.cloud.incidents:
            if incident.vehicle in self._disseminated:
                continue
            self._disseminated.add(incident.vehicle)
            segments, payload = cloud_aea(incident, self.net, now,
                                          r_hops=self.params.aea_hops)
            for seg_id in segments:
                seg = self.net.segment_by_id[seg_id]
                cap = self.params.advisory_speed_factor * seg.speed_limit
                cur = self._advisories.get(seg_id)
                until = payload.footprint.t_end
                if cur is None or cur[1] < until:
                    self._advisories[seg_id] = (cap, until)
            msg = Message(sender=BASE_STATION, timestamp=now, seq=self._bs_seq,
                          msg_class=MessageClass.ATM, payload=payload)
            self._bs_seq += 1
            covered = set(segments)
            targets = tuple(
                vid for vid in sorted(self.world.runtimes)
                if self.world.runtimes[vid].alive
                and self.world.runtimes[vid].equipped
                and self.world.runtimes[vid].state.segment in covered)
            cfg = self.params.subbands
            completion = now + cfg.grant_rtt + cfg.slot
            bits = self.params.atm_bytes * 8
            self.counters.note_sent(
                cls=MessageClass.ATM.value, subband=assign_subband(
                    MessageClass.ATM), bits=bits, targets=len(targets),
                slots=1, collisions=0, atm_action=payload.action.value)
            if self.writer.wants(tr.K_SENT):
                self._records.append(tr.TraceRecord(
                    t=round(completion, 9), vehicle=BASE_STATION,
                    kind=tr.K_SENT,
                    data={"cls": MessageClass.ATM.value, "subband": 1,
                          "bits": bits, "targets": len(targets), "slots": 1,
                          "collisions": 0, "seq": msg.seq,
                          "action": payload.action.value}))
            if targets:
                link = self.params.links[LinkKind.V2B]
                due = completion + link.base_latency
                heappush(self._inflight, (due, BASE_STATION, msg.seq,
                                          LinkKind.V2B.value, msg, targets))

    def _apply_scripts(self, now: float) -> None:
        for script in self.params.scripts:
            rt = self.world.runtimes.get(script.vehicle)
            if rt is None or not rt.alive:
                continue
            active = script.start <= now < script.end
            if script.kind == "emergency_run":
                if active and not rt.emergency_active:
                    rt.saved_desired = rt.state.desired_speed
                    limit = self.net.segment_by_id[
                        rt.state.segment].speed_limit
                    rt.state = rt.state.with_(desired_speed=limit)
                elif not active and rt.emergency_active:
                    if rt.saved_desired is not None:
                        rt.state = rt.state.with_(
                            desired_speed=rt.saved_desired)
                        rt.saved_desired = None
                rt.emergency_active = active
            elif script.kind == "malfunction":
                if rt.state.malfunction != active:
                    rt.state = rt.state.with_(malfunction=active)

    # ----------------------------------------------------------- world index

    def _build_index(self) -> None:
        self._index = {}
        self._seg_index = {}
        for vid in sorted(self.world.runtimes):
            rt = self.world.runtimes[vid]
            if not rt.alive:
                continue
            st = rt.state
            self._index.setdefault((st.segment, st.lane), []).append(
                (st.s, vid))
            self._seg_index.setdefault(st.segment, []).append((st.s, vid))
        for lst in self._index.values():
            lst.sort()
        for lst in self._seg_index.values():
            lst.sort()

    def _physical_leader(self, rt: VehicleRuntime
                         ) -> Tuple[Optional[VehicleState], Optional[int]]:
        """Nearest vehicle ahead in the ego's lane, projected into its frame."""
        st = rt.state
        seg = self.net.segment_by_id[st.segment]
        lst = self._index.get((st.segment, st.lane), [])
        i = bisect_right(lst, (st.s, rt.vid))
        if i < len(lst):
            s2, vid2 = lst[i]
            return self.world.runtimes[vid2].state, vid2
        if seg.loop and len(lst) > 1:
            s2, vid2 = lst[0]
            lead = self.world.runtimes[vid2].state
            return lead.with_(s=lead.s + seg.length), vid2
        # Cross the intersection: look into the turn target's entry.
        if rt.turn_direction is not None:
            turn_target = self._turn_target(rt)
            if turn_target is not None:
                tgt_seg, tgt_lane = turn_target
                ahead = self._index.get((tgt_seg, tgt_lane), [])
                if ahead:
                    s2, vid2 = ahead[0]
                    lead = self.world.runtimes[vid2].state
                    return lead.with_(segment=st.segment,
                                      s=lead.s + seg.length), vid2
        return None, None

    def _turn_target(self, rt: VehicleRuntime
                     ) -> Optional[Tuple[int, int]]:
        inter = self.net.intersection_of_incoming.get(rt.state.segment)
        if inter is None or rt.turn_direction is None:
            return None
        for turn in inter.turns:
            if (turn.source == rt.state.segment
                    and turn.direction == rt.turn_direction):
                return turn.target, 0
        return None

    def _neighbors_in_range(self, rt: VehicleRuntime, rng_m: float
                            ) -> Tuple[VehicleId, ...]:
        """Equipped, alive vehicles within link range, ascending id."""
        st = rt.state
        seg = self.net.segment_by_id[st.segment]
        found: Set[VehicleId] = set()
        lst = self._seg_index.get(st.segment, [])
        lo = bisect_left(lst, (st.s - rng_m, -10**9))
        hi = bisect_right(lst, (st.s + rng_m, 10**9))
        for s2, vid2 in lst[lo:hi]:
            found.add(vid2)
        if seg.loop:
            wrap = seg.length - rng_m
            if st.s < rng_m or st.s > wrap:
                for s2, vid2 in lst:
                    d = abs(relative_gap(st.s, s2, seg.length))
                    if d <= rng_m:
                        found.add(vid2)
        inter = self.net.intersection_of_incoming.get(st.segment)
        related: Set[int] = set()
        if inter is not None:
            related |= set(inter.incoming)
            related |= {t.target for t in inter.turns}
        for other_inter in self.net.intersections:
            if st.segment in {t.target for t in other_inter.turns}:
                related |= set(other_inter.incoming)
                related |= {t.target for t in other_inter.turns}
        related.discard(st.segment)
        for seg2 in sorted(related):
            for s2, vid2 in self._seg_index.get(seg2, []):
                d = link_distance(self.net, st.segment, st.s, seg2, s2)
                if d <= rng_m:
                    found.add(vid2)
        found.discard(rt.vid)
        return tuple(vid for vid in sorted(found)
                     if self.world.runtimes[vid].equipped)

    # ------------------------------------------------------------- decisions

    def _decide_all(self, now: float) -> None:
        self._leader_cache = {}
        for vid in sorted(self.world.runtimes):
            rt = self.world.runtimes[vid]
            if not rt.alive:
                continue
            leader, leader_vid = self._physical_leader(rt)
            self._leader_cache[vid] = (leader, leader_vid)
            if not rt.equipped:
                rt.state = rt.state.with_(
                    behavior=CAR_FOLLOWING if leader is not None
                    else FREE_DRIVING)
                continue
            self._decide_vehicle(rt, leader, leader_vid, now)

    def _announced_actions(self, rt: VehicleRuntime, now: float
                           ) -> List[Action]:
        out = []
        for ann in rt.table.active_announcements(now):
            mode = None
            if ann.payload.detail:
                mode = parse_behavior_label(ann.payload.detail)
            if mode is None:
                mode = _ATM_FALLBACK_MODE[ann.payload.action]
            out.append(Action(kind=mode, footprint=ann.payload.footprint,
                              issuer=ann.sender))
        return out

    def _decide_vehicle(self, rt: VehicleRuntime,
                        leader: Optional[VehicleState],
                        leader_vid: Optional[int], now: float) -> None:
        p = self.params.idm
        st = rt.state
        seg = self.net.segment_by_id[st.segment]
        ring = seg.length if seg.loop else None
        off = self.net.axis_offset(st.segment)
        dt = self.params.dt

        if rt.overtake_ctx is not None and \
                now - rt.overtake_ctx.started > OVERTAKE_TIMEOUT:
            rt.overtake_ctx = None
            rt.backoff_until = now + RETRY_BACKOFF

        if rt.plan is not None:
            self._advance_plan(rt, now)
            if rt.plan is not None:
                return

        # Emergency vehicles claim the passing lane and announce themselves.
        if rt.emergency_active:
            self._emergency_vehicle_step(rt, now)
            if rt.plan is not None:
                return

        inter = self.net.intersection_of_incoming.get(st.segment)
        if inter is not None and rt.turn_direction is not None:
            if self._turn_gate(rt, inter, now):
                return

        approach = None
        if inter is not None and rt.turn_direction is not None \
                and seg.lane_count > 1:
            dist = seg.length - st.s
            if dist <= APPROACH_ALIGN_DISTANCE:
                approach = (0 if rt.turn_direction == "left"
                            else seg.lane_count - 1
                            if rt.turn_direction == "right" else None)

        no_electives = (not self.params.coop or rt.is_platoon_member
                        or now < rt.backoff_until)
        decision = oas_select(
            rt.vid, st, rt.table, now, p, dt, seg.lane_count, off,
            leader=leader, ring_length=ring, approach_lane=approach,
            overtake_ctx=rt.overtake_ctx, no_electives=no_electives)
        self._apply_decision(rt, decision, leader_vid, now)

    def _apply_decision(self, rt: VehicleRuntime, decision: OasDecision,
                        leader_vid: Optional[int], now: float) -> None:
        action = decision.action
        base_mode = PLATOONING if (rt.is_platoon_member
                                   and rt.predecessor is not None) else None
        if decision.plan is None:
            mode = action.kind
            if rt.overtake_ctx is not None:
                mode = OVERTAKING_1  # passing in progress, between phases
            elif base_mode is not None:
                mode = base_mode
            if mode == AVOIDANCE and rt.state.behavior != AVOIDANCE:
                self._announce_brake(rt, action, now)
            rt.state = rt.state.with_(behavior=mode)
            return

        plan = decision.plan
        if decision.rule == 1:
            # Pull-over: drop-everything semantics, no arbitration gate.
            self._commit_plan(rt, plan, now)
            return
        conflicts = acd_check(plan.action,
                              self._announced_actions(rt, now))
        if conflicts:
            winner, _ = apa_resolve([plan.action] + conflicts)
            if winner is not plan.action:
                rt.backoff_until = now + RETRY_BACKOFF
                mode = base_mode if base_mode is not None else LANE_KEEPING
                rt.state = rt.state.with_(behavior=mode)
                return
        if plan.action.kind == OVERTAKING_1 and leader_vid is not None:
            rt.overtake_ctx = OvertakeContext(
                target_id=leader_vid, original_lane=rt.state.lane,
                passing_lane=plan.target_lane, started=now)
        self._commit_plan(rt, plan, now)

    def _commit_plan(self, rt: VehicleRuntime, plan: ManeuverPlan,
                     now: float) -> None:
        rt.plan = plan
        rt.plan_executed = False
        # The move-out leg of an overtake is a lane change; the passing
        # phase takes over the label once the flip lands.
        mode = LANE_CHANGING if plan.action.kind == OVERTAKING_1 else plan.action.kind
        rt.state = rt.state.with_(behavior=mode)
        detail = plan.atm_detail or plan.action.kind.label()
        msg = generate_atm(rt.vid, plan.atm_tag, plan.footprint, now, rt.seq,
                           detail=detail)
        rt.seq += 1
        self._queue_send(rt, msg, self.params.atm_bytes,
                         atm_label=plan.atm_tag.value)

    def _announce_brake(self, rt: VehicleRuntime, action: Action,
                        now: float) -> None:
        msg = generate_atm(rt.vid, AtmAction.BRAKE, action.footprint, now,
                           rt.seq, detail=action.kind.label())
        rt.seq += 1
        self._queue_send(rt, msg, self.params.atm_bytes,
                         atm_label=AtmAction.BRAKE.value)

    def _advance_plan(self, rt: VehicleRuntime, now: float) -> None:
        """Revalidate, execute, hold or retire the committed plan."""
        plan = rt.plan
        kind = plan.action.kind.kind

        if rt.plan_executed:
            if kind is Maneuver.TURNING:
                self._maybe_release_turn(rt)
            elif plan.hold_until is not None:
                if now > plan.hold_until + EPS:
                    rt.plan = None
                elif (kind is Maneuver.EMERGENCY_AVOIDANCE
                      and plan.target_lane is not None
                      and rt.state.lane == plan.target_lane):
                    self._extend_pullover(rt, now)
            else:
                rt.plan = None
            return

        if now + EPS < plan.phase_deadline:
            return

        conflicts = acd_check(plan.action, self._announced_actions(rt, now))
        if conflicts:
            for other in conflicts:
                self.counters.conflicts_detected += 1
                if self.writer.wants(tr.K_CONFLICT):
                    self._records.append(tr.TraceRecord(
                        t=round(now, 9), vehicle=rt.vid, kind=tr.K_CONFLICT,
                        data={"other": other.issuer,
                              "mine": plan.action.kind.label(),
                              "theirs": other.kind.label()}))
            winner, _ = apa_resolve([plan.action] + conflicts)
            if winner is not plan.action:
                meeting = (plan.action.kind.kind is Maneuver.TURNING
                           and winner.kind.kind is Maneuver.TURNING)
                self.counters.conflicts_resolved += 1
                if meeting:
                    self.counters.meetings_resolved += 1
                if self.writer.wants(tr.K_RESOLVED):
                    self._records.append(tr.TraceRecord(
                        t=round(now, 9), vehicle=rt.vid, kind=tr.K_RESOLVED,
                        data={"winner": winner.issuer,
                              "action": plan.action.kind.label(),
                              "meeting": meeting}))
                self._abort_plan(rt, now)
                return

        if plan.target_lane is not None and kind is not Maneuver.TURNING \
                and plan.target_lane != rt.state.lane \
                and kind is not Maneuver.EMERGENCY_AVOIDANCE:
            seg = self.net.segment_by_id[rt.state.segment]
            ring = seg.length if seg.loop else None
            safe = adjacent_lane_safe(rt.state, plan.target_lane,
                                      rt.table.view(), self.params.idm, ring)
            if not safe:
                self._abort_plan(rt, now)
                return

        rt.plan_executed = True
        if kind is Maneuver.TURNING:
            rt.crossing = True

    def _abort_plan(self, rt: VehicleRuntime, now: float) -> None:
        plan = rt.plan
        kind = plan.action.kind.kind
        rt.plan = None
        rt.plan_executed = False
        if kind is Maneuver.TURNING:
            rt.crossing = False
            rt.state = rt.state.with_(behavior=INTERSECTION_QUEUING)
            return
        if kind is Maneuver.OVERTAKING:
            if plan.action.kind.phase == 1:
                rt.overtake_ctx = None
            rt.backoff_until = now + RETRY_BACKOFF
        elif kind in _ELECTIVE_KINDS:
            rt.backoff_until = now + RETRY_BACKOFF
        rt.state = rt.state.with_(behavior=LANE_KEEPING)

    def _extend_pullover(self, rt: VehicleRuntime, now: float) -> None:
        """Chain another rightward hop while the emergency claim persists."""
        seg = self.net.segment_by_id[rt.state.segment]
        if rt.state.lane >= seg.lane_count - 1 or rt.table is None:
            return
        emergency = rt.table.active_emergency(now)
        if emergency is None:
            return
        ring = seg.length if seg.loop else None
        plan = emergency_pullover(
            rt.vid, rt.state, emergency.payload.footprint, rt.table.view(),
            self.params.idm, now, self.params.dt, seg.lane_count,
            self.net.axis_offset(rt.state.segment),
            is_platoon_follower=rt.is_platoon_member, ring_length=ring)
        if plan.target_lane is not None:
            self._commit_plan(rt, plan, now)

    # -------------------------------------------------------- intersections

    def _turn_gate(self, rt: VehicleRuntime, inter, now: float) -> bool:
        """Commit a crossing when the zone, light, box and claims allow it.

        Returns True when the intersection path owns this vehicle's behavior
        for the step (queued or crossing), False to fall through to the
        normal cascade (still far from the line). The front of each approach
        displays its movement on the way in, so opposing approaches can give
        way by priority before anyone claims the box.
        """
        st = rt.state
        seg = self.net.segment_by_id[st.segment]
        dist = seg.length - st.s
        if dist > INTENT_DISTANCE:
            return False

        target = self._turn_target(rt)
        if target is None:
            rt.turn_direction = None
            return False
        tgt_seg_id, tgt_lane = target

        lst = self._index.get((st.segment, st.lane), [])
        i = bisect_right(lst, (st.s, rt.vid))
        if i < len(lst):
            rt.state = rt.state.with_(behavior=INTERSECTION_QUEUING)
            return True  # queued behind someone nearer the line
        rt.state = rt.state.with_(behavior=turning(rt.turn_direction))
        if dist > inter.zone_length:
            return True
        if not self.ctx.green(inter.id, st.segment, now):
            return True
        if self._priority_rival(rt, inter, now) is not None:
            return True  # a higher-priority movement goes first
        box = inter.zone_length
        for s2, vid2 in self._index.get((tgt_seg_id, tgt_lane), []):
            other = self.world.runtimes[vid2].state
            if s2 - other.length < box + self.params.idm.s0:
                return True  # entry box not physically clear
        plan = plan_turn(rt.vid, st, rt.turn_direction, tgt_lane,
                         self.net.axis_offset(tgt_seg_id), box, now,
                         self.params.dt, inter.speed_cap)
        conflicts = acd_check(plan.action, self._announced_actions(rt, now))
        if conflicts:
            return True  # an active claim holds the box; stay queued
        self._commit_plan(rt, plan, now)
        return True

    def _priority_rival(self, rt: VehicleRuntime, inter,
                        now: float) -> Optional[VehicleId]:
        """Beacon-known front vehicle on another approach that outranks us.

        Any displayed movement on a different incoming segment within its
        own reach of the line counts as contesting the box; straight beats
        right beats left, ties go to the lower id.
        """
        my_key = (_TURN_RANK[rt.turn_direction], -rt.vid)
        incoming = set(inter.incoming)
        for entry in rt.table.view():
            snap = entry.payload
            if snap.segment == rt.state.segment \
                    or snap.segment not in incoming:
                continue
            mode = parse_behavior_label(snap.behavior)
            if mode is None or mode.kind is not Maneuver.TURNING \
                    or mode.turn is None:
                continue
            seg2 = self.net.segment_by_id[snap.segment]
            dist2 = seg2.length - snap.s
            horizon = max(inter.zone_length,
                          DEFER_TIME_HORIZON * max(snap.speed, 2.0))
            if dist2 > horizon + DEFER_SLACK:
                continue
            if (_TURN_RANK[mode.turn], -entry.sender) > my_key:
                return entry.sender
        return None

    def _maybe_release_turn(self, rt: VehicleRuntime) -> None:
        plan = rt.plan
        if rt.state.segment != plan_target_segment(self.net, plan):
            return
        inter_box = self._box_length_of(plan)
        if rt.state.s - rt.state.length > inter_box:
            rt.plan = None
            rt.crossing = False
            rt.turn_direction = None

    def _box_length_of(self, plan: ManeuverPlan) -> float:
        return plan.footprint.s_max - plan.footprint.s_min

    # ----------------------------------------------------- emergency vehicle

    def _emergency_vehicle_step(self, rt: VehicleRuntime, now: float) -> None:
        st = rt.state
        if st.lane > 0 and rt.plan is None:
            seg = self.net.segment_by_id[st.segment]
            ring = seg.length if seg.loop else None
            target = st.lane - 1
            lead, lag = lane_neighbors(st, target, rt.table.view(), ring)
            p = self.params.idm
            open_enough = ((lead is None or lead[1] >= p.s0)
                           and (lag is None or lag[1] >= p.s0))
            if open_enough:
                off = self.net.axis_offset(st.segment)
                fp = lane_change_footprint(st, target, now, off)
                action = Action(kind=EMERGENCY_AVOIDANCE, footprint=fp,
                                issuer=rt.vid)
                plan = ManeuverPlan(action=action, footprint=fp,
                                    phase_deadline=now + self.params.dt,
                                    atm_tag=AtmAction.CHANGE_LANES,
                                    target_lane=target)
                self._commit_plan(rt, plan, now)

    def _emergency_beacon(self, rt: VehicleRuntime, now: float) -> None:
        st = rt.state
        seg = self.net.segment_by_id[st.segment]
        off = self.net.axis_offset(st.segment)
        s_min = off + max(0.0, st.s - EVA_CLAIM_BACK)
        s_max = off + min(seg.length, st.s + EVA_CLAIM_AHEAD)
        if s_max <= s_min:
            s_max = s_min + 1.0
        fp = ActionFootprint(lane_from=0, lane_to=seg.lane_count - 1,
                             s_min=s_min, s_max=s_max, t_start=now,
                             t_end=now + EVA_CLAIM_WINDOW)
        msg = generate_atm(rt.vid, AtmAction.EMERGENCY_VEHICLE_AVOIDANCE,
                           fp, now, rt.seq,
                           detail=EMERGENCY_AVOIDANCE.label())
        rt.seq += 1
        self._queue_send(rt, msg, self.params.atm_bytes,
                         atm_label=AtmAction.EMERGENCY_VEHICLE_AVOIDANCE.value)

    # -------------------------------------------------------------- beacons

    def _beacon_all(self, k: int, now: float) -> None:
        beacon_step = (k % self.period_steps == 0)
        for vid in sorted(self.world.runtimes):
            rt = self.world.runtimes[vid]
            if not rt.alive or not rt.equipped:
                continue
            if beacon_step:
                msg = generate_psm(vid, rt.state, now, rt.seq)
                rt.seq += 1
                self._queue_send(rt, msg, self.params.psm_bytes)
                if rt.emergency_active:
                    self._emergency_beacon(rt, now)
            if self.params.info_rate_hz > 0:
                rt.info_credit += self.params.info_rate_hz * self.params.dt
                while rt.info_credit >= 1.0 - EPS:
                    rt.info_credit -= 1.0
                    msg = Message(sender=vid, timestamp=now, seq=rt.seq,
                                  msg_class=MessageClass.INFOTAINMENT,
                                  payload=InfotainmentPayload(
                                      size=self.params.info_bytes))
                    rt.seq += 1
                    self._queue_send(rt, msg, self.params.info_bytes,
                                     to_vehicles=False)
        self._broadcast_lights(k, now)

    def _broadcast_lights(self, k: int, now: float) -> None:
        if k % self.cadence_steps != 0:
            return
        for idx, inter in enumerate(self.net.intersections):
            if not inter.light_cycle:
                continue
            cycle = sum(p.duration for p in inter.light_cycle)
            into = now % cycle
            green_for: Tuple[int, ...] = ()
            remaining = 0.0
            for phase in inter.light_cycle:
                if into < phase.duration:
                    green_for = tuple(phase.green_for)
                    remaining = phase.duration - into
                    break
                into -= phase.duration
            sender = -(2 + idx)
            msg = Message(sender=sender, timestamp=now, seq=self._bs_seq,
                          msg_class=MessageClass.INFOTAINMENT,
                          payload=InfotainmentPayload(size=200))
            self._bs_seq += 1
            targets: List[VehicleId] = []
            for seg_id in inter.incoming:
                for s2, vid2 in self._seg_index.get(seg_id, []):
                    if self.world.runtimes[vid2].equipped:
                        targets.append(vid2)
            self._sends.append(_PendingSend(
                msg=msg, targets=tuple(sorted(set(targets))), to_bs=False,
                subband=3, bits=200 * 8,
                light=(inter.id, green_for, now + remaining)))

    def _queue_send(self, rt: VehicleRuntime, msg: Message, size_bytes: int,
                    atm_label: Optional[str] = None,
                    to_vehicles: bool = True) -> None:
        v2v = self.params.links[LinkKind.V2V]
        targets: Tuple[VehicleId, ...] = ()
        if to_vehicles:
            targets = self._neighbors_in_range(rt, v2v.range)
        self._sends.append(_PendingSend(
            msg=msg, targets=targets, to_bs=True,
            subband=assign_subband(msg.msg_class), bits=size_bytes * 8,
            atm_label=atm_label))

    # ---------------------------------------------------------------- motion

    def _control_accel(self, rt: VehicleRuntime, now: float) -> float:
        p = self.params.idm
        st = rt.state
        seg = self.net.segment_by_id[st.segment]
        leader, _ = self._leader_cache.get(rt.vid, (None, None))

        if rt.predecessor is not None:
            pred = self.world.runtimes.get(rt.predecessor)
            if pred is not None and pred.alive \
                    and pred.state.segment == st.segment:
                leader = pred.state

        inter = self.net.intersection_of_incoming.get(st.segment)
        hold_at_line = (inter is not None and rt.turn_direction is not None
                        and not rt.crossing)
        if hold_at_line:
            phantom = stopline_phantom(seg.length, st, p)
            if leader is None or leader.s > phantom.s:
                leader = phantom

        a = car_following_accel(st, leader, p)

        dt = self.params.dt
        if st.behavior == AVOIDANCE:
            a = min(a, -p.b_comfort)
        if st.malfunction:
            a = min(a, -1.0 if st.speed > 0 else 0.0)
        if rt.plan is not None and rt.plan.target_speed is not None:
            ts = rt.plan.target_speed
            if ts <= 0.0:
                a = min(a, -p.b_comfort if st.speed > 0 else 0.0)
            else:
                a = min(a, max(ACCEL_MIN, (ts - st.speed) / dt))

        adv = self._advisories.get(st.segment)
        if adv is not None:
            a = min(a, max(-p.b_comfort, (adv[0] - st.speed) / dt))
        if inter is not None and rt.turn_direction is not None:
            dist_to_zone = (seg.length - st.s) - inter.zone_length
            cap = zone_speed_target(st, dist_to_zone, inter.speed_cap, p)
            if cap is not None:
                if dist_to_zone <= 0:
                    a = min(a, max(ACCEL_MIN, (cap - st.speed) / dt))
                else:
                    a = min(a, max(-p.b_comfort, (cap - st.speed) / dt))
        if rt.crossing:
            for other in self.net.intersections:
                if st.segment in {t.target for t in other.turns}:
                    if st.s - st.length <= other.zone_length:
                        a = min(a, max(ACCEL_MIN,
                                       (other.speed_cap - st.speed) / dt))
                    break
        return _clamp(a, ACCEL_MIN, p.a_max)

    def _move_all(self, now: float) -> None:
        p = self.params
        t_next = round(now + p.dt, 9)
        for vid in sorted(self.world.runtimes):
            rt = self.world.runtimes[vid]
            if not rt.alive:
                continue
            accel = self._control_accel(rt, now)
            st = integrate(rt.state, accel, p.dt)

            # Instantaneous lane change at the plan's execution step.
            plan = rt.plan
            if (plan is not None and rt.plan_executed
                    and plan.target_lane is not None
                    and plan.action.kind.kind is not Maneuver.TURNING
                    and st.lane != plan.target_lane):
                st = st.with_(lane=plan.target_lane)
                if plan.action.kind.kind is Maneuver.OVERTAKING \
                        and plan.action.kind.phase == 2:
                    rt.overtake_ctx = None
                    rt.backoff_until = now + RETRY_BACKOFF
                if plan.hold_until is None:
                    rt.plan = None
                    rt.plan_executed = False
            if rt.predecessor is not None:
                pred = self.world.runtimes.get(rt.predecessor)
                if pred is not None and pred.alive \
                        and pred.state.segment == st.segment \
                        and st.lane != pred.state.lane:
                    st = st.with_(lane=pred.state.lane)

            st = self._apply_longitudinal_bounds(rt, st)
            rt.state = st
        self._spawn_due(now)
        self._detect_safety_events(t_next)
        self._emit_states(t_next)
        self._check_invariants()

    def _apply_longitudinal_bounds(self, rt: VehicleRuntime,
                                   st: VehicleState) -> VehicleState:
        seg = self.net.segment_by_id[st.segment]
        if seg.loop:
            if st.s >= seg.length:
                return st.with_(s=st.s % seg.length)
            return st
        if st.s <= seg.length:
            return st
        if rt.crossing:
            target = self._turn_target(rt)
            if target is not None:
                tgt_seg, tgt_lane = target
                return st.with_(segment=tgt_seg, s=st.s - seg.length,
                                lane=tgt_lane)
        inter = self.net.intersection_of_incoming.get(st.segment)
        if inter is not None and rt.turn_direction is not None:
            return st.with_(s=seg.length)  # hold at the line, never overshoot
        # Open road end (or no planned movement): leaves the modeled world.
        rt.alive = False
        return st.with_(s=seg.length)

    def _spawn_due(self, now: float) -> None:
        if not self._pending_spawns:
            return
        remaining = []
        p = self.params.idm
        for event in self._pending_spawns:
            if event.t > now + EPS:
                remaining.append(event)
                continue
            clear = True
            for s2, vid2 in self._index.get((event.segment, event.lane), []):
                other = self.world.runtimes[vid2].state
                rear, front = s2 - other.length, s2
                if rear < event.s + p.s0 and \
                        front > event.s - event.length - p.s0:
                    clear = False
                    break
            if not clear:
                remaining.append(event)
                continue
            state = VehicleState(segment=event.segment, s=event.s,
                                 lane=event.lane, speed=event.speed,
                                 desired_speed=event.desired_speed,
                                 length=event.length)
            rt = VehicleRuntime(vid=event.vehicle, kind=event.kind,
                                state=state,
                                turn_direction=event.turn_direction,
                                spawned_this_step=True)
            if rt.equipped:
                rt.table = NeighborTable(owner=rt.vid)
            self.world.runtimes[event.vehicle] = rt
            self._index.setdefault((event.segment, event.lane), []).append(
                (event.s, event.vehicle))
            self._index[(event.segment, event.lane)].sort()
            self._seg_index.setdefault(event.segment, []).append(
                (event.s, event.vehicle))
            self._seg_index[event.segment].sort()
        self._pending_spawns = remaining

    def _detect_safety_events(self, t_next: float) -> None:
        by_lane: Dict[Tuple[int, int], List[Tuple[float, int]]] = {}
        for vid in sorted(self.world.runtimes):
            rt = self.world.runtimes[vid]
            if rt.alive:
                st = rt.state
                by_lane.setdefault((st.segment, st.lane), []).append(
                    (st.s, vid))
        seen_pairs: Set[Tuple[int, int]] = set()
        for (seg_id, lane), lst in sorted(by_lane.items()):
            lst.sort()
            seg = self.net.segment_by_id[seg_id]
            pairs = list(zip(lst, lst[1:]))
            if seg.loop and len(lst) > 1:
                pairs.append((lst[-1], lst[0]))
            for (s_rear, vid_rear), (s_front, vid_front) in pairs:
                front = self.world.runtimes[vid_front].state
                rear = self.world.runtimes[vid_rear].state
                gap = s_front - front.length - s_rear
                if seg.loop and gap < -seg.length / 2.0:
                    gap += seg.length
                closing = rear.speed - front.speed
                pair = (min(vid_rear, vid_front), max(vid_rear, vid_front))
                seen_pairs.add(pair)
                self._update_pair_events(pair, gap, closing, seg_id, lane,
                                         t_next)
        # Pairs no longer lane-adjacent separated implicitly.
        self._contact &= seen_pairs
        self._near &= seen_pairs

    def _update_pair_events(self, pair: Tuple[int, int], gap: float,
                            closing: float, seg_id: int, lane: int,
                            t_next: float) -> None:
        if gap < 0.0:
            if pair not in self._contact:
                self._contact.add(pair)
                self.counters.collisions += 1
                if self.writer.wants(tr.K_COLLISION):
                    self._records.append(tr.TraceRecord(
                        t=t_next, vehicle=pair[0], kind=tr.K_COLLISION,
                        data={"other": pair[1], "segment": seg_id,
                              "lane": lane, "gap": round(gap, 3)}))
            return
        if pair in self._contact and gap >= CONTACT_EXIT_GAP:
            self._contact.discard(pair)

        ttc = gap / closing if closing > NEAR_MISS_CLOSING else None
        is_near = (gap < NEAR_MISS_GAP
                   or (ttc is not None and ttc < NEAR_MISS_TTC))
        if is_near:
            if pair not in self._near and pair not in self._contact:
                self._near.add(pair)
                self.counters.near_misses += 1
                if self.writer.wants(tr.K_NEAR_MISS):
                    self._records.append(tr.TraceRecord(
                        t=t_next, vehicle=pair[0], kind=tr.K_NEAR_MISS,
                        data={"other": pair[1], "segment": seg_id,
                              "lane": lane, "gap": round(gap, 3),
                              "ttc": round(ttc, 3) if ttc is not None
                              else None,
                              "mode": "gap" if gap < NEAR_MISS_GAP
                              else "ttc"}))
        else:
            if pair in self._near and gap >= NEAR_MISS_EXIT_GAP and (
                    ttc is None or ttc >= NEAR_MISS_EXIT_TTC):
                self._near.discard(pair)

    def _emit_states(self, t_next: float) -> None:
        want = self.writer.wants(tr.K_STATE)
        for vid in sorted(self.world.runtimes):
            rt = self.world.runtimes[vid]
            if not rt.alive and not rt.spawned_this_step:
                continue
            st = rt.state
            speed = round(st.speed, 6)
            self.counters.note_state(speed)
            if want:
                data = {"segment": st.segment, "s": round(st.s, 3),
                        "lane": st.lane, "speed": speed,
                        "accel": round(st.accel, 3),
                        "behavior": st.behavior.label()}
                if st.malfunction:
                    data["malfunction"] = True
                if rt.spawned_this_step:
                    data["spawned"] = True
                if not rt.alive:
                    data["despawned"] = True
                self._records.append(tr.TraceRecord(
                    t=t_next, vehicle=vid, kind=tr.K_STATE, data=data))
            rt.spawned_this_step = False
        dead = [vid for vid, rt in self.world.runtimes.items()
                if not rt.alive]
        for vid in dead:
            rt = self.world.runtimes[vid]
            st = rt.state
            speed = round(st.speed, 6)
            # The exit step still counts: the vehicle drove through it.
            self.counters.note_state(speed)
            if want:
                self._records.append(tr.TraceRecord(
                    t=t_next, vehicle=vid, kind=tr.K_STATE,
                    data={"segment": st.segment, "s": round(st.s, 3),
                          "lane": st.lane, "speed": speed,
                          "accel": round(st.accel, 3),
                          "behavior": st.behavior.label(),
                          "despawned": True}))
            del self.world.runtimes[vid]

    def _check_invariants(self) -> None:
        for vid, rt in self.world.runtimes.items():
            if not rt.alive:
                continue
            st = rt.state
            seg = self.net.segment_by_id.get(st.segment)
            if seg is None:
                raise EngineInvariantError(
                    f"vehicle {vid} on unknown segment {st.segment}")
            if not 0 <= st.lane < seg.lane_count:
                raise EngineInvariantError(
                    f"vehicle {vid} lane {st.lane} out of range")
            if not -EPS <= st.s <= seg.length + EPS:
                raise EngineInvariantError(
                    f"vehicle {vid} position {st.s:.2f} outside segment")
            if st.speed < 0:
                raise EngineInvariantError(f"vehicle {vid} negative speed")

    # ---------------------------------------------------------- sensor plane

    def _sensor_plane(self, now: float) -> None:
        if self.uplink is None:
            return
        t_next = round(now + self.params.dt, 9)
        want_sent = self.writer.wants(tr.K_SENT)
        for vid in sorted(self.world.runtimes):
            rt = self.world.runtimes[vid]
            if not rt.alive or not rt.streams:
                continue
            for stream in rt.streams:
                kept, offered_bytes = stream.emit(now, self.params.dt)
                for sample in kept:
                    if stream.channel.route is not MessageClass.INFOTAINMENT:
                        continue  # control routes ride the beacons
                    self.uplink.offer(sample, t_next)
                    self.counters.note_sent(
                        cls="SensorBulk", subband=0,
                        bits=sample.size_bytes * 8, targets=1, slots=1,
                        collisions=0)
                    if want_sent:
                        self._records.append(tr.TraceRecord(
                            t=t_next, vehicle=vid, kind=tr.K_SENT,
                            data={"cls": "SensorBulk", "subband": 0,
                                  "bits": sample.size_bytes * 8, "targets": 1,
                                  "slots": 1, "collisions": 0,
                                  "seq": -1,
                                  "channel": sample.channel}))
        sent, expired = self.uplink.drain(t_next, self.params.dt)
        for sample in sent:
            latency = round(t_next - sample.t, 9)
            self.vc.add(sample, t_next)
            self.counters.note_delivered("SensorBulk",
                                         LinkKind.V2B.value, latency)
            if self.writer.wants(tr.K_DELIVERED):
                self._records.append(tr.TraceRecord(
                    t=t_next, vehicle=sample.vehicle, kind=tr.K_DELIVERED,
                    data={"cls": "SensorBulk", "sender": sample.vehicle,
                          "seq": -1, "link": LinkKind.V2B.value,
                          "latency": latency, "channel": sample.channel,
                          "bytes": sample.size_bytes,
                          "receivers": [BASE_STATION]}))
        for sample in expired:
            self.counters.note_lost("SensorBulk", LinkKind.V2B.value)
            if self.writer.wants(tr.K_LOST):
                self._records.append(tr.TraceRecord(
                    t=t_next, vehicle=sample.vehicle, kind=tr.K_LOST,
                    data={"cls": "SensorBulk", "sender": sample.vehicle,
                          "seq": -1, "link": LinkKind.V2B.value,
                          "reason": "ttl", "channel": sample.channel,
                          "bytes": sample.size_bytes,
                          "receivers": [BASE_STATION]}))
        self.vc.evict(t_next)

    # ------------------------------------------------------------ radio serve

    def _serve_radio(self, now: float) -> None:
        for pending in self._sends:
            self.scheduler.enqueue(pending.subband, pending.msg.sender,
                                   pending.bits, ref=pending)
        self._sends = []
        served = self.scheduler.run_slots(self.slots_per_step, self.rng)
        cfg = self.params.subbands
        for band, sm in served:
            pending: _PendingSend = sm.item.ref
            msg = pending.msg
            latency = latency_from_slots(cfg, band, sm.slots)
            completion = round(msg.timestamp + latency, 9)
            n_targets = len(pending.targets) + (1 if pending.to_bs else 0)
            self.counters.note_sent(
                cls=msg.msg_class.value, subband=band, bits=pending.bits,
                targets=n_targets, slots=sm.slots,
                collisions=sm.item.collisions, atm_action=pending.atm_label)
            if self.writer.wants(tr.K_SENT):
                data = {"cls": msg.msg_class.value, "subband": band,
                        "bits": pending.bits, "targets": n_targets,
                        "slots": sm.slots, "collisions": sm.item.collisions,
                        "seq": msg.seq}
                if pending.atm_label is not None:
                    data["action"] = pending.atm_label
                self._records.append(tr.TraceRecord(
                    t=completion, vehicle=msg.sender, kind=tr.K_SENT,
                    data=data))
            self._dispatch(pending, completion)

    def _dispatch(self, pending: _PendingSend, completion: float) -> None:
        msg = pending.msg
        link_kind = (LinkKind.V2F if pending.light is not None
                     else LinkKind.V2V)
        if pending.targets:
            link = self.params.links[link_kind]
            survivors: Tuple[VehicleId, ...]
            if link.base_per <= 0.0:
                survivors = pending.targets
            elif link.base_per >= 1.0:
                survivors = ()
                self._record_per_losses(pending.targets, msg, link_kind,
                                        completion)
            else:
                draws = self.rng.random(len(pending.targets))
                alive = []
                dead = []
                for vid, u in zip(pending.targets, draws):
                    (dead if u < link.base_per else alive).append(vid)
                survivors = tuple(alive)
                if dead:
                    self._record_per_losses(tuple(dead), msg, link_kind,
                                            completion)
            if survivors:
                due = completion + link.base_latency
                if pending.light is not None:
                    inter_id, green_for, valid_until = pending.light
                    self.ctx.note_light_report(inter_id, green_for,
                                               valid_until)
                heappush(self._inflight,
                         (due, msg.sender, msg.seq, link_kind.value, msg,
                          survivors))
        if pending.to_bs:
            link = self.params.links[LinkKind.V2B]
            deliver = True
            if link.base_per >= 1.0:
                deliver = False
            elif link.base_per > 0.0:
                deliver = self.rng.random() >= link.base_per
            if deliver:
                due = completion + link.base_latency
                heappush(self._inflight,
                         (due, msg.sender, msg.seq, LinkKind.V2B.value, msg,
                          (BASE_STATION,)))
            else:
                self._record_per_losses((BASE_STATION,), msg, LinkKind.V2B,
                                        completion)

    def _record_per_losses(self, receivers: Tuple[VehicleId, ...],
                           msg: Message, link_kind: LinkKind,
                           completion: float) -> None:
        cls = msg.msg_class.value
        self.counters.note_lost(cls, link_kind.value, times=len(receivers))
        if self.writer.wants(tr.K_LOST):
            self._records.append(tr.TraceRecord(
                t=completion, vehicle=msg.sender, kind=tr.K_LOST,
                data={"cls": cls, "sender": msg.sender, "seq": msg.seq,
                      "link": link_kind.value, "reason": "per",
                      "receivers": list(receivers)}))


def plan_target_segment(network: RoadNetwork, plan: ManeuverPlan
                        ) -> Optional[int]:
    """Recover which segment a turn plan's claim sits on from its axis range."""
    for seg in network.segments:
        off = network.axis_offset(seg.id)
        if off - EPS <= plan.footprint.s_min <= off + seg.length + EPS:
            return seg.id
    return None


def run_simulation(world: World, params: EngineParams, rng,
                   sinks: Sequence = (),
                   kinds: Optional[Sequence[str]] = None) -> RunResult:
    """Convenience wrapper: build a writer, run, and return the result."""
    writer = tr.TraceWriter(sinks=sinks, kinds=kinds)
    engine = SimulationEngine(world, params, rng, writer=writer)
    return engine.run()
