"""Action selection cascade, conflict detection/arbitration, cloud functions."""

import itertools
import random

import networkx as nx
import numpy as np
import pytest

from hetvnet.core import (
    Action,
    ActionFootprint,
    AtmAction,
    Intersection,
    Maneuver,
    RoadNetwork,
    RoadSegment,
    Turn,
    VehicleState,
    turning,
)
from hetvnet.cooperation import (
    CloudState,
    Incident,
    acd_check,
    apa_resolve,
    cloud_aea,
    cloud_ingest,
    cloud_opp,
    cloud_rtp,
    oas_select,
    segment_travel_time,
)
from hetvnet.messaging import NeighborTable, generate_atm, generate_psm
from hetvnet.mobility import IdmParams


P = IdmParams()


def veh(s, speed, lane=0, desired=25.0):
    return VehicleState(segment=0, s=s, lane=lane, speed=speed,
                        desired_speed=desired)


def fp(lanes=(0, 0), s=(0.0, 10.0), t=(0.0, 1.0)):
    return ActionFootprint(lane_from=lanes[0], lane_to=lanes[1],
                           s_min=s[0], s_max=s[1], t_start=t[0], t_end=t[1])


def table_with(owner, msgs, t=0.0):
    table = NeighborTable(owner=owner)
    table.ingest(msgs, t)
    return table


def psm_of(vid, state, t=0.0, seq=0):
    return generate_psm(vid, state, t, seq)


class TestOasCascade:
    def kw(self, **over):
        base = dict(t=0.0, p=P, dt=0.1, lane_count=2, axis_offset=0.0)
        base.update(over)
        return base

    def test_rule2_brake_on_minimum_gap(self):
        ego = veh(s=50.0, speed=10.0)
        leader = veh(s=56.0, speed=10.0)  # bumper gap 1.2 < s0
        d = oas_select(9, ego, NeighborTable(owner=9), leader=leader,
                       **self.kw())
        assert d.rule == 2
        assert d.action.kind.kind is Maneuver.AVOIDANCE
        assert d.plan is None

    def test_rule2_brake_on_predicted_close(self):
        ego = veh(s=50.0, speed=16.0)
        leader = veh(s=59.8, speed=10.0)  # gap 5, closes within 1 s
        d = oas_select(9, ego, NeighborTable(owner=9), leader=leader,
                       **self.kw())
        assert d.rule == 2

    def test_rule3_overtake(self):
        ego = veh(s=50.0, speed=20.0, lane=1, desired=30.0)
        leader = veh(s=110.0, speed=10.0, lane=1)
        d = oas_select(9, ego, NeighborTable(owner=9), leader=leader,
                       **self.kw())
        assert d.rule == 3
        assert d.action.kind.kind is Maneuver.OVERTAKING
        assert d.plan.target_lane == 0

    def test_rule4_approach_alignment(self):
        ego = veh(s=50.0, speed=10.0, lane=1)
        d = oas_select(9, ego, NeighborTable(owner=9), approach_lane=0,
                       **self.kw())
        assert d.rule == 4
        assert d.action.kind.kind is Maneuver.LANE_CHANGING
        assert d.plan.target_lane == 0

    def test_rule5_follow(self):
        ego = veh(s=50.0, speed=20.0, desired=21.0)
        leader = veh(s=110.0, speed=20.0)
        d = oas_select(9, ego, NeighborTable(owner=9), leader=leader,
                       **self.kw())
        assert d.rule == 5
        assert d.action.kind.kind is Maneuver.CAR_FOLLOWING

    def test_rule6_free(self):
        ego = veh(s=50.0, speed=20.0)
        d = oas_select(9, ego, NeighborTable(owner=9), **self.kw())
        assert d.rule == 6
        assert d.action.kind.kind is Maneuver.FREE_DRIVING

    def _emergency_table(self, owner):
        claim = fp(lanes=(0, 1), s=(0.0, 200.0), t=(0.0, 10.0))
        msg = generate_atm(1, AtmAction.EMERGENCY_VEHICLE_AVOIDANCE, claim,
                           t=0.0, seq=0)
        return table_with(owner, [msg])

    def test_rule1_emergency_pullover(self):
        ego = veh(s=50.0, speed=20.0, lane=0)
        d = oas_select(9, ego, self._emergency_table(9), **self.kw())
        assert d.rule == 1
        assert d.action.kind.kind is Maneuver.EMERGENCY_AVOIDANCE
        assert d.plan.target_lane == 1  # makes for the curb lane
        assert d.plan.target_speed == 0.0

    def test_rule1_out_of_reach_claim_ignored(self):
        ego = veh(s=50.0, speed=20.0, lane=0)
        claim = fp(lanes=(0, 1), s=(2000.0, 2200.0), t=(0.0, 10.0))
        msg = generate_atm(1, AtmAction.EMERGENCY_VEHICLE_AVOIDANCE, claim,
                           t=0.0, seq=0)
        d = oas_select(9, ego, table_with(9, [msg]), **self.kw())
        assert d.rule == 6

    def test_no_electives_never_steers(self):
        ego = veh(s=50.0, speed=20.0, lane=1, desired=30.0)
        leader = veh(s=110.0, speed=10.0, lane=1)
        d = oas_select(9, ego, NeighborTable(owner=9), leader=leader,
                       no_electives=True, **self.kw())
        assert d.rule == 5  # overtake rule skipped entirely
        d = oas_select(9, ego, self._emergency_table(9), no_electives=True,
                       **self.kw())
        assert d.rule == 1 and d.plan.target_lane is None


class TestAcd:
    def test_intersecting_claims_flagged(self):
        mine = Action(kind=turning("left"), footprint=fp(), issuer=1)
        clash = Action(kind=turning("right"), footprint=fp(s=(5.0, 15.0)),
                       issuer=2)
        clear = Action(kind=turning("right"), footprint=fp(s=(50.0, 60.0)),
                       issuer=3)
        hits = acd_check(mine, [clash, clear])
        assert [a.issuer for a in hits] == [2]

    def test_own_claim_skipped(self):
        mine = Action(kind=turning("left"), footprint=fp(), issuer=1)
        echo = Action(kind=turning("left"), footprint=fp(), issuer=1)
        assert acd_check(mine, [echo]) == []


class TestApa:
    def _turn(self, vid, direction):
        return Action(kind=turning(direction), footprint=fp(), issuer=vid)

    def test_priority_tier_wins(self):
        from hetvnet.core import AVOIDANCE, LANE_CHANGING as LC
        brake = Action(kind=AVOIDANCE, footprint=fp(), issuer=5)
        change = Action(kind=LC, footprint=fp(), issuer=1)
        winner, losers = apa_resolve([change, brake])
        assert winner.issuer == 5
        # The elective loser is demoted to lane keeping.
        assert losers[0][0].issuer == 1
        assert losers[0][1].kind is Maneuver.LANE_KEEPING

    def test_meeting_rule_right_over_left(self):
        left = self._turn(1, "left")
        right = self._turn(2, "right")
        winner, losers = apa_resolve([left, right])
        assert winner.issuer == 2
        straight = self._turn(3, "straight")
        winner, _ = apa_resolve([left, right, straight])
        assert winner.issuer == 3

    def test_tie_breaks_to_lower_id(self):
        winner, _ = apa_resolve([self._turn(7, "right"),
                                 self._turn(2, "right")])
        assert winner.issuer == 2

    def test_safety_losers_keep_their_action(self):
        from hetvnet.core import AVOIDANCE, EMERGENCY_AVOIDANCE
        brake = Action(kind=AVOIDANCE, footprint=fp(), issuer=4)
        pullover = Action(kind=EMERGENCY_AVOIDANCE, footprint=fp(), issuer=9)
        winner, losers = apa_resolve([brake, pullover])
        assert winner.issuer == 9
        assert losers[0][1] is None  # the braking vehicle keeps braking

    def test_permutation_invariance(self):
        from hetvnet.core import AVOIDANCE, LANE_CHANGING as LC
        actions = [self._turn(1, "left"), self._turn(2, "right"),
                   Action(kind=AVOIDANCE, footprint=fp(), issuer=3),
                   Action(kind=LC, footprint=fp(), issuer=4),
                   self._turn(5, "straight")]
        baseline = apa_resolve(actions)
        for perm in itertools.permutations(actions):
            winner, losers = apa_resolve(list(perm))
            assert winner == baseline[0]
            assert sorted((a.issuer, m) for a, m in losers) == \
                sorted((a.issuer, m) for a, m in baseline[1])

    def test_empty_conflicts_rejected(self):
        with pytest.raises(ValueError):
            apa_resolve([])


def grid_network():
    """0 -> {1 short-congested, 2 long-free} -> 3."""
    segs = (RoadSegment(id=0, length=100, lane_count=1, speed_limit=30),
            RoadSegment(id=1, length=1000, lane_count=1, speed_limit=30),
            RoadSegment(id=2, length=1400, lane_count=1, speed_limit=30),
            RoadSegment(id=3, length=100, lane_count=1, speed_limit=30))
    inters = (Intersection(id=0, incoming=(0,),
                           turns=(Turn(0, 1, "straight"), Turn(0, 2, "right"))),
              Intersection(id=1, incoming=(1, 2),
                           turns=(Turn(1, 3, "straight"), Turn(2, 3, "left"))))
    return RoadNetwork(segments=segs, intersections=inters)


def observe(state, seg_id, speed):
    state.traffic(seg_id).mean_speed = speed


class TestCloudIngest:
    def test_latest_beacon_per_sender(self):
        net = RoadNetwork(segments=(
            RoadSegment(id=0, length=1000, lane_count=1, speed_limit=30),))
        state = CloudState()
        msgs = [psm_of(1, veh(s=10.0, speed=10.0), seq=1),
                psm_of(1, veh(s=20.0, speed=20.0), seq=2),
                psm_of(2, veh(s=30.0, speed=30.0), seq=5)]
        cloud_ingest(state, msgs, net, t=1.0)
        traffic = state.traffic(0)
        assert traffic.density == pytest.approx(2.0)  # 2 veh / 1 km
        assert traffic.mean_speed == pytest.approx(25.0)  # (20+30)/2

    def test_unknown_segment_dropped_not_fatal(self):
        net = RoadNetwork(segments=(
            RoadSegment(id=0, length=1000, lane_count=1, speed_limit=30),))
        state = CloudState()
        ghost = generate_psm(1, VehicleState(segment=9, s=1.0, lane=0,
                                             speed=1.0, desired_speed=2.0),
                             0.0, 0)
        cloud_ingest(state, [ghost], net, t=1.0)
        assert state.dropped == 1
        assert state.traffic(0).density == 0.0

    def test_malfunction_becomes_incident_once(self):
        net = RoadNetwork(segments=(
            RoadSegment(id=0, length=1000, lane_count=1, speed_limit=30),))
        state = CloudState()
        broken = veh(s=10.0, speed=0.0).with_(malfunction=True)
        cloud_ingest(state, [psm_of(3, broken, seq=1)], net, t=1.0)
        cloud_ingest(state, [psm_of(3, broken, seq=2)], net, t=2.0)
        assert len(state.incidents) == 1
        assert state.incidents[0].kind == "malfunction"
        assert state.incidents[0].vehicle == 3


class TestTravelTime:
    def test_free_flow_when_unobserved(self):
        net = grid_network()
        state = CloudState()
        assert segment_travel_time(state, net, 1, 1.0) == \
            pytest.approx(1000 / 30)

    def test_observed_speed_wins(self):
        net = grid_network()
        state = CloudState()
        observe(state, 1, 10.0)
        assert segment_travel_time(state, net, 1, 1.0) == pytest.approx(100.0)

    def test_speed_floor(self):
        net = grid_network()
        state = CloudState()
        observe(state, 1, 0.0)
        assert segment_travel_time(state, net, 1, 2.0) == pytest.approx(500.0)


class TestOpp:
    def test_detour_flip_hand_computed(self):
        # Direct route 0-1-3 vs detour 0-2-3. Costs with observed speed v
        # on segment 1: direct = 100/30 + 1000/v + 100/30, detour has
        # 1400/30 in the middle. Flip point: 1000/v = 1400/30, v = 150/7
        # (about 21.43 m/s).
        net = grid_network()
        state = CloudState()
        observe(state, 1, 25.0)
        assert cloud_opp(state, net, 0, 3) == [0, 1, 3]
        observe(state, 1, 15.0)
        assert cloud_opp(state, net, 0, 3) == [0, 2, 3]

    def test_exact_tie_prefers_lexicographic(self):
        # Two parallel middles with identical length and limit cost the
        # same to the bit; the lower-id route must come out.
        segs = (RoadSegment(id=0, length=100, lane_count=1, speed_limit=30),
                RoadSegment(id=1, length=1000, lane_count=1, speed_limit=30),
                RoadSegment(id=2, length=1000, lane_count=1, speed_limit=30),
                RoadSegment(id=3, length=100, lane_count=1, speed_limit=30))
        inters = (Intersection(id=0, incoming=(0,),
                               turns=(Turn(0, 1, "straight"),
                                      Turn(0, 2, "right"))),
                  Intersection(id=1, incoming=(1, 2),
                               turns=(Turn(1, 3, "straight"),
                                      Turn(2, 3, "left"))))
        net = RoadNetwork(segments=segs, intersections=inters)
        assert cloud_opp(CloudState(), net, 0, 3) == [0, 1, 3]

    def test_src_equals_dst(self):
        net = grid_network()
        assert cloud_opp(CloudState(), net, 2, 2) == []

    def test_unreachable_is_none(self):
        net = grid_network()
        assert cloud_opp(CloudState(), net, 3, 0) is None

    def test_unknown_endpoint_raises(self):
        net = grid_network()
        with pytest.raises(KeyError):
            cloud_opp(CloudState(), net, 0, 99)

    def test_random_graphs_match_networkx(self):
        rnd = random.Random(2024)
        for trial in range(30):
            n = rnd.randint(2, 12)
            segs = tuple(RoadSegment(id=i, length=rnd.randint(2, 20) * 100.0,
                                     lane_count=1, speed_limit=30)
                         for i in range(n))
            edges = set()
            for _ in range(rnd.randint(1, 3 * n)):
                a, b = rnd.randrange(n), rnd.randrange(n)
                if a != b:
                    edges.add((a, b))
            inters = tuple(
                Intersection(id=k, incoming=(a,),
                             turns=(Turn(a, b, "straight"),))
                for k, (a, b) in enumerate(sorted(edges)))
            net = RoadNetwork(segments=segs, intersections=inters)
            state = CloudState()
            speeds = {}
            for seg in segs:
                if rnd.random() < 0.5:
                    speeds[seg.id] = rnd.uniform(2.0, 30.0)
                    observe(state, seg.id, speeds[seg.id])

            def cost(seg_id):
                return segment_travel_time(state, net, seg_id, 1.0)

            g = nx.DiGraph()
            g.add_nodes_from(range(n))
            for a, b in edges:
                g.add_edge(a, b, w=cost(b))
            src, dst = rnd.randrange(n), rnd.randrange(n)
            got = cloud_opp(state, net, src, dst)
            if src == dst:
                assert got == []
                continue
            try:
                want_cost = nx.dijkstra_path_length(g, src, dst, weight="w") \
                    + cost(src)
            except nx.NetworkXNoPath:
                assert got is None, trial
                continue
            assert got is not None, trial
            got_cost = sum(cost(seg_id) for seg_id in got)
            assert got_cost == pytest.approx(want_cost), trial
            assert got[0] == src and got[-1] == dst
            for a, b in zip(got, got[1:]):
                assert (a, b) in edges


class TestRtp:
    def test_linear_history_extrapolates_exactly(self):
        state = CloudState()
        traffic = state.traffic(0)
        for d in [2.0, 4.0, 6.0, 8.0]:
            traffic.history.append(d)
        out = cloud_rtp(state, horizon=2.0, cadence=1.0)
        # Least squares on a perfect line continues it: value 8 at x=3,
        # slope 2 per second, so x=5 gives 12. Cross-checked via polyfit.
        xs = np.arange(4.0)
        coef = np.polyfit(xs, [2.0, 4.0, 6.0, 8.0], 1)
        assert out[0] == pytest.approx(float(np.polyval(coef, 5.0)))
        assert out[0] == pytest.approx(12.0)

    def test_constant_history_forecasts_itself(self):
        state = CloudState()
        traffic = state.traffic(0)
        for _ in range(5):
            traffic.history.append(7.5)
        out = cloud_rtp(state, horizon=10.0, cadence=1.0)
        assert out[0] == pytest.approx(7.5)

    def test_clamped_at_zero(self):
        state = CloudState()
        traffic = state.traffic(0)
        for d in [6.0, 4.0, 2.0]:
            traffic.history.append(d)
        out = cloud_rtp(state, horizon=10.0, cadence=1.0)
        assert out[0] == 0.0

    def test_single_sample(self):
        state = CloudState()
        state.traffic(0).history.append(3.0)
        assert cloud_rtp(state, horizon=5.0, cadence=1.0)[0] == 3.0

    def test_empty_history_rejected(self):
        state = CloudState()
        state.traffic(0)
        with pytest.raises(ValueError):
            cloud_rtp(state, horizon=5.0, cadence=1.0)


class TestAea:
    def _chain(self, n):
        segs = tuple(RoadSegment(id=i, length=500, lane_count=2,
                                 speed_limit=30) for i in range(n))
        inters = tuple(Intersection(id=i, incoming=(i,),
                                    turns=(Turn(i, i + 1, "straight"),))
                       for i in range(n - 1))
        return RoadNetwork(segments=segs, intersections=inters)

    def test_two_hop_spread_on_chain(self):
        net = self._chain(6)
        incident = Incident(segment=2, vehicle=7, t=5.0, kind="malfunction")
        covered, payload = cloud_aea(incident, net, t=5.0, r_hops=2)
        assert covered == [0, 1, 2, 3, 4]  # radius 2 around segment 2
        assert payload.action is AtmAction.BRAKE
        assert "malfunction" in payload.detail

    def test_zero_hops_is_incident_segment_only(self):
        net = self._chain(4)
        incident = Incident(segment=1, vehicle=7, t=0.0, kind="emergency")
        covered, _ = cloud_aea(incident, net, t=0.0, r_hops=0)
        assert covered == [1]

    def test_claim_covers_incident_segment_whole(self):
        net = self._chain(3)
        incident = Incident(segment=1, vehicle=7, t=5.0, kind="emergency")
        _, payload = cloud_aea(incident, net, t=5.0, r_hops=1)
        box = payload.footprint
        assert box.s_max - box.s_min == pytest.approx(500.0)
        assert box.lane_from == 0 and box.lane_to == 1
        assert box.t_start == 5.0 and box.t_end > 5.0
