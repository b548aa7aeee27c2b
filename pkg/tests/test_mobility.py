"""Longitudinal model, integration, gap acceptance and maneuver planning."""

import math

import pytest

from hetvnet.core import AtmAction, Maneuver, VehicleState
from hetvnet.mobility import (
    ACCEL_MIN,
    IdmParams,
    OVERTAKE_ENGAGE_FLOOR,
    OvertakeContext,
    adjacent_lane_safe,
    car_following_accel,
    desired_gap,
    integrate,
    lane_neighbors,
    meeting_priority,
    passing_lane_of,
    plan_lane_change,
    plan_overtake,
    relative_gap,
    zone_speed_target,
)
from hetvnet.messaging import NeighborEntry
from hetvnet.core import Action, ActionFootprint, turning


P = IdmParams()


def veh(s, speed, lane=0, desired=25.0, length=4.8, segment=0):
    return VehicleState(segment=segment, s=s, lane=lane, speed=speed,
                        desired_speed=desired, length=length)


def entry(vid, s, speed, lane=0, segment=0, behavior="FreeDriving"):
    from hetvnet.core import PsmPayload
    payload = PsmPayload(segment=segment, s=s, lane=lane,
                         heading="lane", speed=speed, malfunction=False,
                         behavior=behavior)
    return NeighborEntry(sender=vid, payload=payload, seq=0, received_at=0.0)


class TestIdm:
    def test_desired_gap_frozen(self):
        # s* = 2 + 10*1.5 + 10*2/(2*sqrt(1.5*2)) computed by hand.
        assert desired_gap(P, 10.0, 2.0) == pytest.approx(
            22.773502691896258, abs=1e-12)

    def test_following_accel_frozen(self):
        # ego front bumper 30, leader front bumper 80 with length 4.8
        # -> gap 45.2; v=20 toward 25, closing 5:
        # s* = 60.86751345948129, a = 1.5*(1 - (20/25)^4 - (s*/45.2)^2)
        ego = veh(s=30.0, speed=20.0)
        leader = veh(s=80.0, speed=15.0)
        a = car_following_accel(ego, leader, P)
        assert a == pytest.approx(-1.8345040078070933, abs=1e-12)

    def test_free_road_accel_frozen(self):
        # a = 1.5*(1 - (20/25)^4) = 0.8856
        a = car_following_accel(veh(s=0.0, speed=20.0), None, P)
        assert a == pytest.approx(0.8856, abs=1e-12)

    def test_at_desired_speed_no_accel(self):
        a = car_following_accel(veh(s=0.0, speed=25.0, desired=25.0), None, P)
        assert a == pytest.approx(0.0, abs=1e-12)

    def test_nonpositive_gap_is_full_brake(self):
        ego = veh(s=30.0, speed=20.0)
        leader = veh(s=34.0, speed=20.0)  # rear bumper 29.2 < ego front
        assert car_following_accel(ego, leader, P) == ACCEL_MIN

    def test_clamped_to_brake_floor(self):
        ego = veh(s=30.0, speed=25.0)
        leader = veh(s=36.0, speed=0.0)  # gap 1.2 m at 25 m/s closing
        assert car_following_accel(ego, leader, P) == ACCEL_MIN

    def test_standing_queue_equilibrium(self):
        # At standstill behind a stopped leader, the gap settles where
        # accel is zero: s* = s0, so gap s0 gives a = 0 exactly.
        ego = veh(s=30.0, speed=0.0)
        leader = veh(s=30.0 + 4.8 + P.s0, speed=0.0)
        assert car_following_accel(ego, leader, P) == pytest.approx(
            0.0, abs=1e-12)


class TestIntegration:
    def test_semi_implicit_order(self):
        # v' = 5 + 1.0*0.1 = 5.1 first, then s' = 3 + 5.1*0.1 = 3.51.
        st = integrate(veh(s=3.0, speed=5.0), accel=1.0, dt=0.1)
        assert st.speed == pytest.approx(5.1, abs=1e-15)
        assert st.s == pytest.approx(3.51, abs=1e-15)
        assert st.accel == 1.0

    def test_speed_floor_at_zero(self):
        st = integrate(veh(s=10.0, speed=0.3), accel=-8.0, dt=0.1)
        assert st.speed == 0.0
        assert st.s == 10.0  # no reversing

    def test_lane_untouched(self):
        st = integrate(veh(s=0.0, speed=10.0, lane=1), accel=0.0, dt=0.1)
        assert st.lane == 1


class TestRelativeGap:
    def test_plain(self):
        assert relative_gap(10.0, 25.0, None) == 15.0

    def test_ring_wrap(self):
        # On a 100 m ring, a vehicle at 95 sees one at 5 as 10 m ahead.
        assert relative_gap(95.0, 5.0, 100.0) == pytest.approx(10.0)
        assert relative_gap(5.0, 95.0, 100.0) == pytest.approx(-10.0)


class TestLaneNeighbors:
    def test_nearest_each_side(self):
        ego = veh(s=50.0, speed=10.0, lane=1)
        view = [entry(1, s=80.0, speed=10.0, lane=1),
                entry(2, s=60.0, speed=10.0, lane=1),
                entry(3, s=30.0, speed=10.0, lane=1),
                entry(4, s=55.0, speed=10.0, lane=0)]
        lead, lag = lane_neighbors(ego, 1, view)
        assert lead[0].sender == 2 and lag[0].sender == 3
        # bumper gaps: lead 60-50-5(assumed length), lag 50-30-4.8(ego)
        assert lead[1] == pytest.approx(5.0)
        assert lag[1] == pytest.approx(15.2)

    def test_gap_acceptance(self):
        ego = veh(s=50.0, speed=10.0, lane=0)
        tight = [entry(1, s=60.0, speed=10.0, lane=1)]
        assert not adjacent_lane_safe(ego, 1, tight, P)
        open_road = [entry(1, s=200.0, speed=10.0, lane=1)]
        assert adjacent_lane_safe(ego, 1, open_road, P)
        assert adjacent_lane_safe(ego, 1, [], P)  # nothing known to object


class TestOvertakePlanning:
    def test_engagement_gate(self):
        # Slower leader far ahead: no plan until within the engage window.
        ego = veh(s=0.0, speed=20.0, lane=1, desired=30.0)
        far = veh(s=200.0, speed=15.0, lane=1)
        assert plan_overtake(9, ego, far, [], P, t=0.0, dt=0.1,
                             lane_count=2, axis_offset=0.0) is None
        near = veh(s=100.0, speed=15.0, lane=1)  # gap 95.2 < 20*6
        plan = plan_overtake(9, ego, near, [], P, t=0.0, dt=0.1,
                             lane_count=2, axis_offset=0.0)
        assert plan is not None
        assert plan.action.kind.kind is Maneuver.OVERTAKING
        assert plan.atm_tag is AtmAction.OVERTAKE

    def test_engage_floor_for_crawling_ego(self):
        ego = veh(s=0.0, speed=2.0, lane=1, desired=20.0)
        leader = veh(s=OVERTAKE_ENGAGE_FLOOR + 4.0, speed=0.5, lane=1)
        plan = plan_overtake(9, ego, leader, [], P, t=0.0, dt=0.1,
                             lane_count=2, axis_offset=0.0)
        assert plan is not None

    def test_hysteresis(self):
        # Leader barely slower than desired: not worth passing.
        ego = veh(s=0.0, speed=20.0, lane=1, desired=21.0)
        leader = veh(s=60.0, speed=20.0, lane=1)
        assert plan_overtake(9, ego, leader, [], P, t=0.0, dt=0.1,
                             lane_count=2, axis_offset=0.0) is None

    def test_no_passing_lane_no_plan(self):
        ego = veh(s=0.0, speed=20.0, lane=0, desired=30.0)
        leader = veh(s=60.0, speed=10.0, lane=0)
        assert plan_overtake(9, ego, leader, [], P, t=0.0, dt=0.1,
                             lane_count=1, axis_offset=0.0) is None

    def test_blocked_passing_lane_no_plan(self):
        ego = veh(s=50.0, speed=20.0, lane=1, desired=30.0)
        leader = veh(s=110.0, speed=10.0, lane=1)
        blocker = [entry(5, s=55.0, speed=20.0, lane=0)]
        assert plan_overtake(9, ego, leader, blocker, P, t=0.0, dt=0.1,
                             lane_count=2, axis_offset=0.0,
                             ring_length=None) is None

    def test_return_leg(self):
        # Phase 2 with the passed target well behind: plan the return.
        ego = veh(s=100.0, speed=25.0, lane=0, desired=30.0)
        ctx = OvertakeContext(target_id=5, original_lane=1, passing_lane=0)
        view = [entry(5, s=60.0, speed=10.0, lane=1)]
        plan = plan_overtake(9, ego, None, view, P, t=5.0, dt=0.1,
                             lane_count=2, axis_offset=0.0, ctx=ctx)
        assert plan is not None
        assert plan.target_lane == 1
        assert plan.atm_tag is AtmAction.CHANGE_LANES

    def test_no_return_while_alongside(self):
        ego = veh(s=64.0, speed=25.0, lane=0, desired=30.0)
        ctx = OvertakeContext(target_id=5, original_lane=1, passing_lane=0)
        view = [entry(5, s=60.0, speed=10.0, lane=1)]
        assert plan_overtake(9, ego, None, view, P, t=5.0, dt=0.1,
                             lane_count=2, axis_offset=0.0, ctx=ctx) is None


class TestLaneChangePlanning:
    def test_plan_when_safe(self):
        ego = veh(s=50.0, speed=10.0, lane=0)
        plan = plan_lane_change(9, ego, 1, [], P, t=0.0, dt=0.1,
                                axis_offset=0.0)
        assert plan is not None
        assert plan.target_lane == 1
        assert plan.atm_tag is AtmAction.CHANGE_LANES

    def test_refused_when_blocked(self):
        ego = veh(s=50.0, speed=10.0, lane=0)
        view = [entry(1, s=58.0, speed=9.0, lane=1)]
        assert plan_lane_change(9, ego, 1, view, P, t=0.0, dt=0.1,
                                axis_offset=0.0) is None


class TestPassingLane:
    def test_left_of_is_lower_index(self):
        assert passing_lane_of(1) == 0
        assert passing_lane_of(0) is None


class TestMeetingPriority:
    def _act(self, vid, direction):
        fp = ActionFootprint(lane_from=0, lane_to=0, s_min=0.0, s_max=10.0,
                             t_start=0.0, t_end=1.0)
        return Action(kind=turning(direction), footprint=fp, issuer=vid)

    def test_right_beats_left(self):
        right = self._act(2, "right")
        left = self._act(1, "left")
        assert meeting_priority(left, right) == 2
        assert meeting_priority(right, left) == 2

    def test_straight_beats_right(self):
        straight = self._act(5, "straight")
        right = self._act(4, "right")
        assert meeting_priority(straight, right) == 5

    def test_equal_direction_lower_id(self):
        a = self._act(3, "right")
        b = self._act(8, "right")
        assert meeting_priority(a, b) == 3


class TestZoneSpeed:
    def test_cap_binds_inside_zone(self):
        ego = veh(s=490.0, speed=13.0)
        cap = 40.0 / 3.6
        assert zone_speed_target(ego, 0.0, cap, P) == pytest.approx(cap)

    def test_cap_binds_within_braking_envelope(self):
        ego = veh(s=0.0, speed=13.0)
        assert zone_speed_target(ego, 5.0, 40.0 / 3.6, P) is not None

    def test_cap_ignored_far_away(self):
        ego = veh(s=0.0, speed=13.0, desired=20.0)
        assert zone_speed_target(ego, 500.0, 40.0 / 3.6, P) is None
