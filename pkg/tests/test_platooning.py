import math

import pytest
from hypothesis import given, strategies as st

from adaptive_platoon.platooning import (AlreadyJoined, PlatoonError, form_platoon, max_feasible_size,
                                         platoon_length, time_to_join)


def integrate_join(v_i, a, v0, slot_gap, dt=1e-3, t_max=200.0):
    """Forward kinematics: follower accelerates at ``a`` (no cap) until it closes ``slot_gap``."""
    closed = 0.0
    t = 0.0
    rel_v = v_i - v0
    while t < t_max:
        nxt = closed + rel_v * dt + 0.5 * a * dt * dt
        if nxt >= slot_gap:
            # linear interpolation inside the last step
            frac = (slot_gap - closed) / (nxt - closed)
            return t + frac * dt
        closed = nxt
        rel_v += a * dt
        t += dt
    return math.inf


class TestTimeToJoin:
    def test_worked_example(self):
        t = time_to_join(2, 10.0, 5.0, 15.0, [5.0], 1.0, 20.0)
        assert t == pytest.approx((5 + math.sqrt(165)) / 5, abs=1e-12)
        assert abs(t - integrate_join(10.0, 5.0, 15.0, 20.0 - 6.0)) <= 0.01

    def test_at_slot_same_speed(self):
        assert time_to_join(3, 12.0, 5.0, 12.0, [5.0, 5.0], 1.0, 12.0) == pytest.approx(0.0, abs=1e-12)

    def test_pure_acceleration(self):
        assert time_to_join(2, 8.0, 5.0, 8.0, [5.0], 1.0, 16.0) == pytest.approx(2.0)

    def test_inside_slot_and_pulling_away(self):
        with pytest.raises(AlreadyJoined):
            time_to_join(2, 20.0, 5.0, 0.0, [5.0], 1.0, 3.0)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            time_to_join(1, 1.0, 5.0, 1.0, [], 1.0, 10.0)
        with pytest.raises(ValueError):
            time_to_join(2, 1.0, 5.0, 1.0, [5.0, 5.0], 1.0, 10.0)

    @given(st.integers(2, 6), st.floats(0, 20), st.floats(1, 6), st.floats(0, 20),
           st.floats(0.0, 150.0))
    def test_residual_balances(self, i, v_i, a, v0, extra):
        lengths = [5.0] * (i - 1)
        d1i = sum(lengths) + (i - 1) * 1.0 + extra + 1e-3
        t = time_to_join(i, v_i, a, v0, lengths, 1.0, d1i)
        lhs = v_i * t + 0.5 * a * t * t + sum(lengths) + (i - 1) * 1.0
        rhs = v0 * t + d1i
        assert t >= 0
        assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs), abs(rhs))

    @given(st.floats(0, 20), st.floats(1, 6), st.floats(0, 20), st.floats(6.5, 100), st.floats(0, 50))
    def test_monotone_in_distance(self, v_i, a, v0, d, more):
        assert time_to_join(2, v_i, a, v0, [5.0], 1.0, d) <= time_to_join(2, v_i, a, v0, [5.0], 1.0, d + more) + 1e-12


class TestFeasibleSize:
    def test_control_zone_bound(self):
        assert max_feasible_size([5.0] * 40, 1.0, 200.0) == 33

    def test_queue_limited(self):
        assert max_feasible_size([5.0, 5.0], 1.0, 200.0) == 2

    def test_short_zone(self):
        assert max_feasible_size([5.0] * 10, 1.0, 20.0) == 3

    def test_vehicle_longer_than_zone(self):
        with pytest.raises(PlatoonError):
            max_feasible_size([25.0], 1.0, 20.0)

    @given(st.lists(st.floats(2.0, 12.0), min_size=1, max_size=40), st.floats(12.0, 300.0),
           st.floats(0.0, 100.0))
    def test_monotone_and_bounded(self, lengths, zone, more):
        n = max_feasible_size(lengths, 1.0, zone)
        assert 1 <= n <= len(lengths)
        assert platoon_length(lengths[:n], 1.0) <= zone + 1e-9
        if n < len(lengths):
            assert platoon_length(lengths[:n + 1], 1.0) > zone
        assert max_feasible_size(lengths, 1.0, zone + more) >= n

    @given(st.integers(1, 50), st.floats(12.0, 300.0))
    def test_uniform_closed_form_matches_scan(self, k, zone):
        uniform = max_feasible_size([5.0] * k, 1.0, zone)
        scan = max_feasible_size([5.0] * (k - 1) + [5.0 + 1e-15], 1.0, zone)
        assert uniform == scan


class TestFormPlatoon:
    def test_lone_leader(self):
        p = form_platoon(3, 1, [7, 8], [5.0, 5.0], 1.0, 200.0)
        assert p.leader == 7 and p.followers == () and p.size == 1

    def test_length_of_three(self):
        p = form_platoon(0, 3, [1, 2, 3, 4], [5.0] * 4, 1.0, 200.0)
        assert p.length == pytest.approx(17.0)
        assert p.members == (1, 2, 3)

    def test_rejections_name_constraint(self):
        with pytest.raises(PlatoonError, match="queue"):
            form_platoon(0, 5, [1, 2], [5.0, 5.0], 1.0, 200.0)
        with pytest.raises(PlatoonError, match="feasibility"):
            form_platoon(0, 4, [1, 2, 3, 4], [5.0] * 4, 1.0, 20.0)
