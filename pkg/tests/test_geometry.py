import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from adaptive_platoon.config import ConfigError, GeometryConfig
from adaptive_platoon.geometry import (ConflictMatrix, build_layout, compatible_sets, conflicts,
                                       min_distance, trajectory_for)

from oracles import SNAPSHOT, brute_conflicts, brute_maximal_sets


class TestLayout:
    def test_default_approach_length(self, layout):
        assert layout.approach_length == pytest.approx(192.5)

    def test_alternate_geometry(self):
        lay = build_layout(GeometryConfig(intersection_zone_side=12, lane_width=2.0, control_zone_radius=100))
        assert lay.approach_length == pytest.approx(94.0)

    def test_bad_tiling_reports_both_values(self):
        with pytest.raises(ConfigError) as err:
            build_layout(GeometryConfig(lane_width=2.0))
        assert "6.0" in str(err.value) and "7.5" in str(err.value)

    def test_twelve_distinct_movements(self, layout):
        names = [m.name for m in layout.movements]
        assert len(names) == 12 == len(set(names))
        assert len({m.entry_lane for m in layout.movements}) == 12

    def test_nonpositive_lengths_rejected(self):
        with pytest.raises(ConfigError):
            build_layout(GeometryConfig(vehicle_width=-1.0))


class TestTrajectories:
    def test_straight_spans_zone(self, layout):
        for m in layout.movements:
            if m.turn == "straight":
                assert trajectory_for(m, layout).total_length == pytest.approx(15.0)
                assert math.isinf(trajectory_for(m, layout).curvature_radius)

    def test_right_turn_radius_matches_circle_fit(self, layout):
        t = trajectory_for(layout.movement("NW"), layout)
        # distance between the two tangency axes: corner at 7.5, lane centre at 6.25
        assert t.curvature_radius == pytest.approx(7.5 - 6.25)
        x, y = t.points[:, 0], t.points[:, 1]
        a = np.column_stack([x, y, np.ones_like(x)])
        sol, *_ = np.linalg.lstsq(a, x * x + y * y, rcond=None)
        cx, cy = sol[0] / 2, sol[1] / 2
        r_fit = math.sqrt(sol[2] + cx * cx + cy * cy)
        assert r_fit == pytest.approx(t.curvature_radius, abs=1e-6)
        assert t.total_length == pytest.approx(math.pi / 2 * r_fit, abs=1e-6)

    def test_left_radius_exceeds_right(self, layout):
        for origin in "NESW":
            left = [m for m in layout.movements if m.origin == origin and m.turn == "left"][0]
            right = [m for m in layout.movements if m.origin == origin and m.turn == "right"][0]
            assert layout.trajectory(left).curvature_radius > layout.trajectory(right).curvature_radius
        assert layout.trajectory(layout.movement("NE")).curvature_radius == pytest.approx(8.75)

    def test_polyline_continuity_and_endpoints(self, layout):
        half = 7.5
        for m in layout.movements:
            t = layout.trajectory(m)
            steps = np.linalg.norm(np.diff(t.points, axis=0), axis=1)
            assert steps.max() <= layout.sample_resolution + 1e-9
            assert np.allclose(t.points[0], layout.entry_lane_centers[m.index], atol=1e-6)
            assert np.allclose(t.points[-1], layout.exit_lane_centers[m.index], atol=1e-6)
            assert np.all(np.abs(t.points) <= half + 1e-9)

    def test_arc_tangent_to_lanes(self, layout):
        for m in layout.movements:
            t = layout.trajectory(m)
            h0 = (t.point_at(1e-4) - t.point_at(0.0)) / 1e-4
            h1 = (t.point_at(t.total_length) - t.point_at(t.total_length - 1e-4)) / 1e-4
            assert np.allclose(h0, t.heading_in, atol=1e-3)
            assert np.allclose(h1, t.heading_out, atol=1e-3)


class TestConflicts:
    def test_crossing_straights(self, layout):
        assert conflicts(layout.movement("NS"), layout.movement("EW"), layout)

    def test_opposing_straights(self, layout):
        assert not conflicts(layout.movement("NS"), layout.movement("SN"), layout)

    def test_same_movement_rejected(self, layout):
        with pytest.raises(ValueError):
            conflicts(layout.movement("NS"), layout.movement("NS"), layout)

    def test_matrix_equals_bruteforce(self, layout, cm):
        assert np.array_equal(cm.matrix, brute_conflicts(layout, layout.vehicle_width))

    def test_matrix_snapshot(self, cm):
        assert cm.to_csv() == SNAPSHOT

    def test_symmetric_irreflexive_same_origin(self, layout, cm):
        assert np.array_equal(cm.matrix, cm.matrix.T)
        assert not cm.matrix.diagonal().any()
        for a, b in itertools.combinations(layout.movements, 2):
            if a.origin == b.origin:
                assert not cm(a.index, b.index)

    def test_rejects_asymmetric(self, layout):
        m = np.zeros((12, 12), dtype=bool)
        m[0, 3] = True
        with pytest.raises(ValueError):
            ConflictMatrix(m, layout.movements)

    def test_min_distance_positive_for_parallel(self, layout):
        assert min_distance(layout.trajectory(1), layout.trajectory(7)) >= layout.lane_width


class TestCompatibleSets:
    def test_north_south_straight(self, layout, cm):
        sets = compatible_sets(layout.movement("NS"), cm)
        assert len(sets) >= 2
        # exact family under the derived matrix
        assert sets == [(0, 1, 2, 5, 8, 11), (1, 2, 3, 5, 8, 11), (1, 2, 5, 7, 8, 11)]

    def test_all_targets_match_subset_enumeration(self, cm):
        mat = cm.matrix.tolist()
        for t in range(12):
            assert compatible_sets(t, cm) == brute_maximal_sets(t, mat)

    def test_isolated_target(self, layout):
        m = np.zeros((12, 12), dtype=bool)
        m[4, :] = m[:, 4] = True
        m[4, 4] = False
        assert compatible_sets(4, ConflictMatrix(m, layout.movements)) == [(4,)]

    def test_toy_four_movements(self, layout):
        # conflicts: 0-1, 2-3 -> maximal compatible sets are {0,2},{0,3},{1,2},{1,3}
        m = np.zeros((4, 4), dtype=bool)
        m[0, 1] = m[1, 0] = m[2, 3] = m[3, 2] = True
        cm4 = ConflictMatrix(m, layout.movements[:4])
        assert compatible_sets(0, cm4) == [(0, 2), (0, 3)]
        assert compatible_sets(3, cm4) == [(0, 3), (1, 3)]

    @given(st.integers(3, 8).flatmap(lambda n: st.tuples(
        st.just(n), st.lists(st.booleans(), min_size=n * (n - 1) // 2, max_size=n * (n - 1) // 2),
        st.integers(0, n - 1))))
    def test_random_matrices(self, layout, data):
        n, bits, target = data
        m = np.zeros((n, n), dtype=bool)
        for (i, j), b in zip(itertools.combinations(range(n), 2), bits):
            m[i, j] = m[j, i] = b
        cmn = ConflictMatrix(m, layout.movements[:n])
        got = compatible_sets(target, cmn)
        assert got == brute_maximal_sets(target, m.tolist())
        for s in got:
            assert target in s
            assert all(not m[a, b] for a, b in itertools.combinations(s, 2))
