"""Intersection layout, crossing trajectories and the movement conflict relation.

Coordinates: x east, y north, origin at the centre of the square intersection
zone.  Traffic keeps right.  Every approach carries three dedicated lanes
(left-only nearest the median, then straight, then right), and every movement
exits into the mirrored lane of its destination leg, so each of the 12
movements owns its own entry lane, crossing path and exit lane.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import networkx as nx
import numpy as np
from scipy.spatial import cKDTree

from .config import ConfigError, GeometryConfig

APPROACHES = ("N", "E", "S", "W")
TURNS = ("left", "straight", "right")

# heading of traffic entering from each approach
_INBOUND = {"N": (0.0, -1.0), "E": (-1.0, 0.0), "S": (0.0, 1.0), "W": (1.0, 0.0)}
# unit vector from the centre towards each leg
_LEG = {"N": (0.0, 1.0), "E": (1.0, 0.0), "S": (0.0, -1.0), "W": (-1.0, 0.0)}
_DEST = {
    "N": {"left": "E", "straight": "S", "right": "W"},
    "E": {"left": "S", "straight": "W", "right": "N"},
    "S": {"left": "W", "straight": "N", "right": "E"},
    "W": {"left": "N", "straight": "E", "right": "S"},
}


def _right_of(h: tuple[float, float]) -> np.ndarray:
    return np.array([h[1], -h[0]])


@dataclass(frozen=True)
class Movement:
    index: int
    origin: str
    destination: str
    turn: str
    entry_lane: int
    exit_lane: int

    @property
    def name(self) -> str:
        return self.origin + self.destination


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Path of a vehicle's front through the intersection zone."""

    movement: Movement
    points: np.ndarray          # (n, 2) samples at fixed arc-length spacing
    total_length: float
    curvature_radius: float     # inf for straight crossings
    start: np.ndarray
    end: np.ndarray
    heading_in: np.ndarray
    heading_out: np.ndarray
    center: np.ndarray | None = None
    start_angle: float = 0.0
    turn_sign: float = 0.0      # +1 counter-clockwise (left), -1 clockwise (right)

    def point_at(self, s: float) -> np.ndarray:
        """Route position for arc length ``s`` measured from the stop line.

        Negative ``s`` lies on the approach lane, ``s > total_length`` on the
        exit lane.
        """
        if s <= 0.0:
            return self.start + self.heading_in * s
        if s >= self.total_length:
            return self.end + self.heading_out * (s - self.total_length)
        if self.center is None:
            return self.start + self.heading_in * s
        ang = self.start_angle + self.turn_sign * s / self.curvature_radius
        return self.center + self.curvature_radius * np.array([math.cos(ang), math.sin(ang)])


@dataclass(frozen=True, eq=False)
class IntersectionLayout:
    intersection_zone_side: float
    control_zone_radius: float
    lane_width: float
    vehicle_width: float
    sample_resolution: float
    movements: tuple[Movement, ...]
    trajectories: tuple[Trajectory, ...]
    entry_lane_centers: dict[int, np.ndarray] = field(repr=False)
    exit_lane_centers: dict[int, np.ndarray] = field(repr=False)

    @property
    def approach_length(self) -> float:
        return self.control_zone_radius - self.intersection_zone_side / 2.0

    @property
    def n_movements(self) -> int:
        return len(self.movements)

    def movement(self, name: str) -> Movement:
        for m in self.movements:
            if m.name == name:
                return m
        raise KeyError(name)

    def trajectory(self, m: Movement | int) -> Trajectory:
        idx = m if isinstance(m, int) else m.index
        return self.trajectories[idx]

    def route_table(self) -> np.ndarray:
        """Per-movement analytic route parameters, one row per movement.

        Columns: kind (0 straight, 1 arc), start x/y, heading-in x/y, end x/y,
        heading-out x/y, centre x/y, radius, start angle, turn sign, length.
        Consumed by the compiled simulation kernels.
        """
        rows = []
        for t in self.trajectories:
            c = t.center if t.center is not None else np.zeros(2)
            r = t.curvature_radius if t.center is not None else 0.0
            rows.append([
                0.0 if t.center is None else 1.0,
                *t.start, *t.heading_in, *t.end, *t.heading_out,
                *c, r, t.start_angle, t.turn_sign, t.total_length,
            ])
        return np.asarray(rows, dtype=np.float64)


def build_layout(params: GeometryConfig | None = None) -> IntersectionLayout:
    """Construct the 4-leg, 12-movement layout from geometric parameters."""
    p = params or GeometryConfig()
    for name in ("intersection_zone_side", "control_zone_radius", "lane_width", "vehicle_width",
                 "sample_resolution"):
        if getattr(p, name) <= 0:
            raise ConfigError(f"{name} must be positive, got {getattr(p, name)}")
    half = p.intersection_zone_side / 2.0
    if not math.isclose(3.0 * p.lane_width, half, rel_tol=0.0, abs_tol=1e-9):
        raise ConfigError(f"inconsistent lane tiling: 3 * lane_width = {3.0 * p.lane_width} "
                          f"but S/2 = {half}")
    if p.control_zone_radius <= half:
        raise ConfigError(f"control zone radius {p.control_zone_radius} must exceed S/2 = {half}")

    movements = []
    entry_centers: dict[int, np.ndarray] = {}
    exit_centers: dict[int, np.ndarray] = {}
    for a_idx, origin in enumerate(APPROACHES):
        for t_idx, turn in enumerate(TURNS):
            idx = 3 * a_idx + t_idx
            m = Movement(idx, origin, _DEST[origin][turn], turn, entry_lane=idx, exit_lane=idx)
            movements.append(m)
            offset = (t_idx + 0.5) * p.lane_width
            h_in = _INBOUND[origin]
            entry_centers[idx] = np.array(_LEG[origin]) * half + _right_of(h_in) * offset
            h_out = _LEG[m.destination]
            exit_centers[idx] = np.array(h_out) * half + _right_of(h_out) * offset

    trajectories = tuple(_make_trajectory(m, entry_centers[m.index], exit_centers[m.index],
                                          p.sample_resolution) for m in movements)
    return IntersectionLayout(
        intersection_zone_side=p.intersection_zone_side,
        control_zone_radius=p.control_zone_radius,
        lane_width=p.lane_width,
        vehicle_width=p.vehicle_width,
        sample_resolution=p.sample_resolution,
        movements=tuple(movements),
        trajectories=trajectories,
        entry_lane_centers=entry_centers,
        exit_lane_centers=exit_centers,
    )


def _make_trajectory(m: Movement, start: np.ndarray, end: np.ndarray,
                     resolution: float) -> Trajectory:
    h_in = np.array(_INBOUND[m.origin])
    h_out = np.array(_LEG[m.destination])
    if m.turn == "straight":
        length = float(np.linalg.norm(end - start))
        n = max(1, math.ceil(length / resolution - 1e-9))
        s = np.linspace(0.0, length, n + 1)
        pts = start[None, :] + s[:, None] * h_in[None, :]
        return Trajectory(m, pts, length, math.inf, start, end, h_in, h_out)

    # tangency: radius is the distance from the entry point to the exit centreline
    d = start - end
    radius = abs(h_out[0] * d[1] - h_out[1] * d[0])
    if m.turn == "left":
        normal, sign = np.array([-h_in[1], h_in[0]]), 1.0
    else:
        normal, sign = _right_of(tuple(h_in)), -1.0
    center = start + radius * normal
    theta0 = math.atan2(start[1] - center[1], start[0] - center[0])
    length = 0.5 * math.pi * radius
    n = max(1, math.ceil(length / resolution - 1e-9))
    ang = theta0 + sign * np.linspace(0.0, 0.5 * math.pi, n + 1)
    pts = center[None, :] + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    pts[0], pts[-1] = start, end   # remove trig round-off at the tangency points
    return Trajectory(m, pts, length, radius, start, end, h_in, h_out,
                      center=center, start_angle=theta0, turn_sign=sign)


def trajectory_for(m: Movement, layout: IntersectionLayout) -> Trajectory:
    return layout.trajectories[m.index]


def min_distance(t1: Trajectory, t2: Trajectory) -> float:
    tree = cKDTree(t2.points)
    dist, _ = tree.query(t1.points, k=1)
    return float(dist.min())


def conflicts(m1: Movement, m2: Movement, layout: IntersectionLayout,
              threshold: float | None = None) -> bool:
    """True when the two crossing paths come closer than a vehicle width."""
    if m1.index == m2.index:
        raise ValueError("conflicts() needs two distinct movements")
    thr = layout.vehicle_width if threshold is None else threshold
    return min_distance(layout.trajectories[m1.index], layout.trajectories[m2.index]) < thr


class ConflictMatrix:
    """Symmetric, irreflexive conflict relation over the 12 movements."""

    def __init__(self, matrix: np.ndarray, movements: Sequence[Movement]):
        m = np.asarray(matrix, dtype=bool)
        if m.shape != (len(movements), len(movements)):
            raise ValueError(f"matrix shape {m.shape} does not match {len(movements)} movements")
        if not np.array_equal(m, m.T):
            raise ValueError("conflict matrix must be symmetric")
        if m.diagonal().any():
            raise ValueError("conflict matrix must be irreflexive")
        self.matrix = m
        self.matrix.setflags(write=False)
        self.movements = tuple(movements)

    @classmethod
    def from_layout(cls, layout: IntersectionLayout, threshold: float | None = None) -> "ConflictMatrix":
        n = layout.n_movements
        mat = np.zeros((n, n), dtype=bool)
        for i, j in itertools.combinations(range(n), 2):
            a, b = layout.movements[i], layout.movements[j]
            if a.origin == b.origin:
                continue   # parallel dedicated lanes
            mat[i, j] = mat[j, i] = conflicts(a, b, layout, threshold)
        return cls(mat, layout.movements)

    def __call__(self, i: int, j: int) -> bool:
        return bool(self.matrix[i, j])

    def __len__(self) -> int:
        return len(self.movements)

    def compatible(self, i: int, group: Iterable[int]) -> bool:
        return not any(self.matrix[i, j] for j in group if j != i)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = [m.name for m in self.movements]
        w.writerow(["movement", *names])
        for name, row in zip(names, self.matrix):
            w.writerow([name, *(int(x) for x in row)])
        return buf.getvalue()


def compatible_sets(target: Movement | int, cm: ConflictMatrix) -> list[tuple[int, ...]]:
    """Maximal pairwise-nonconflicting movement sets that contain ``target``.

    Sets are sorted tuples of movement indices; the list is in lexicographic
    order so the result is deterministic.
    """
    t = target if isinstance(target, int) else target.index
    partners = [j for j in range(len(cm)) if j != t and not cm.matrix[t, j]]
    if not partners:
        return [(t,)]
    g = nx.Graph()
    g.add_nodes_from(partners)
    g.add_edges_from((a, b) for a, b in itertools.combinations(partners, 2) if not cm.matrix[a, b])
    return sorted(tuple(sorted((t, *clique))) for clique in nx.find_cliques(g))
