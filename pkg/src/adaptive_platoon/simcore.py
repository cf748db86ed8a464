"""Fixed-step intersection micro-simulation.

Every movement owns a one-dimensional route: ``pos`` is the arc length of a
vehicle's front measured from its stop line (negative upstream, ``0..len``
inside the intersection zone, beyond that on the exit lane).  Vehicles are
stored as a structure of arrays sorted by (movement, -pos), so the leader of
vehicle ``i`` is ``i - 1`` whenever both share a movement.

The per-step dynamics and the collision query run in compiled kernels; the
``World`` class owns bookkeeping (spawning, retirement, trip records).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .config import DynamicsConfig, ExperimentConfig, GeometryConfig
from .geometry import ConflictMatrix, IntersectionLayout, build_layout

FREE, LVA, FVA = 0, 1, 2
_RT_LEN = 14          # column of the route length in IntersectionLayout.route_table()
_STOP_MARGIN = 1e-9   # held vehicles stop this far short of the line, absorbing round-off


class SimulationFault(RuntimeError):
    """A safety invariant broke; carries enough state to reproduce it."""

    def __init__(self, message: str, *, time: float, step: int, detail: dict | None = None):
        super().__init__(f"t={time:.1f}s step={step}: {message}")
        self.time = time
        self.step = step
        self.detail = detail or {}


# --------------------------------------------------------------------------- fuel

@dataclass(frozen=True)
class FuelModel:
    """Surrogate fuel-rate polynomial in mL/s.

    rate = max(0, b0 + b1 v + b2 v^2 + b3 v^3 + b4 a v + b5 a^2 v)

    The frozen defaults give 0.2222 mL/s at idle (0.8 L/h) and 0.834 mL/s at a
    steady 13.9 m/s cruise (6 L/100 km).
    """

    coefficients: tuple[float, ...] = DynamicsConfig().fuel_coefficients

    def rate(self, v: float, a: float) -> float:
        return float(_fuel_rate(float(v), float(a), np.asarray(self.coefficients, dtype=np.float64)))


def fuel_rate(v: float, a: float, model: FuelModel | None = None) -> float:
    if v < 0:
        raise ValueError("speed must be nonnegative")
    return (model or FuelModel()).rate(v, a)


@numba.njit(cache=True)
def _fuel_rate(v, a, b):
    r = b[0] + b[1] * v + b[2] * v * v + b[3] * v * v * v + b[4] * a * v + b[5] * a * a * v
    return r if r > 0.0 else 0.0


# ------------------------------------------------------------------ safe following

@numba.njit(cache=True)
def _braking_distance(v, a, dt):
    """Distance covered while braking at ``a`` from ``v`` under semi-implicit steps."""
    if v <= 0.0:
        return 0.0
    if dt <= 0.0:
        return v * v / (2.0 * a)
    k = math.floor(v / (a * dt))
    return dt * (k * v - a * dt * k * (k + 1) / 2.0)


@numba.njit(cache=True)
def _stop_speed(room, a, dt):
    """Largest speed v with v*dt + braking_distance(v) <= room.

    v*dt + D(v) equals D(v + a*dt), so this inverts the discrete braking
    distance exactly; committing to it keeps the stop point fixed on the next
    step when braking at ``a``.
    """
    if room <= 0.0:
        return 0.0
    if dt <= 0.0:
        return math.sqrt(2.0 * a * room)
    ad2 = a * dt * dt
    k = math.floor((1.0 + math.sqrt(1.0 + 8.0 * room / ad2)) / 2.0)
    if k < 1:
        k = 1
    return room / (k * dt) + a * dt * (k - 1) / 2.0


def safe_speed(gap: float, v_leader: float, a_max: float, min_gap: float, dt: float = 0.0) -> float:
    """Follower speed that can always stop ``min_gap`` behind a leader braking at ``a_max``.

    With ``dt == 0`` this is the continuous rule
    ``sqrt(max(0, v_leader**2 + 2 a_max (gap - min_gap)))``.  With ``dt > 0``
    the follower's travel during the coming step and the leader's discrete
    braking distance are accounted for, which is what the stepping rule uses.
    """
    if gap < 0:
        raise ValueError("gap must be nonnegative")
    if dt <= 0.0:
        return math.sqrt(max(0.0, v_leader * v_leader + 2.0 * a_max * (gap - min_gap)))
    return float(_stop_speed(gap - min_gap + _braking_distance(v_leader, a_max, dt), a_max, dt))


# ----------------------------------------------------------------------- kernels

@numba.njit(cache=True)
def _step_kernel(n, mov, pos, speed, acc, length, amax, role, released, passed, wait, fuel,
                 v_cross, traj_len, dt, v_max, d_min, d_h, d_floor, k_v, k_g, wait_speed,
                 fuel_b, reward_c, reward_wm, retire_at, out):
    """Advance every vehicle by one step, front to back within each movement.

    ``out`` receives: [fault index or -1, vehicles due for retirement,
    released-but-not-cleared count, reward sum, reward count, max |accel|].
    """
    out[0] = -1.0
    out[1] = 0.0
    out[2] = 0.0
    out[3] = 0.0
    out[4] = 0.0
    out[5] = 0.0
    prev_pos_old = 0.0
    prev_v_old = 0.0
    for i in range(n):
        m = mov[i]
        a = amax[i]
        v = speed[i]
        x = pos[i]
        has_lead = i > 0 and mov[i - 1] == m
        v_new = v + a * dt
        if v_new > v_max:
            v_new = v_max
        if released[i]:
            # turn-speed profile: brake into the zone, hold v_cross inside, free beyond
            if x < 0.0:
                vc = v_cross[m]
                cap = math.sqrt(vc * vc + 2.0 * a * (-x))
                if cap < v_new:
                    v_new = cap
            elif x <= traj_len[m]:
                if v_cross[m] < v_new:
                    v_new = v_cross[m]
        else:
            cap = _stop_speed(-x - _STOP_MARGIN, a, dt)
            if cap < v_new:
                v_new = cap
        if has_lead:
            rear_l = pos[i - 1] - length[i - 1]      # leader already advanced
            v_l = speed[i - 1]
            if role[i] == 2:
                gap_old = prev_pos_old - length[i - 1] - x
                a_reg = k_v * (prev_v_old - v) + k_g * (gap_old - d_h)
                if a_reg > a:
                    a_reg = a
                elif a_reg < -a:
                    a_reg = -a
                v_reg = v + a_reg * dt
                if v_reg < v_new:
                    v_new = v_reg
                cap = _stop_speed(rear_l - x - d_floor + _braking_distance(v_l, a, dt), a, dt)
            else:
                cap = _stop_speed(rear_l - x - d_min + _braking_distance(v_l, a, dt), a, dt)
            if cap < v_new:
                v_new = cap
        lo = v - a * dt
        if v_new < lo:
            v_new = lo
        if v_new < 0.0:
            v_new = 0.0
        acc_i = (v_new - v) / dt
        prev_pos_old = x
        prev_v_old = v
        x_new = x + v_new * dt
        speed[i] = v_new
        pos[i] = x_new
        acc[i] = acc_i
        if abs(acc_i) > out[5]:
            out[5] = abs(acc_i)
        fuel[i] += _fuel_rate(v_new, acc_i, fuel_b) * dt
        if x_new < 0.0:
            if v_new < wait_speed:
                wait[i] += dt
            r = wait[i] / reward_wm
            out[3] += reward_c - reward_c * r * r
            out[4] += 1.0
        if has_lead and pos[i - 1] - length[i - 1] - x_new < 0.0 and out[0] < 0.0:
            out[0] = i
        if x_new - length[i] > traj_len[m]:
            passed[i] = True
        if released[i] and not passed[i]:
            out[2] += 1.0
        if x_new >= traj_len[m] + retire_at:
            out[1] += 1.0


@numba.njit(cache=True)
def _route_xy(rt, m, s):
    length = rt[m, _RT_LEN]
    if s <= 0.0:
        return rt[m, 1] + rt[m, 3] * s, rt[m, 2] + rt[m, 4] * s
    if s >= length:
        d = s - length
        return rt[m, 5] + rt[m, 7] * d, rt[m, 6] + rt[m, 8] * d
    if rt[m, 0] == 0.0:
        return rt[m, 1] + rt[m, 3] * s, rt[m, 2] + rt[m, 4] * s
    r = rt[m, 11]
    ang = rt[m, 12] + rt[m, 13] * s / r
    return rt[m, 9] + r * math.cos(ang), rt[m, 10] + r * math.sin(ang)


@numba.njit(cache=True)
def _collision_kernel(n, mov, pos, length, rt, conflict, width, body_samples):
    """Return an (k, 2) array of violating index pairs."""
    found = []
    for i in range(1, n):
        if mov[i] == mov[i - 1] and pos[i - 1] - length[i - 1] - pos[i] < 0.0:
            found.append((i - 1, i))
    inside = []
    for i in range(n):
        m = mov[i]
        if pos[i] > 0.0 and pos[i] - length[i] < rt[m, _RT_LEN]:
            inside.append(i)
    k = len(inside)
    if k >= 2:
        xs = np.empty((k, body_samples))
        ys = np.empty((k, body_samples))
        for a in range(k):
            i = inside[a]
            for s in range(body_samples):
                x, y = _route_xy(rt, mov[i], pos[i] - length[i] * s / (body_samples - 1))
                xs[a, s] = x
                ys[a, s] = y
        w2 = width * width
        for a in range(k):
            for b in range(a + 1, k):
                i, j = inside[a], inside[b]
                if not conflict[mov[i], mov[j]]:
                    continue
                hit = False
                for p in range(body_samples):
                    for q in range(body_samples):
                        dx = xs[a, p] - xs[b, q]
                        dy = ys[a, p] - ys[b, q]
                        if dx * dx + dy * dy < w2:
                            hit = True
                            break
                    if hit:
                        break
                if hit:
                    found.append((min(i, j), max(i, j)))
    res = np.empty((len(found), 2), dtype=np.int64)
    for t in range(len(found)):
        res[t, 0] = found[t][0]
        res[t, 1] = found[t][1]
    return res


# ------------------------------------------------------------------------ records

@dataclass(frozen=True)
class Vehicle:
    id: int
    movement: int
    longitudinal_position: float
    speed: float
    acceleration: float
    length: float
    width: float
    a_max: float
    entry_time: float
    accumulated_wait: float
    platoon_role: str
    fuel_used: float
    released: bool


@dataclass(frozen=True)
class TripRecord:
    vehicle_id: int
    movement: str
    entry_time: float
    exit_time: float
    travel_time: float
    wait_time: float
    fuel: float
    platoon_size_joined: int


TRIP_FIELDS = ("id", "movement", "entry_time", "exit_time", "travel_time", "wait_time",
               "fuel_mL", "platoon_size_joined")


def trip_rows(trips: list[TripRecord]) -> list[list[str]]:
    return [[str(t.vehicle_id), t.movement, f"{t.entry_time:.1f}", f"{t.exit_time:.1f}",
             f"{t.travel_time:.1f}", f"{t.wait_time:.1f}", f"{t.fuel:.4f}",
             str(t.platoon_size_joined)] for t in trips]


# -------------------------------------------------------------------------- demand

def poisson_arrivals(flows_vph: np.ndarray, horizon: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Arrival times per movement from independent Poisson processes."""
    out = []
    for rate in flows_vph:
        lam = rate / 3600.0
        if lam <= 0.0:
            out.append(np.empty(0))
            continue
        # draw in chunks until the horizon is covered
        times: list[np.ndarray] = []
        t = 0.0
        while t <= horizon:
            gaps = rng.exponential(1.0 / lam, size=max(16, int(lam * horizon * 0.25) + 16))
            chunk = t + np.cumsum(gaps)
            times.append(chunk)
            t = float(chunk[-1])
        arr = np.concatenate(times)
        out.append(arr[arr < horizon])
    return out


# --------------------------------------------------------------------------- world

@dataclass
class StepInfo:
    spawned: list[int] = field(default_factory=list)
    retired: list[TripRecord] = field(default_factory=list)
    reward: float | None = None
    active_released: int = 0


class World:
    """Mutable simulation state plus the step loop."""

    def __init__(self, config: ExperimentConfig, arrival_rng: np.random.Generator,
                 layout: IntersectionLayout | None = None, conflict_matrix: ConflictMatrix | None = None,
                 arrivals: list[np.ndarray] | None = None):
        self.config = config
        self.geo: GeometryConfig = config.geometry
        self.dyn: DynamicsConfig = config.dynamics
        self.layout = layout or build_layout(config.geometry)
        self.cm = conflict_matrix or ConflictMatrix.from_layout(self.layout)
        self.route_table = self.layout.route_table()
        if self.route_table.shape[1] != _RT_LEN + 1:
            raise ValueError("route table layout changed; update _RT_LEN")
        self.conflict = np.ascontiguousarray(self.cm.matrix)
        self.names = [m.name for m in self.layout.movements]
        self.traj_len = np.array([t.total_length for t in self.layout.trajectories])
        radius = np.array([t.curvature_radius for t in self.layout.trajectories])
        self.v_cross = np.minimum(self.dyn.v_max, np.sqrt(self.dyn.a_lat_max * radius))
        self.fuel_b = np.asarray(self.dyn.fuel_coefficients, dtype=np.float64)
        self.approach_length = self.layout.approach_length
        self.dt = self.dyn.dt
        self.now = 0.0
        self.step_index = 0
        self.horizon = config.horizon
        flows = np.array([config.flows.get(n, 0.0) for n in self.names])
        self.arrivals = arrivals if arrivals is not None else poisson_arrivals(flows, self.horizon, arrival_rng)
        self._arr_ptr = np.zeros(len(self.names), dtype=np.int64)
        self._heads = np.array([a[0] if len(a) else math.inf for a in self.arrivals])
        self._next_arrival = float(self._heads.min()) if len(self._heads) else math.inf
        self.spawn_log: list[tuple[float, int, int]] = []   # (scheduled time, movement, id)
        self.blocked_spawns = 0
        self.max_spawn_backlog = 0
        self.spawned_total = 0
        self.trips: list[TripRecord] = []
        self.max_abs_accel = 0.0
        self._out = np.zeros(6)
        self._next_id = 0
        cap = 256
        self.n = 0
        self.vid = np.zeros(cap, dtype=np.int64)
        self.mov = np.zeros(cap, dtype=np.int64)
        self.pos = np.zeros(cap)
        self.speed = np.zeros(cap)
        self.acc = np.zeros(cap)
        self.length = np.zeros(cap)
        self.amax = np.zeros(cap)
        self.entry_time = np.zeros(cap)
        self.wait = np.zeros(cap)
        self.fuel = np.zeros(cap)
        self.role = np.zeros(cap, dtype=np.int64)
        self.released = np.zeros(cap, dtype=np.bool_)
        self.passed = np.zeros(cap, dtype=np.bool_)
        self.platoon_size = np.zeros(cap, dtype=np.int64)
        self.index_of: dict[int, int] = {}

    _ARRAYS = ("vid", "mov", "pos", "speed", "acc", "length", "amax", "entry_time", "wait",
               "fuel", "role", "released", "passed", "platoon_size")

    # ----------------------------------------------------------------- storage
    def _grow(self) -> None:
        for name in self._ARRAYS:
            arr = getattr(self, name)
            new = np.zeros(2 * len(arr), dtype=arr.dtype)
            new[: len(arr)] = arr
            setattr(self, name, new)

    def _reorder(self, order: np.ndarray) -> None:
        k = len(order)
        for name in self._ARRAYS:
            arr = getattr(self, name)
            arr[:k] = arr[order]
        self.n = k
        self.index_of = {int(v): i for i, v in enumerate(self.vid[:k])}

    def add_vehicle(self, movement: int, pos: float, speed: float, entry_time: float | None = None) -> int:
        """Insert one vehicle (also used by tests to build fixtures)."""
        if self.n == len(self.vid):
            self._grow()
        i = self.n
        vid = self._next_id
        self._next_id += 1
        self.vid[i] = vid
        self.mov[i] = movement
        self.pos[i] = pos
        self.speed[i] = speed
        self.acc[i] = 0.0
        self.length[i] = self.geo.vehicle_length
        self.amax[i] = self.dyn.a_max
        self.entry_time[i] = self.now if entry_time is None else entry_time
        self.wait[i] = 0.0
        self.fuel[i] = 0.0
        self.role[i] = FREE
        self.released[i] = False
        self.passed[i] = False
        self.platoon_size[i] = 0
        self.n += 1
        order = np.lexsort((-self.pos[: self.n], self.mov[: self.n]))
        self._reorder(order)
        return vid

    # ------------------------------------------------------------------ queries
    def lane_indices(self, lane: int) -> np.ndarray:
        """Array indices of vehicles on ``lane``, stop line first."""
        lo = np.searchsorted(self.mov[: self.n], lane, side="left")
        hi = np.searchsorted(self.mov[: self.n], lane, side="right")
        return np.arange(lo, hi)

    def pending_indices(self, lane: int) -> np.ndarray:
        idx = self.lane_indices(lane)
        return idx[~self.released[idx]]

    def vehicle(self, vid: int) -> Vehicle:
        i = self.index_of[vid]
        return Vehicle(int(self.vid[i]), int(self.mov[i]), float(self.pos[i]), float(self.speed[i]),
                       float(self.acc[i]), float(self.length[i]), self.geo.vehicle_width,
                       float(self.amax[i]), float(self.entry_time[i]), float(self.wait[i]),
                       ("free", "LVA", "FVA")[int(self.role[i])], float(self.fuel[i]),
                       bool(self.released[i]))

    def vehicles(self) -> list[Vehicle]:
        return [self.vehicle(int(v)) for v in self.vid[: self.n]]

    def in_zone_movements(self) -> set[int]:
        k = self.n
        body_in = (self.pos[:k] > 0.0) & (self.pos[:k] - self.length[:k] < self.traj_len[self.mov[:k]])
        return set(int(m) for m in self.mov[:k][body_in])

    # ------------------------------------------------------------------ control
    def release(self, vids, role: int = FREE, platoon_size: int = 0) -> None:
        for vid in vids:
            i = self.index_of[int(vid)]
            self.released[i] = True
            self.role[i] = role
            self.platoon_size[i] = platoon_size

    def revoke(self, vids) -> None:
        """Withdraw a release (signal turned red before the vehicle committed)."""
        for vid in vids:
            i = self.index_of[int(vid)]
            self.released[i] = False
            self.role[i] = FREE

    # --------------------------------------------------------------------- step
    def _spawn_due(self, info: StepInfo) -> None:
        due = np.flatnonzero(self._heads <= self.now + 1e-9)
        for m in due:
            arr = self.arrivals[m]
            p = self._arr_ptr[m]
            while p < len(arr) and arr[p] <= self.now + 1e-9:
                idx = self.lane_indices(m)
                spawn_pos = -self.approach_length
                if len(idx):
                    last = idx[-1]
                    gap = self.pos[last] - self.length[last] - spawn_pos
                    if gap < self.dyn.min_headway:
                        break
                    v0 = min(self.dyn.v_max, safe_speed(gap, float(self.speed[last]), self.dyn.a_max,
                                                        self.dyn.min_headway, self.dt))
                else:
                    v0 = self.dyn.v_max
                if self.now - arr[p] > self.dt + 1e-9:
                    self.blocked_spawns += 1
                vid = self.add_vehicle(int(m), spawn_pos, v0)
                self.spawn_log.append((float(arr[p]), int(m), vid))
                self.spawned_total += 1
                info.spawned.append(vid)
                p += 1
            self._arr_ptr[m] = p
            self._heads[m] = arr[p] if p < len(arr) else math.inf
        backlog = sum(int(np.searchsorted(self.arrivals[m], self.now + 1e-9, side="right")) - int(self._arr_ptr[m])
                      for m in np.flatnonzero(self._heads <= self.now + 1e-9))
        self.max_spawn_backlog = max(self.max_spawn_backlog, backlog)
        self._next_arrival = float(self._heads.min()) if len(self._heads) else math.inf

    def step(self) -> StepInfo:
        info = StepInfo()
        if self.now + 1e-9 >= self._next_arrival:
            self._spawn_due(info)
        d, q = self.dyn, self.config.dqn
        out = self._out
        _step_kernel(self.n, self.mov, self.pos, self.speed, self.acc, self.length, self.amax,
                     self.role, self.released, self.passed, self.wait, self.fuel,
                     self.v_cross, self.traj_len, self.dt, d.v_max, d.min_headway, d.platoon_headway,
                     d.platoon_min_gap, d.k_v, d.k_g, d.wait_speed, self.fuel_b,
                     q.reward_bound, q.wait_threshold, d.retire_distance, out)
        self.step_index += 1
        self.now = self.step_index * self.dt
        if out[5] > self.max_abs_accel:
            self.max_abs_accel = float(out[5])
        if out[0] >= 0:
            i = int(out[0])
            raise SimulationFault("negative gap after integration", time=self.now, step=self.step_index,
                                  detail={"follower": int(self.vid[i]), "leader": int(self.vid[i - 1]),
                                          "movement": self.names[int(self.mov[i])]})
        info.active_released = int(out[2])
        info.reward = out[3] / out[4] if out[4] > 0 else None
        if out[1] > 0:
            self._retire(info)
        return info

    def _retire(self, info: StepInfo) -> None:
        k = self.n
        done = self.pos[:k] >= self.traj_len[self.mov[:k]] + self.dyn.retire_distance
        for i in np.flatnonzero(done):
            rec = TripRecord(int(self.vid[i]), self.names[int(self.mov[i])], float(self.entry_time[i]),
                             self.now, self.now - float(self.entry_time[i]), float(self.wait[i]),
                             float(self.fuel[i]), int(self.platoon_size[i]))
            info.retired.append(rec)
            self.trips.append(rec)
        self._reorder(np.flatnonzero(~done))

    def detect_collisions(self) -> list[tuple[int, int]]:
        """Vehicle-id pairs that overlap on a lane or crowd each other inside the zone."""
        pairs = _collision_kernel(self.n, self.mov, self.pos, self.length, self.route_table,
                                  self.conflict, self.geo.vehicle_width, 11)
        return [(int(self.vid[a]), int(self.vid[b])) for a, b in pairs]

    def upstream_waits(self) -> np.ndarray:
        k = self.n
        return self.wait[:k][self.pos[:k] < 0.0]

    @property
    def in_network(self) -> int:
        return self.n


def detect_collisions(world: World) -> list[tuple[int, int]]:
    return world.detect_collisions()
