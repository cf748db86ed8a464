"""Comparison controllers: fixed-time signals, per-vehicle tile reservation, and
fixed-size / random-companion variants of the platoon controller."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numba
import numpy as np

from .config import SignalConfig
from .reservation import Decision, IntersectionManager, SizePolicy, fixed_size_policy
from .simcore import FREE, StepInfo, World, _route_xy, _stop_speed


class SaturationWarning(UserWarning):
    pass


class Controller:
    """Anything that reacts to a finished simulation step."""

    name = "controller"

    def __init__(self, world: World):
        self.world = world
        self.decisions: list[Decision] = []

    def on_step(self, info: StepInfo) -> None:
        raise NotImplementedError


# ------------------------------------------------------------------- signals

PHASES = (("NS", "NW", "SN", "SE"), ("NE", "SW"), ("EW", "EN", "WE", "WS"), ("ES", "WN"))


@dataclass(frozen=True)
class SignalPlan:
    phases: tuple[tuple[str, ...], ...]
    greens: tuple[float, ...]
    lost_time: float              # per phase
    cycle: float
    flow_ratio: float             # Y
    saturated: bool

    def phase_at(self, t: float) -> tuple[int, bool]:
        """(phase index, green?) at time ``t``."""
        u = t % self.cycle
        for i, g in enumerate(self.greens):
            if u < g:
                return i, True
            u -= g
            if u < self.lost_time:
                return i, False
            u -= self.lost_time
        return len(self.greens) - 1, False


def webster_timing(phase_ratios: Sequence[float], lost_time: float, min_cycle: float = 30.0,
                   max_cycle: float = 120.0) -> tuple[float, tuple[float, ...], bool]:
    """Cycle length and greens from critical flow ratios; ``lost_time`` is the total L_t."""
    y = np.asarray(phase_ratios, dtype=np.float64)
    big_y = float(y.sum())
    saturated = big_y >= 0.95
    if saturated:
        warnings.warn(f"critical flow ratio Y={big_y:.3f} >= 0.95; cycle clamped to {max_cycle:.0f} s",
                      SaturationWarning, stacklevel=2)
        cycle = max_cycle
    else:
        cycle = min(max((1.5 * lost_time + 5.0) / (1.0 - big_y), min_cycle), max_cycle)
    effective = cycle - lost_time
    if big_y > 0:
        greens = tuple(float(v) for v in y / big_y * effective)
    else:
        greens = tuple(effective / len(y) for _ in y)
    return cycle, greens, saturated


def webster_plan(flows: Mapping[str, float], signal: SignalConfig | None = None,
                 phases: Sequence[Sequence[str]] = PHASES) -> SignalPlan:
    sc = signal or SignalConfig()
    ratios = [max(flows.get(m, 0.0) for m in ph) / sc.saturation_flow for ph in phases]
    lost_total = sc.lost_time_per_phase * len(phases)
    cycle, greens, saturated = webster_timing(ratios, lost_total, sc.min_cycle, sc.max_cycle)
    return SignalPlan(tuple(tuple(p) for p in phases), greens, sc.lost_time_per_phase, cycle,
                      float(sum(ratios)), saturated)


class SignalController(Controller):
    """Fixed-time round robin.  A lane is open while its phase is green and no
    conflicting vehicle released earlier is still in the zone.  When a lane
    closes, vehicles that can still stop at the line are held again."""

    name = "webster"

    def __init__(self, world: World, plan: SignalPlan):
        super().__init__(world)
        self.plan = plan
        idx = {n: i for i, n in enumerate(world.names)}
        self.phase_lanes = [[idx[m] for m in ph] for ph in plan.phases]

    def _committed(self, i: int) -> bool:
        w = self.world
        if w.pos[i] >= 0.0:
            return True
        a, dt = float(w.amax[i]), w.dt
        return _stop_speed(-float(w.pos[i]), a, dt) < float(w.speed[i]) - a * dt

    def on_step(self, info: StepInfo) -> None:
        w = self.world
        phase, green = self.plan.phase_at(w.now)
        k = w.n
        active = w.released[:k] & ~w.passed[:k]
        busy = set(int(m) for m in w.mov[:k][active])
        open_lanes = set()
        if green:
            for lane in self.phase_lanes[phase]:
                if not any(w.conflict[lane, m] for m in busy):
                    open_lanes.add(lane)
        for lane in range(len(w.names)):
            idx = w.lane_indices(lane)
            if lane in open_lanes:
                w.release([int(v) for v in w.vid[idx][~w.released[idx]]], FREE, 0)
            else:
                drop = [int(w.vid[i]) for i in idx if w.released[i] and not w.passed[i]
                        and not self._committed(i)]
                if drop:
                    w.revoke(drop)


# ------------------------------------------------------- tile reservation FCFS

# not disk-cached: the cache key ignores edits to the imported ``_route_xy``
@numba.njit
def _plan_tiles(x, v, a, m, vc, tl, dt, v_max, length, rt, half_zone, tile, ntile, half_w,
                samples, max_steps):
    """Occupied tiles per future step of a lone released vehicle.

    Returns a (steps, ntile*ntile) boolean array, or a (0, ...) array when the
    vehicle would not clear the zone within ``max_steps``.
    """
    occ = np.zeros((max_steps, ntile * ntile), dtype=np.bool_)
    for k in range(max_steps):
        v_new = v + a * dt
        if v_new > v_max:
            v_new = v_max
        if x < 0.0:
            cap = math.sqrt(vc * vc + 2.0 * a * (-x))
            if cap < v_new:
                v_new = cap
        elif x <= tl:
            if vc < v_new:
                v_new = vc
        lo = v - a * dt
        if v_new < lo:
            v_new = lo
        if v_new < 0.0:
            v_new = 0.0
        x = x + v_new * dt
        v = v_new
        if x - length > tl:
            return occ[:k + 1]
        if x > -half_w:
            for s in range(samples):
                px, py = _route_xy(rt, m, x - length * s / (samples - 1))
                c0 = int(math.floor((px - half_w + half_zone) / tile))
                c1 = int(math.floor((px + half_w + half_zone) / tile))
                r0 = int(math.floor((py - half_w + half_zone) / tile))
                r1 = int(math.floor((py + half_w + half_zone) / tile))
                for c in range(max(c0, 0), min(c1, ntile - 1) + 1):
                    for r in range(max(r0, 0), min(r1, ntile - 1) + 1):
                        occ[k, r * ntile + c] = True
    return occ[:0]


@numba.njit(cache=True)
def _try_reserve(owner, stamp, start, occ, buffer, vid):
    """Claim ``occ`` (step k -> absolute slice start+k, widened by ``buffer``) if free."""
    h = owner.shape[0]
    steps, ntiles = occ.shape
    for k in range(-buffer, steps + buffer):
        s = start + k
        row = s % h
        if stamp[row] != s:
            continue
        for t in range(ntiles):
            if owner[row, t] < 0:
                continue
            for d in range(-buffer, buffer + 1):
                j = k + d
                if 0 <= j < steps and occ[j, t]:
                    return False
    for k in range(-buffer, steps + buffer):
        s = start + k
        row = s % h
        if stamp[row] != s:
            stamp[row] = s
            owner[row, :] = -1
        for t in range(ntiles):
            claim = False
            for d in range(-buffer, buffer + 1):
                j = k + d
                if 0 <= j < steps and occ[j, t]:
                    claim = True
                    break
            if claim:
                owner[row, t] = vid
    return True


class TileReservationController(Controller):
    """Individual vehicles reserve (tile, time-slice) cells along their path, FCFS."""

    name = "fcfs_individual"

    def __init__(self, world: World, time_buffer: float = 0.3, horizon_slices: int = 2048,
                 audit: bool = False):
        super().__init__(world)
        g = world.geo
        self.tile = g.lane_width
        self.ntile = int(round(g.intersection_zone_side / g.lane_width))
        self.half_zone = g.intersection_zone_side / 2.0
        self.buffer = int(round(time_buffer / world.dt))
        self.owner = -np.ones((horizon_slices, self.ntile * self.ntile), dtype=np.int64)
        self.stamp = -np.ones(horizon_slices, dtype=np.int64)
        self.max_steps = horizon_slices // 2
        self.grants = 0
        self.denials = 0
        # (vehicle id, first slice, occupancy) of every grant, kept only when auditing
        self.claims: list[tuple[int, int, np.ndarray]] | None = [] if audit else None

    def plan(self, i: int) -> np.ndarray:
        w = self.world
        m = int(w.mov[i])
        return _plan_tiles(float(w.pos[i]), float(w.speed[i]), float(w.amax[i]), m,
                           float(w.v_cross[m]), float(w.traj_len[m]), w.dt, w.dyn.v_max,
                           float(w.length[i]), w.route_table, self.half_zone, self.tile, self.ntile,
                           w.geo.vehicle_width / 2.0, 11, self.max_steps)

    def candidates(self) -> list[int]:
        """Head pending vehicle of each lane whose predecessor has cleared the zone."""
        w = self.world
        out = []
        for lane in range(len(w.names)):
            idx = w.lane_indices(lane)
            pend = idx[~w.released[idx]]
            if len(pend) == 0:
                continue
            head = int(pend[0])
            ahead = idx[idx < head]
            if len(ahead) and not w.passed[ahead[-1]]:
                continue
            out.append(head)
        out.sort(key=lambda i: (w.entry_time[i], int(w.mov[i])))
        return out

    def on_step(self, info: StepInfo) -> None:
        w = self.world
        for i in self.candidates():
            occ = self.plan(i)
            if len(occ) == 0:
                self.denials += 1
                continue
            if _try_reserve(self.owner, self.stamp, w.step_index + 1, occ, self.buffer, int(w.vid[i])):
                w.release([int(w.vid[i])], FREE, 0)
                self.grants += 1
                if self.claims is not None:
                    self.claims.append((int(w.vid[i]), w.step_index + 1, occ))
            else:
                self.denials += 1


def audit_claims(claims) -> tuple[int, int, int, int] | None:
    """First (slice, tile, first owner, second owner) booked twice, or None."""
    book: dict[tuple[int, int], int] = {}
    for vid, start, occ in claims:
        for k, t in zip(*np.nonzero(occ)):
            key = (start + int(k), int(t))
            if key in book:
                return key[0], key[1], book[key], vid
            book[key] = vid
    return None


# --------------------------------------------------------- platoon variants

class PlatoonController(Controller):
    """Two-level platoon controller with a pluggable size policy."""

    name = "platoon"

    def __init__(self, world: World, size_policy: SizePolicy, companion_mode: str = "greedy",
                 rng: np.random.Generator | None = None, trace: bool = False):
        super().__init__(world)
        self.im = IntersectionManager(world, size_policy, companion_mode, rng, trace)
        self.decisions = self.im.decisions

    def on_step(self, info: StepInfo) -> None:
        self.im.update(info.spawned, info.active_released)


def fixed_size_controller(world: World, k: int) -> PlatoonController:
    if k < 1:
        raise ValueError("platoon size must be >= 1")
    c = PlatoonController(world, fixed_size_policy(k))
    c.name = f"fixed{k}"
    return c


def random_nonconflicting_controller(world: World, size_policy: SizePolicy,
                                     rng: np.random.Generator) -> PlatoonController:
    c = PlatoonController(world, size_policy, "random", rng)
    c.name = "random_nonconflicting"
    return c
