"""Level one: request protocol, FCFS queue, nonconflicting-lane selection and release.

Messages are plain in-process records.  The intersection manager (IM) runs one
decision epoch whenever the zone holds no active reservation and at least one
request is pending.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .geometry import ConflictMatrix
from .platooning import Platoon, form_platoon, max_feasible_size
from .simcore import FVA, LVA, World


class ProtocolError(RuntimeError):
    pass


class SchedulerFault(RuntimeError):
    pass


class NoPendingDemand(LookupError):
    pass


@dataclass(frozen=True)
class RequestMsg:
    vehicle_id: int
    position: float
    speed: float
    accel_limit: float
    movement: int
    timestamp: float


@dataclass(frozen=True)
class GrantMsg:
    vehicle_id: int          # the LVA
    issued_at: float
    departure_time: float
    platoon_size: int
    desired_speed: float

    def __post_init__(self):
        if self.departure_time < self.issued_at:
            raise ProtocolError("departure time precedes issuance")
        if self.platoon_size < 1:
            raise ProtocolError("platoon size must be >= 1")


@dataclass(frozen=True)
class JoinMsg:
    leader_id: int
    vehicle_id: int
    join: bool
    head_spacing: float
    follow_speed: float


@dataclass(frozen=True)
class DoneMsg:
    vehicle_id: int          # the LVA
    passed: bool
    time: float


# ------------------------------------------------------------------------ queue

class RequestQueue:
    """Per-lane FIFO of pending requests with a global (timestamp, lane) order."""

    def __init__(self, n_lanes: int = 12):
        self._lanes: list[list[tuple[float, int, RequestMsg]]] = [[] for _ in range(n_lanes)]
        self._where: dict[int, int] = {}
        self._seq = 0

    def __len__(self) -> int:
        return len(self._where)

    def __contains__(self, vehicle_id: int) -> bool:
        return vehicle_id in self._where

    def lane_length(self, lane: int) -> int:
        return len(self._lanes[lane])

    def lane_requests(self, lane: int) -> list[RequestMsg]:
        return [r for _, _, r in self._lanes[lane]]

    def register(self, msg: RequestMsg) -> "RequestQueue":
        if msg.vehicle_id in self._where:
            raise ProtocolError(f"vehicle {msg.vehicle_id} already registered")
        lane = msg.movement
        bisect.insort(self._lanes[lane], (msg.timestamp, self._seq, msg))
        self._seq += 1
        self._where[msg.vehicle_id] = lane
        return self

    def remove(self, vehicle_ids: Sequence[int]) -> None:
        drop = set(int(v) for v in vehicle_ids)
        lanes = {self._where.pop(v) for v in drop if v in self._where}
        for lane in lanes:
            self._lanes[lane] = [e for e in self._lanes[lane] if e[2].vehicle_id not in drop]

    def head(self, lane: int) -> RequestMsg | None:
        entries = self._lanes[lane]
        return entries[0][2] if entries else None

    def ordered(self) -> list[RequestMsg]:
        allreq = [(ts, lane, seq, r) for lane, entries in enumerate(self._lanes) for ts, seq, r in entries]
        return [e[3] for e in sorted(allreq, key=lambda e: (e[0], e[1], e[2]))]

    def nonempty_lanes(self) -> list[int]:
        return [lane for lane, entries in enumerate(self._lanes) if entries]


def register_request(msg: RequestMsg, q: RequestQueue) -> RequestQueue:
    return q.register(msg)


def identify_target_lane(q: RequestQueue) -> int:
    """Lane holding the globally earliest pending request (ties: canonical lane order)."""
    best: tuple[float, int] | None = None
    for lane in range(len(q._lanes)):
        h = q.head(lane)
        if h is not None and (best is None or (h.timestamp, lane) < best):
            best = (h.timestamp, lane)
    if best is None:
        raise NoPendingDemand("no pending demand")
    return best[1]


def select_nonconflicting_lanes(target: int, lane_waits: Mapping[int, float], cm: ConflictMatrix,
                                chooser: Callable[[list[int]], int] | None = None) -> list[int]:
    """Greedy repetition of the max-accumulated-wait rule under pairwise compatibility.

    ``lane_waits`` maps every lane with pending vehicles to the summed
    accumulated wait of those vehicles.  ``chooser`` replaces the argmax
    (used by the random-selection baseline); it receives the candidate lanes
    in canonical order.
    """
    chosen: list[int] = []
    group = [target]
    while True:
        candidates = [l for l in sorted(lane_waits) if l not in group and cm.compatible(l, group)]
        if not candidates:
            return chosen
        if chooser is None:
            # max() keeps the first maximum, i.e. canonical order on ties
            pick = max(candidates, key=lambda l: lane_waits[l])
        else:
            pick = chooser(candidates)
        chosen.append(pick)
        group.append(pick)


@dataclass
class Release:
    grants: list[GrantMsg]
    joins: list[JoinMsg]
    window: float            # estimated zone occupancy, s
    platoons: list[Platoon]


def occupancy_window(crossing_length: float, platoon_len: float, speed: float) -> float:
    """Time for a platoon moving at ``speed`` to fully traverse a crossing path."""
    return (crossing_length + platoon_len) / speed


def schedule_release(platoons: Sequence[Platoon], now: float, desired_speed: Mapping[int, float],
                     crossing_length: Mapping[int, float], cm: ConflictMatrix,
                     zone_busy: bool = False) -> Release:
    """Issue grants to every LVA and join messages to their FVAs."""
    if zone_busy:
        raise SchedulerFault("release attempted during an active reservation")
    lanes = [p.lane for p in platoons]
    for i, a in enumerate(lanes):
        for b in lanes[i + 1:]:
            if cm(a, b):
                raise SchedulerFault(f"lanes {a} and {b} conflict")
    grants, joins = [], []
    window = 0.0
    for p in platoons:
        v = desired_speed[p.lane]
        grants.append(GrantMsg(p.leader, now, now, p.size, v))
        joins.extend(JoinMsg(p.leader, f, True, p.headway, v) for f in p.followers)
        window = max(window, occupancy_window(crossing_length[p.lane], p.length, v))
    return Release(grants, joins, window, list(platoons))


# ------------------------------------------------------------------ IM runtime

@dataclass
class Decision:
    time: float
    target_lane: int
    size: int
    feasible: int
    companions: list[tuple[int, int]]        # (lane, platoon size)
    explored: bool = False
    window: float = 0.0


SizePolicy = Callable[[World, int, int], tuple[int, bool]]


@dataclass
class ProtocolTrace:
    enabled: bool = False
    lines: list[str] = field(default_factory=list)

    def log(self, t: float, kind: str, vehicle: int, payload: str = "") -> None:
        if self.enabled:
            self.lines.append(f"{t:.1f}\t{kind}\t{vehicle}\t{payload}")


class IntersectionManager:
    """Platoon-based reservation controller (FCFS target lane + companion lanes)."""

    _NEXT = {"requested": ("granted", "joined"), "granted": ("done",), "joined": ("done",)}

    def __init__(self, world: World, size_policy: SizePolicy, companion_mode: str = "greedy",
                 rng: np.random.Generator | None = None, trace: bool = False):
        if companion_mode not in ("greedy", "random"):
            raise ValueError(companion_mode)
        self.world = world
        self.cm = world.cm
        self.queue = RequestQueue(world.layout.n_movements)
        self.size_policy = size_policy
        self.companion_mode = companion_mode
        self.rng = rng
        self.trace = ProtocolTrace(trace)
        self.state: dict[int, str] = {}
        self.active: list[Platoon] = []
        self.decisions: list[Decision] = []
        self.done_msgs: list[DoneMsg] = []
        d = world.dyn
        self.d_h = d.platoon_headway
        self.zone_length = world.config.geometry.control_zone_radius
        self.desired = {m: float(world.v_cross[m]) for m in range(world.layout.n_movements)}
        self.crossing = {m: float(world.traj_len[m]) for m in range(world.layout.n_movements)}
        self._last_active = 0

    # ------------------------------------------------------------- protocol
    def _advance(self, vid: int, new: str) -> None:
        old = self.state.get(vid)
        if old is None or new not in self._NEXT.get(old, ()):
            raise ProtocolError(f"vehicle {vid}: illegal transition {old} -> {new}")
        self.state[vid] = new

    def on_spawn(self, vids: Sequence[int]) -> None:
        w = self.world
        for vid in vids:
            i = w.index_of[vid]
            msg = RequestMsg(vid, float(w.pos[i]), float(w.speed[i]), float(w.amax[i]), int(w.mov[i]), w.now)
            if vid in self.state:
                raise ProtocolError(f"vehicle {vid} sent a second request")
            self.queue.register(msg)
            self.state[vid] = "requested"
            self.trace.log(w.now, "REQUEST", vid, f"lane={msg.movement} v={msg.speed:.2f}")

    def _check_done(self) -> None:
        w = self.world
        still = []
        for p in self.active:
            if all(w.passed[w.index_of[v]] for v in p.members if v in w.index_of):
                msg = DoneMsg(p.leader, True, w.now)
                self.done_msgs.append(msg)
                for v in p.members:
                    self._advance(v, "done")
                self.trace.log(w.now, "DONE", p.leader, f"size={p.size}")
            else:
                still.append(p)
        self.active = still

    @property
    def zone_busy(self) -> bool:
        return bool(self.active)

    # ------------------------------------------------------------- decisions
    def lane_waits(self) -> dict[int, float]:
        w = self.world
        out = {}
        for lane in self.queue.nonempty_lanes():
            idx = [w.index_of[r.vehicle_id] for r in self.queue.lane_requests(lane)]
            out[lane] = float(w.wait[idx].sum())
        return out

    def lane_queue(self, lane: int) -> tuple[list[int], list[float]]:
        """Pending vehicle ids on ``lane`` (stop line first) and their lengths."""
        w = self.world
        idx = w.pending_indices(lane)
        return [int(v) for v in w.vid[idx]], [float(l) for l in w.length[idx]]

    def feasible_size(self, lane: int) -> int:
        ids, lengths = self.lane_queue(lane)
        if not ids:
            return 0
        return max_feasible_size(lengths, self.d_h, self.zone_length)

    def update(self, spawned: Sequence[int], active_released: int) -> Decision | None:
        """Process one step's messages; returns the decision if an epoch fired."""
        self.on_spawn(spawned)
        if self.active and active_released != self._last_active:
            self._check_done()
        if self.active and active_released == 0:
            self._check_done()
        self._last_active = active_released
        if self.active or len(self.queue) == 0:
            return None
        return self.decide()

    def decide(self) -> Decision:
        w = self.world
        target = identify_target_lane(self.queue)
        feasible = self.feasible_size(target)
        n, explored = self.size_policy(w, target, feasible)
        if not 1 <= n <= feasible:
            raise SchedulerFault(f"size policy returned {n} outside 1..{feasible}")
        waits = self.lane_waits()
        waits.pop(target, None)
        chooser = None
        if self.companion_mode == "random":
            rng = self.rng
            chooser = lambda cands: cands[int(rng.integers(len(cands)))]  # noqa: E731
        companions = select_nonconflicting_lanes(target, waits, self.cm, chooser)
        platoons = [self._form(target, n, True)]
        comp_sizes = []
        for lane in companions:
            k = min(n, self.feasible_size(lane))
            if k >= 1:
                platoons.append(self._form(lane, k, False))
                comp_sizes.append((lane, k))
        release = schedule_release(platoons, w.now, self.desired, self.crossing, self.cm,
                                   zone_busy=self.zone_busy)
        for g in release.grants:
            self._advance(g.vehicle_id, "granted")
            self.trace.log(w.now, "GRANT", g.vehicle_id,
                           f"size={g.platoon_size} depart={g.departure_time:.1f} v={g.desired_speed:.2f}")
        for j in release.joins:
            self._advance(j.vehicle_id, "joined")
            self.trace.log(w.now, "JOIN", j.vehicle_id,
                           f"leader={j.leader_id} spacing={j.head_spacing} v={j.follow_speed:.2f}")
        for p in platoons:
            w.release([p.leader], LVA, p.size)
            w.release(p.followers, FVA, p.size)
            self.queue.remove(p.members)
        self.active = platoons
        self._last_active = sum(p.size for p in platoons)
        dec = Decision(w.now, target, n, feasible, comp_sizes, explored, release.window)
        self.decisions.append(dec)
        return dec

    def _form(self, lane: int, n: int, target: bool) -> Platoon:
        ids, lengths = self.lane_queue(lane)
        return form_platoon(lane, n, ids, lengths, self.d_h, self.zone_length, target)


def fixed_size_policy(k: int) -> SizePolicy:
    def policy(world: World, lane: int, feasible: int) -> tuple[int, bool]:
        return min(k, feasible), False
    return policy
