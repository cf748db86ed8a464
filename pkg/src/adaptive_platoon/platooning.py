"""Platoon formation math: time-to-join, feasible platoon size, role assignment."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence


class AlreadyJoined(Exception):
    """The follower already sits at (or inside) its platoon slot and never reaches it
    from behind under constant acceleration."""


class PlatoonError(ValueError):
    pass


def time_to_join(i: int, v_i: float, a_max_i: float, v_leader: float,
                 lengths_ahead: Sequence[float], d_h: float, d_1i: float) -> float:
    """Time for the i-th vehicle of a lane to close into its platoon slot.

    Solves ``v_i t + a t^2 / 2 + sum(lengths_ahead) + (i - 1) d_h = v_leader t + d_1i``
    for the smallest nonnegative t.  ``lengths_ahead`` holds the lengths of
    vehicles 1..i-1 and ``d_1i`` is the front-to-front distance from the first
    vehicle.  No speed cap is applied.
    """
    if i < 2:
        raise ValueError("time_to_join needs a follower position i >= 2")
    if a_max_i <= 0 or d_1i <= 0:
        raise ValueError("a_max_i and d_1i must be positive")
    if len(lengths_ahead) != i - 1:
        raise ValueError(f"expected {i - 1} leading lengths, got {len(lengths_ahead)}")
    qa = 0.5 * a_max_i
    qb = v_i - v_leader
    qc = sum(lengths_ahead) + (i - 1) * d_h - d_1i
    disc = qb * qb - 4.0 * qa * qc
    if disc < 0.0:
        if disc < -1e-12:
            raise AlreadyJoined(f"vehicle {i} is {qc:.3f} m inside its slot")
        disc = 0.0
    sq = math.sqrt(disc)
    # numerically stable pair of roots
    if qb >= 0:
        r1 = (-qb - sq) / (2.0 * qa)
        r2 = (2.0 * qc) / (-qb - sq) if (-qb - sq) != 0.0 else r1
    else:
        r2 = (-qb + sq) / (2.0 * qa)
        r1 = (2.0 * qc) / (-qb + sq)
    roots = sorted(r for r in (r1, r2) if r >= -1e-12)
    if not roots:
        raise AlreadyJoined(f"vehicle {i} is ahead of its slot and pulling away")
    return max(0.0, roots[0])


def platoon_length(lengths: Sequence[float], d_h: float) -> float:
    """Total length of a platoon of the given vehicles at headway ``d_h``."""
    return float(sum(lengths)) + (len(lengths) - 1) * d_h


def max_feasible_size(lengths: Sequence[float], d_h: float, control_zone: float) -> int:
    """Largest n (not above the queue length) whose platoon fits in the control zone."""
    if len(lengths) < 1:
        raise ValueError("need at least one queued vehicle")
    if lengths[0] > control_zone:
        raise PlatoonError(f"single vehicle ({lengths[0]} m) longer than control zone ({control_zone} m)")
    if all(l == lengths[0] for l in lengths):
        n = int(math.floor((control_zone + d_h) / (lengths[0] + d_h) + 1e-12))
        return min(n, len(lengths))
    total, n = 0.0, 0
    for k, l in enumerate(lengths):
        total += l + (d_h if k > 0 else 0.0)
        if total > control_zone:
            break
        n = k + 1
    return n


@dataclass
class Platoon:
    lane: int
    leader: int
    followers: tuple[int, ...]
    headway: float
    length: float
    target: bool = True     # False for companion-lane platoons

    @property
    def size(self) -> int:
        return 1 + len(self.followers)

    @property
    def members(self) -> tuple[int, ...]:
        return (self.leader, *self.followers)


def form_platoon(lane: int, n: int, queue_ids: Sequence[int], lengths: Sequence[float],
                 d_h: float, control_zone: float, target: bool = True) -> Platoon:
    """Group the first ``n`` queued vehicles (stop line first) into one platoon."""
    if n < 1:
        raise PlatoonError("platoon size must be at least 1")
    if n > len(queue_ids):
        raise PlatoonError(f"size {n} exceeds queue length {len(queue_ids)} on lane {lane}")
    feasible = max_feasible_size(lengths, d_h, control_zone)
    if n > feasible:
        raise PlatoonError(f"size {n} exceeds control-zone feasibility bound {feasible}")
    ids = tuple(int(v) for v in queue_ids[:n])
    return Platoon(lane, ids[0], ids[1:], d_h, platoon_length(lengths[:n], d_h), target)
