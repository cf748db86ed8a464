"""Trip aggregation and method-comparison reports."""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .reservation import Decision
from .simcore import TripRecord

SCHEMA_VERSION = 1

# published reference values: (mean travel time s, fuel mL/veh)
REFERENCE = {
    "webster": (110.87, 126.03),
    "fcfs_individual": (134.16, 116.74),
    "fixed3": (108.18, 100.61),
    "fixed6": (74.42, 95.89),
    "fixed9": (84.85, 104.22),
    "fixed12": (104.86, 113.64),
    "random_nonconflicting": (72.42, 90.91),
    "proposed": (69.87, 89.29),
}
METHOD_ORDER = tuple(REFERENCE)


@dataclass(frozen=True)
class SummaryStats:
    n_trips: int
    mean_travel_time: float | None
    median_travel_time: float | None
    p95_travel_time: float | None
    mean_fuel: float | None
    mean_wait: float | None
    platoon_histogram: dict[int, int] = field(default_factory=dict)     # target-lane releases
    companion_histogram: dict[int, int] = field(default_factory=dict)
    censored: int = 0                 # still in the network at the horizon
    note: str = ""

    @property
    def empty(self) -> bool:
        return self.n_trips == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["platoon_histogram"] = {str(k): v for k, v in sorted(self.platoon_histogram.items())}
        d["companion_histogram"] = {str(k): v for k, v in sorted(self.companion_histogram.items())}
        return d

    def to_json(self) -> str:
        return json.dumps({"schema_version": SCHEMA_VERSION, **self.to_dict()}, sort_keys=True, indent=2)


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def summarize(trips: Iterable[TripRecord], decisions: Iterable[Decision] = (),
              censored: int = 0) -> SummaryStats:
    """Aggregate completed trips; histograms come from the decision trace."""
    trips = list(trips)
    hist: dict[int, int] = {}
    comp: dict[int, int] = {}
    for d in decisions:
        hist[d.size] = hist.get(d.size, 0) + 1
        for _, k in d.companions:
            comp[k] = comp.get(k, 0) + 1
    if not trips:
        return SummaryStats(0, None, None, None, None, None, hist, comp, censored,
                            note="no completed trips")
    tt = sorted(t.travel_time for t in trips)
    fuel = sorted(t.fuel for t in trips)
    wait = sorted(t.wait_time for t in trips)
    return SummaryStats(
        n_trips=len(trips),
        mean_travel_time=_mean(tt),
        median_travel_time=float(statistics.median(tt)),
        p95_travel_time=float(np.percentile(np.asarray(tt), 95)),
        mean_fuel=_mean(fuel),
        mean_wait=_mean(wait),
        platoon_histogram=dict(sorted(hist.items())),
        companion_histogram=dict(sorted(comp.items())),
        censored=censored,
    )


def histogram_csv(hist: Mapping[int, int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["size", "count"])
    for k in sorted(hist):
        w.writerow([k, hist[k]])
    return buf.getvalue()


def modal_size(hist: Mapping[int, int]) -> int | None:
    if not hist:
        return None
    return min(hist, key=lambda k: (-hist[k], k))


@dataclass(frozen=True)
class ReportRow:
    method: str
    n_runs: int
    travel_time: float
    travel_time_sd: float
    fuel: float
    fuel_sd: float
    censored: float
    reference_travel_time: float | None
    reference_fuel: float | None


@dataclass(frozen=True)
class ComparisonReport:
    rows: tuple[ReportRow, ...]

    def row(self, method: str) -> ReportRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "runs", "travel_time_s", "travel_time_sd", "fuel_mL_per_veh",
                    "fuel_sd", "censored", "reference_travel_time_s", "reference_fuel_mL"])
        for r in self.rows:
            w.writerow([r.method, r.n_runs, f"{r.travel_time:.3f}", f"{r.travel_time_sd:.3f}",
                        f"{r.fuel:.3f}", f"{r.fuel_sd:.3f}", f"{r.censored:.1f}",
                        "" if r.reference_travel_time is None else f"{r.reference_travel_time:.2f}",
                        "" if r.reference_fuel is None else f"{r.reference_fuel:.2f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"schema_version": SCHEMA_VERSION, "rows": [asdict(r) for r in self.rows]},
                          sort_keys=True, indent=2)

    def to_text(self) -> str:
        head = ("method", "TT (s)", "sd", "fuel (mL)", "sd", "ref TT", "ref fuel")
        body = [(r.method, f"{r.travel_time:.2f}", f"{r.travel_time_sd:.2f}", f"{r.fuel:.2f}",
                 f"{r.fuel_sd:.2f}",
                 "-" if r.reference_travel_time is None else f"{r.reference_travel_time:.2f}",
                 "-" if r.reference_fuel is None else f"{r.reference_fuel:.2f}") for r in self.rows]
        widths = [max(len(x[i]) for x in [head, *body]) for i in range(len(head))]
        fmt = lambda cells: "  ".join(c.ljust(wd) if i == 0 else c.rjust(wd)  # noqa: E731
                                      for i, (c, wd) in enumerate(zip(cells, widths)))
        lines = [fmt(head), fmt(tuple("-" * wd for wd in widths))] + [fmt(b) for b in body]
        return "\n".join(lines) + "\n"


def compare(runs: Mapping[str, SummaryStats | Sequence[SummaryStats]]) -> ComparisonReport:
    """One row per method; multiple summaries per method are averaged (sd across runs)."""
    if len(runs) < 2:
        raise ValueError("compare needs at least two methods")
    order = sorted(runs, key=lambda m: (METHOD_ORDER.index(m) if m in METHOD_ORDER else len(METHOD_ORDER), m))
    rows = []
    for method in order:
        items = runs[method]
        stats = [items] if isinstance(items, SummaryStats) else list(items)
        stats = [s for s in stats if not s.empty]
        if not stats:
            raise ValueError(f"method {method!r} has no completed trips")
        tt = [s.mean_travel_time for s in stats]
        fu = [s.mean_fuel for s in stats]
        ref = REFERENCE.get(method)
        rows.append(ReportRow(method, len(stats), _mean(tt), _sd(tt), _mean(fu), _sd(fu),
                              _mean([float(s.censored) for s in stats]),
                              None if ref is None else ref[0], None if ref is None else ref[1]))
    return ComparisonReport(tuple(rows))


def _sd(values: Sequence[float]) -> float:
    return float(statistics.stdev(values)) if len(values) > 1 else 0.0
