"""Mean travel time and fuel of the fixed-size controller over a range of k.

    python scripts/fixed_size_sweep.py --sizes 1 3 6 9 12 --seeds 1001 1002 --scale 1.0
"""
import argparse
import statistics

from adaptive_platoon.config import ExperimentConfig
from adaptive_platoon.harness import run_episode


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[1, 2, 3, 4, 6, 9, 12, 20])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1001, 1002, 1003, 1004, 1005])
    ap.add_argument("--horizon", type=float, default=3600.0)
    ap.add_argument("--scale", type=float, default=1.0, help="multiply every lane flow")
    args = ap.parse_args()
    base = ExperimentConfig(horizon=args.horizon)
    cfg = ExperimentConfig(horizon=args.horizon, flows={k: v * args.scale for k, v in base.flows.items()})
    print("k,mean_travel_time,mean_fuel,trips,censored,decisions")
    for k in args.sizes:
        runs = [run_episode(cfg, f"fixed{k}", s) for s in args.seeds]
        tt = statistics.fmean(r.summary.mean_travel_time for r in runs)
        fuel = statistics.fmean(r.summary.mean_fuel for r in runs)
        print(f"{k},{tt:.3f},{fuel:.3f},{sum(len(r.trips) for r in runs)},"
              f"{sum(r.censored for r in runs)},{sum(len(r.decisions) for r in runs)}", flush=True)


if __name__ == "__main__":
    main()
