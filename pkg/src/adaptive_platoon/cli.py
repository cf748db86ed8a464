"""``aimctl`` command-line entry point."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from .config import CONTROLLERS, ConfigError, ExperimentConfig, parse_override
from .drl import ArchitectureMismatch, TrainingFault, encode_state
from .geometry import ConflictMatrix, build_layout
from .harness import (SafetyViolation, compare_all, evaluate, output_root, run_episode,
                      train, trips_csv)
from .reservation import NoPendingDemand, identify_target_lane

EXIT_OK, EXIT_CONFIG, EXIT_SAFETY, EXIT_TRAINING = 0, 1, 2, 3


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = dict(parse_override(s) for s in args.set or [])
    if getattr(args, "controller", None):
        overrides["controller"] = args.controller
    return cfg.with_overrides(overrides) if overrides else cfg


def _seeds(args, cfg: ExperimentConfig) -> tuple[int, ...]:
    return tuple(args.seeds) if args.seeds else cfg.eval_seeds


def cmd_train(args) -> int:
    cfg = _config(args)
    res = train(cfg, Path(args.out) if args.out else None, args.episodes,
                progress=lambda r: print(f"episode {r['episode']}: decisions={r['decisions']} "
                                         f"reward={r['mean_reward']:.4f} tt={r['mean_travel_time']}", flush=True))
    print(f"checkpoint: {res.checkpoint}")
    return EXIT_OK


def _print_runs(results) -> None:
    for r in results:
        s = r.summary
        print(f"{r.controller} seed={r.seed} trips={s.n_trips} travel_time={s.mean_travel_time:.2f} "
              f"fuel={s.mean_fuel:.2f} censored={s.censored}")


def _out_dir(args, cfg) -> Path:
    return Path(args.out) if getattr(args, "out", None) else output_root(cfg)


def cmd_eval(args) -> int:
    cfg = _config(args)
    results = evaluate(cfg, Path(args.checkpoint) if args.checkpoint else None, _seeds(args, cfg),
                       bundle_dir=_out_dir(args, cfg))
    _print_runs(results)
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _config(args)
    if cfg.controller in ("proposed", "random_nonconflicting"):
        raise ConfigError("use `eval` for DQN-driven controllers")
    results = evaluate(cfg, None, _seeds(args, cfg), bundle_dir=_out_dir(args, cfg))
    _print_runs(results)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for r in results:
            (out / f"{r.controller}_seed{r.seed}.csv").write_text(trips_csv(r.trips))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    report, out = compare_all(cfg, Path(args.checkpoint) if args.checkpoint else None,
                              Path(args.out) if args.out else None, _seeds(args, cfg),
                              workers=args.workers)
    sys.stdout.write(report.to_text())
    print(f"artifacts: {out}")
    return EXIT_OK


def cmd_dump_conflicts(args) -> int:
    cfg = _config(args)
    cm = ConflictMatrix.from_layout(build_layout(cfg.geometry), cfg.geometry.conflict_threshold)
    text = cm.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def state_csv(state: np.ndarray, lane_names) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = ("occupancy", "speed", "time_to_join", "target")
    w.writerow(["channel", "lane", *range(state.shape[2])])
    for c in range(state.shape[0]):
        for lane in range(state.shape[1]):
            w.writerow([names[c], lane_names[lane], *(f"{v:.4g}" for v in state[c, lane])])
    return buf.getvalue()


def cmd_dump_state(args) -> int:
    cfg = _config(args)
    if cfg.controller in ("proposed", "random_nonconflicting"):
        cfg = cfg.with_overrides({"controller": "fixed6"})
    cfg = cfg.with_overrides({"horizon": args.time})
    captured = {}

    def grab(world, ctl):
        captured["world"], captured["ctl"] = world, ctl

    seed = args.seeds[0] if args.seeds else cfg.eval_seeds[0]
    run_episode(cfg, cfg.controller, seed, on_step=grab)
    world, ctl = captured["world"], captured["ctl"]
    lane = 0
    if hasattr(ctl, "im"):
        try:
            lane = identify_target_lane(ctl.im.queue)
        except NoPendingDemand:
            pass
    text = state_csv(encode_state(world, lane), world.names)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aimctl", description="Adaptive platoon intersection control experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, controller=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. dqn.gamma=0.95 (repeatable)")
        if controller:
            sp.add_argument("--controller", choices=CONTROLLERS)
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--out")

    sp = sub.add_parser("train", help="train the DQN size policy")
    common(sp)
    sp.add_argument("--episodes", type=int)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("baseline", help="run a non-learning controller")
    common(sp)
    sp.set_defaults(fn=cmd_baseline)

    sp = sub.add_parser("compare", help="run every method and write the comparison report")
    common(sp, controller=False)
    sp.add_argument("--checkpoint")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(fn=cmd_compare)

    sp = sub.add_parser("dump-conflicts", help="write the movement conflict matrix as CSV")
    common(sp, controller=False)
    sp.set_defaults(fn=cmd_dump_conflicts)

    sp = sub.add_parser("dump-state", help="write one encoded state as CSV grids")
    common(sp)
    sp.add_argument("--time", type=float, default=300.0, help="simulated seconds before the snapshot")
    sp.set_defaults(fn=cmd_dump_state)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ArchitectureMismatch, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SafetyViolation as exc:
        print(f"safety violation: {exc}", file=sys.stderr)
        return EXIT_SAFETY
    except TrainingFault as exc:
        print(f"training fault: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
