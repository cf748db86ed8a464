"""Episode, training and comparison orchestration."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .baselines import (Controller, PlatoonController, SaturationWarning, SignalController,
                        TileReservationController, audit_claims, fixed_size_controller,
                        random_nonconflicting_controller, webster_plan)
from .config import CONTROLLERS, ExperimentConfig
from .drl import (DQNAgent, Experience, TrainingFault, encode_state, load_checkpoint, network_for,
                  save_checkpoint)
from .metrics import ComparisonReport, SummaryStats, compare, histogram_csv, summarize
from .reservation import Decision, NoPendingDemand, identify_target_lane
from .simcore import TRIP_FIELDS, SimulationFault, TripRecord, World, trip_rows

log = logging.getLogger(__name__)

OUTPUT_ENV = "AIMCTL_OUTPUT_ROOT"


class SafetyViolation(RuntimeError):
    def __init__(self, message: str, bundle: Path | None = None):
        super().__init__(message if bundle is None else f"{message} (reproducer: {bundle})")
        self.bundle = bundle


def output_root(config: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV, config.output_dir))


def episode_streams(seed: int, episode: int = 0) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (arrivals, controller) generators; demand never depends on the controller."""
    arr, ctl = np.random.SeedSequence([seed, episode]).spawn(2)
    return np.random.default_rng(arr), np.random.default_rng(ctl)


# ---------------------------------------------------------------- DQN policy

class DQNSizePolicy:
    """Size policy backed by a DQN agent.  Turns consecutive decisions into
    experiences whose reward is the mean per-step reward in between."""

    def __init__(self, agent: DQNAgent, learn: bool, epsilon: float | None = None):
        self.agent = agent
        self.learn = learn
        self.epsilon = epsilon
        self.world: World | None = None
        self._pending: tuple[np.ndarray, int] | None = None
        self._rsum = 0.0
        self._rcount = 0
        self.rewards: list[float] = []
        self.losses: list[float] = []
        self.explored = 0
        self.actions = 0

    def reset(self, world: World) -> None:
        self.world = world
        self._pending = None
        self._rsum, self._rcount = 0.0, 0

    def add_step_reward(self, r: float | None) -> None:
        self._rsum += self.world.config.dqn.reward_bound if r is None else r
        self._rcount += 1

    def _close(self, next_state: np.ndarray, next_feasible: int, terminal: bool) -> None:
        if self._pending is None:
            return
        s, a = self._pending
        r = self._rsum / self._rcount if self._rcount else self.world.config.dqn.reward_bound
        self.rewards.append(r)
        if self.learn:
            self.agent.remember(Experience(s, a, r, next_state, next_feasible, terminal))
            loss = self.agent.learn()
            if loss is not None:
                self.losses.append(loss)
        self._pending = None
        self._rsum, self._rcount = 0.0, 0

    def __call__(self, world: World, lane: int, feasible: int) -> tuple[int, bool]:
        s = encode_state(world, lane)
        self._close(s, feasible, False)
        a, explored = self.agent.act(s, feasible, self.epsilon)
        self._pending = (s, a)
        self.explored += int(explored)
        self.actions += 1
        return a, explored

    def finish(self, im_queue) -> None:
        """Horizon reached: store the terminal transition."""
        if self._pending is None:
            return
        try:
            lane = identify_target_lane(im_queue)
        except NoPendingDemand:
            lane = 0
        self._close(encode_state(self.world, lane), 0, True)


# ------------------------------------------------------------------ episodes

@dataclass
class EpisodeResult:
    controller: str
    seed: int
    trips: list[TripRecord]
    decisions: list[Decision]
    summary: SummaryStats
    spawned: int
    censored: int
    blocked_spawns: int
    arrival_digest: str
    rewards: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    explored: int = 0
    actions: int = 0
    steps: int = 0

    @property
    def mean_reward(self) -> float:
        return math.fsum(self.rewards) / len(self.rewards) if self.rewards else float("nan")


def arrival_digest(world: World) -> str:
    h = hashlib.sha256()
    for arr in world.arrivals:
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(b"|")
    return h.hexdigest()


def build_controller(name: str, world: World, config: ExperimentConfig, rng: np.random.Generator,
                     policy: DQNSizePolicy | None = None, audit: bool = False) -> Controller:
    if name == "webster":
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", SaturationWarning)
            plan = webster_plan(config.flows, config.signal)
        for w in caught:
            log.warning("%s", w.message)
        return SignalController(world, plan)
    if name == "fcfs_individual":
        return TileReservationController(world, audit=audit)
    if name.startswith("fixed"):
        return fixed_size_controller(world, int(name[5:]))
    if name in ("proposed", "random_nonconflicting"):
        if policy is None:
            raise ValueError(f"controller {name!r} needs a DQN policy")
        policy.reset(world)
        if name == "proposed":
            c = PlatoonController(world, policy)
            c.name = "proposed"
            return c
        return random_nonconflicting_controller(world, policy, rng)
    raise ValueError(f"unknown controller {name!r}; choose from {CONTROLLERS}")


def zone_conflicts(world: World) -> list[tuple[int, int]]:
    """Conflicting movement pairs that are simultaneously released and uncleared."""
    k = world.n
    moves = sorted(set(int(m) for m in world.mov[:k][world.released[:k] & ~world.passed[:k]]))
    return [(a, b) for i, a in enumerate(moves) for b in moves[i + 1:] if world.conflict[a, b]]


def _abort(config: ExperimentConfig, controller: str, seed: int, world: World, message: str,
           detail: dict, bundle_dir: Path | None) -> SafetyViolation:
    bundle = None
    if bundle_dir is not None:
        bundle_dir.mkdir(parents=True, exist_ok=True)
        bundle = bundle_dir / f"abort_{controller}_{seed}_{world.step_index}.json"
        bundle.write_text(json.dumps({"message": message, "controller": controller, "seed": seed,
                                      "step": world.step_index, "time": world.now, "detail": detail,
                                      "config": config.to_dict()}, sort_keys=True, indent=2, default=str))
    return SafetyViolation(f"{controller} seed={seed} step={world.step_index}: {message}", bundle)


def run_episode(config: ExperimentConfig, controller: str, seed: int, *, episode: int = 0,
                policy: DQNSizePolicy | None = None, check_safety: bool = True,
                bundle_dir: Path | None = None,
                on_step: Callable[[World, Controller], None] | None = None) -> EpisodeResult:
    """Simulate one horizon under ``controller``; aborts on any safety breach."""
    arr_rng, ctl_rng = episode_streams(seed, episode)
    world = World(config, arr_rng)
    ctl = build_controller(controller, world, config, ctl_rng, policy, audit=check_safety)
    exclusive = controller != "fcfs_individual"
    n_steps = int(round(config.horizon / config.dynamics.dt))
    while world.step_index < n_steps:
        try:
            info = world.step()
        except SimulationFault as exc:
            raise _abort(config, controller, seed, world, str(exc), exc.detail, bundle_dir) from exc
        if policy is not None:
            policy.add_step_reward(info.reward)
        ctl.on_step(info)
        if check_safety:
            pairs = world.detect_collisions()
            if pairs:
                raise _abort(config, controller, seed, world, "collision", {"pairs": pairs}, bundle_dir)
            if exclusive:
                bad = zone_conflicts(world)
                if bad:
                    raise _abort(config, controller, seed, world, "zone exclusivity",
                                 {"movements": bad}, bundle_dir)
        if on_step is not None:
            on_step(world, ctl)
    if isinstance(ctl, TileReservationController) and ctl.claims is not None:
        clash = audit_claims(ctl.claims)
        if clash is not None:
            raise _abort(config, controller, seed, world, "tile double-booked",
                         dict(zip(("slice", "tile", "first", "second"), clash)), bundle_dir)
    if policy is not None and isinstance(ctl, PlatoonController):
        policy.finish(ctl.im.queue)
    summary = summarize(world.trips, ctl.decisions, censored=world.n)
    return EpisodeResult(
        controller=controller, seed=seed, trips=list(world.trips), decisions=list(ctl.decisions),
        summary=summary, spawned=world.spawned_total, censored=world.n,
        blocked_spawns=world.blocked_spawns, arrival_digest=arrival_digest(world),
        rewards=list(policy.rewards) if policy else [], losses=list(policy.losses) if policy else [],
        explored=policy.explored if policy else 0, actions=policy.actions if policy else 0,
        steps=world.step_index,
    )


# --------------------------------------------------------------- manifests

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    code_version: str
    overrides: dict = field(default_factory=dict)
    episodes: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    files: dict[str, str] = field(default_factory=dict)      # relative path -> sha256

    def add_file(self, root: Path, path: Path) -> None:
        self.files[str(path.relative_to(root))] = _sha256(path)

    def write(self, root: Path) -> Path:
        path = root / "manifest.json"
        path.write_text(json.dumps(asdict(self), sort_keys=True, indent=2) + "\n")
        return path

    @classmethod
    def read(cls, root: Path) -> "RunManifest":
        return cls(**json.loads((root / "manifest.json").read_text()))

    def verify(self, root: Path, config: ExperimentConfig) -> list[str]:
        problems = []
        if config.config_hash() != self.config_hash:
            problems.append("config hash mismatch")
        for rel, digest in self.files.items():
            p = root / rel
            if not p.exists():
                problems.append(f"missing {rel}")
            elif _sha256(p) != digest:
                problems.append(f"digest mismatch {rel}")
        return problems


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def trips_csv(trips: Sequence[TripRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIP_FIELDS)
    w.writerows(trip_rows(list(trips)))
    return buf.getvalue()


# ------------------------------------------------------------------ training

TRAIN_LOG_FIELDS = ("episode", "decisions", "mean_reward", "mean_loss", "epsilon", "explored_fraction",
                    "mean_travel_time")


@dataclass
class TrainResult:
    checkpoint: Path
    log_rows: list[dict]
    agent: DQNAgent
    manifest: RunManifest


def make_agent(config: ExperimentConfig) -> DQNAgent:
    init_ss, act_ss = np.random.SeedSequence([config.seed, 7919]).spawn(2)
    return DQNAgent(network_for(config, np.random.default_rng(init_ss)), config.dqn,
                    np.random.default_rng(act_ss))


def train(config: ExperimentConfig, out_dir: Path | None = None, episodes: int | None = None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the DQN loop over ``episodes`` (default M) episodes, keeping θ and replay throughout."""
    if config.controller not in ("proposed", "random_nonconflicting"):
        raise ValueError("training needs controller 'proposed' or 'random_nonconflicting'")
    out = Path(out_dir) if out_dir is not None else output_root(config) / f"train_{config.config_hash()}"
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    agent = make_agent(config)
    hp = {"epsilon": config.dqn.epsilon, "gamma": config.dqn.gamma, "lr": config.dqn.learning_rate,
          "target_sync": config.dqn.target_sync, "config_hash": config.config_hash()}
    manifest = RunManifest(config.config_hash(), config.seed, __version__)
    ckpt = out / "checkpoint.qnet"
    rows = []
    m = config.dqn.episodes if episodes is None else episodes
    for ep in range(1, m + 1):
        policy = DQNSizePolicy(agent, learn=True)
        try:
            res = run_episode(config, config.controller, config.seed, episode=ep, policy=policy,
                              bundle_dir=out)
        except TrainingFault as exc:
            _write(out / f"training_fault_ep{ep}.json", json.dumps(exc.diagnostics, indent=2, default=str))
            raise
        row = {"episode": ep, "decisions": res.actions,
               "mean_reward": res.mean_reward,
               "mean_loss": float(np.mean(res.losses)) if res.losses else float("nan"),
               "epsilon": config.dqn.epsilon,
               "explored_fraction": res.explored / res.actions if res.actions else 0.0,
               "mean_travel_time": res.summary.mean_travel_time}
        rows.append(row)
        save_checkpoint(ckpt, agent.q, hp)
        manifest.episodes.append({k: row[k] for k in ("episode", "decisions", "mean_reward", "mean_travel_time")})
        if progress:
            progress(row)
    _write(out / "train_log.csv", _rows_csv(rows, TRAIN_LOG_FIELDS))
    manifest.checkpoints = [ckpt.name]
    for p in (out / "config.json", ckpt, out / "train_log.csv"):
        manifest.add_file(out, p)
    manifest.write(out)
    return TrainResult(ckpt, rows, agent, manifest)


def _rows_csv(rows: Sequence[dict], fields: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fields])
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return "" if v is None else str(v)


# ---------------------------------------------------------------- evaluation

def greedy_policy(config: ExperimentConfig, checkpoint: Path | None) -> DQNSizePolicy:
    agent = make_agent(config)
    if checkpoint is not None:
        load_checkpoint(checkpoint, agent.q)
        agent.target.copy_from(agent.q)
    return DQNSizePolicy(agent, learn=False, epsilon=0.0)


def evaluate(config: ExperimentConfig, checkpoint: Path | None, seeds: Sequence[int] | None = None,
             controller: str | None = None, bundle_dir: Path | None = None) -> list[EpisodeResult]:
    """Greedy (ε = 0) rollouts, no learning, one episode per seed."""
    name = controller or config.controller
    out = []
    for seed in (config.eval_seeds if seeds is None else seeds):
        policy = greedy_policy(config, checkpoint) if name in ("proposed", "random_nonconflicting") else None
        out.append(run_episode(config, name, seed, policy=policy, bundle_dir=bundle_dir))
    return out


def _run_method(args) -> tuple[str, list[EpisodeResult]]:
    config, checkpoint, method, seeds, bundle_dir = args
    return method, evaluate(config, checkpoint, seeds, method, bundle_dir)


def compare_all(config: ExperimentConfig, checkpoint: Path | None, out_dir: Path | None = None,
                seeds: Sequence[int] | None = None, methods: Sequence[str] = CONTROLLERS,
                workers: int = 1) -> tuple[ComparisonReport, Path]:
    """Run every method on the same seeds and write the comparison artifacts."""
    seeds = tuple(config.eval_seeds if seeds is None else seeds)
    out = Path(out_dir) if out_dir is not None else output_root(config) / f"compare_{config.config_hash()}"
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(config, checkpoint, m, seeds, out) for m in methods]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            results = dict(pool.map(_run_method, jobs))
    else:
        results = dict(map(_run_method, jobs))
    digests = {s: {results[m][k].arrival_digest for m in methods} for k, s in enumerate(seeds)}
    if any(len(d) != 1 for d in digests.values()):
        raise SafetyViolation("arrival streams differ across methods")
    manifest = RunManifest(config.config_hash(), config.seed, __version__)
    config.save(out / "config.json")
    manifest.add_file(out, out / "config.json")
    for m in methods:
        for r in results[m]:
            p = _write(out / "trips" / f"{m}_seed{r.seed}.csv", trips_csv(r.trips))
            manifest.add_file(out, p)
        manifest.episodes.append({"method": m, "runs": [r.summary.to_dict() | {"seed": r.seed}
                                                        for r in results[m]]})
    report = compare({m: [r.summary for r in results[m]] for m in methods})
    for name, text in (("comparison.csv", report.to_csv()), ("comparison.json", report.to_json()),
                       ("comparison.txt", report.to_text())):
        manifest.add_file(out, _write(out / name, text))
    hist_method = "proposed" if "proposed" in results else methods[0]
    hist: dict[int, int] = {}
    for r in results[hist_method]:
        for k, v in r.summary.platoon_histogram.items():
            hist[k] = hist.get(k, 0) + v
    manifest.add_file(out, _write(out / "platoon_sizes.csv", histogram_csv(hist)))
    if checkpoint is not None:
        manifest.checkpoints = [str(checkpoint)]
    manifest.write(out)
    return report, out
