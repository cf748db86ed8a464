"""Experiment configuration.

All defaults reproduce the published parameter table and demand table.  A config
round-trips through plain JSON; unknown keys are rejected on load.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


# veh/h per movement, keyed "<origin><destination>" (N, E, S, W)
DEFAULT_FLOWS: dict[str, float] = {
    "NS": 500.0, "NE": 300.0, "NW": 200.0,
    "SN": 400.0, "SE": 400.0, "SW": 200.0,
    "EN": 400.0, "ES": 500.0, "EW": 700.0,
    "WN": 300.0, "WS": 200.0, "WE": 500.0,
}


@dataclass
class GeometryConfig:
    intersection_zone_side: float = 15.0   # S
    control_zone_radius: float = 200.0     # L
    lane_width: float = 2.5
    vehicle_length: float = 5.0
    vehicle_width: float = 1.8
    sample_resolution: float = 0.25        # trajectory polyline spacing
    conflict_threshold: float | None = None  # defaults to vehicle_width


@dataclass
class DynamicsConfig:
    dt: float = 0.1
    a_max: float = 5.0
    v_max: float = 20.0
    platoon_headway: float = 1.0      # d_h
    min_headway: float = 1.5          # outside platoons
    platoon_min_gap: float = 0.5      # hard floor for followers inside a platoon
    k_v: float = 1.0
    k_g: float = 0.5
    wait_speed: float = 0.1
    a_lat_max: float = 2.5
    retire_distance: float = 50.0
    # fuel rate polynomial b0..b5 in mL/s, see simcore.FuelModel
    fuel_coefficients: tuple[float, ...] = (0.2222, 0.03, 0.0, 7.2534e-5, 0.18, 0.01)


@dataclass
class DQNConfig:
    epsilon: float = 0.1
    batch_size: int = 32
    observe_step: int = 100
    episodes: int = 100
    replay_memory_size: int = 1000
    reward_bound: float = 0.15        # c
    wait_threshold: float = 60.0      # W_m
    gamma: float = 0.9
    target_sync: int = 200            # C, in train steps
    learning_rate: float = 1e-3
    ttj_norm: float = 30.0
    grid_cells: int = 80
    n_max: int = 33                   # action head width


@dataclass
class SignalConfig:
    saturation_flow: float = 1800.0   # veh/h/lane
    lost_time_per_phase: float = 4.0
    min_cycle: float = 30.0
    max_cycle: float = 120.0


CONTROLLERS = (
    "proposed", "random_nonconflicting", "webster", "fcfs_individual",
    "fixed3", "fixed6", "fixed9", "fixed12",
)


@dataclass
class ExperimentConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    dqn: DQNConfig = field(default_factory=DQNConfig)
    signal: SignalConfig = field(default_factory=SignalConfig)
    flows: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_FLOWS))
    horizon: float = 3600.0           # T
    controller: str = "proposed"
    seed: int = 0
    eval_seeds: tuple[int, ...] = (1001, 1002, 1003, 1004, 1005)
    output_dir: str = "runs"

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        g, d, q = self.geometry, self.dynamics, self.dqn
        half = g.intersection_zone_side / 2.0
        for name in ("intersection_zone_side", "control_zone_radius", "lane_width",
                     "vehicle_length", "vehicle_width", "sample_resolution"):
            if getattr(g, name) <= 0:
                raise ConfigError(f"geometry.{name} must be positive")
        if not math.isclose(3 * g.lane_width, half, rel_tol=0, abs_tol=1e-9):
            raise ConfigError(
                f"lane tiling: 3 * lane_width = {3 * g.lane_width} != S/2 = {half}")
        if g.control_zone_radius <= half:
            raise ConfigError("control_zone_radius must exceed S/2")
        if g.lane_width <= g.vehicle_width:
            raise ConfigError("lane_width must exceed vehicle_width")
        if d.dt <= 0 or d.a_max <= 0 or d.v_max <= 0:
            raise ConfigError("dt, a_max, v_max must be positive")
        if not 0.0 <= q.epsilon <= 1.0:
            raise ConfigError(f"dqn.epsilon={q.epsilon} outside [0, 1]")
        if not 0.0 < q.gamma < 1.0:
            raise ConfigError(f"dqn.gamma={q.gamma} outside (0, 1)")
        if q.target_sync < 1 or q.batch_size < 1 or q.replay_memory_size < q.batch_size:
            raise ConfigError("dqn sizes inconsistent (target_sync, batch_size, replay)")
        feasible = int((g.control_zone_radius + d.platoon_headway)
                       // (g.vehicle_length + d.platoon_headway))
        if feasible < 1:
            raise ConfigError("a single vehicle is longer than the control zone")
        if q.n_max < feasible:
            raise ConfigError(f"dqn.n_max={q.n_max} below the feasible platoon bound {feasible}")
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"unknown controller {self.controller!r}; choose from {CONTROLLERS}")
        if any(r < 0 for r in self.flows.values()):
            raise ConfigError("flow rates must be nonnegative")
        if set(self.flows) - set(DEFAULT_FLOWS):
            raise ConfigError(f"unknown movements in flows: {sorted(set(self.flows) - set(DEFAULT_FLOWS))}")
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        data = dict(data)
        sections = {"geometry": GeometryConfig, "dynamics": DynamicsConfig,
                    "dqn": DQNConfig, "signal": SignalConfig}
        kwargs: dict[str, Any] = {}
        top = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - top
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, value in data.items():
            if key in sections:
                kwargs[key] = _build_section(sections[key], value, key)
            elif key == "flows":
                flows = dict(DEFAULT_FLOWS)
                flows.update({k: float(v) for k, v in value.items()})
                kwargs[key] = flows
            elif key == "eval_seeds":
                kwargs[key] = tuple(int(s) for s in value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def with_overrides(self, overrides: dict[str, Any]) -> "ExperimentConfig":
        """Return a copy with dotted keys (``"dqn.gamma"``) replaced."""
        data = self.to_dict()
        for dotted, value in overrides.items():
            parts = dotted.split(".")
            node = data
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config key {dotted!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(data)


def _build_section(cls, value: dict[str, Any], name: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(value) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    value = dict(value)
    if "fuel_coefficients" in value:
        value["fuel_coefficients"] = tuple(float(b) for b in value["fuel_coefficients"])
    return cls(**value)


def parse_override(text: str) -> tuple[str, Any]:
    """Parse ``key=value`` where value is JSON if it parses, else a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
