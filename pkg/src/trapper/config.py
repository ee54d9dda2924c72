"""Run configuration: nested dataclasses with embedded defaults, loaded from YAML.

Every key is optional in the file; unknown keys are rejected so typos fail
loudly.  ``schema_version`` guards against files written for another layout.

Calibration notes for the defaults
----------------------------------
* Ball speeds are given in velocity units; ``planner.velocity_scale`` turns one
  unit into metres per step.  At 0.0018 the fastest sweep ball (5 units)
  crosses the 1.4 m table in about 155 steps, the slowest non-zero one
  (0.5 units) in about 1500.
* ``table.dt`` only enters through the friction factor exp(-friction * dt):
  friction 10 stops a ball within roughly 25 steps, friction 0 never does.
* The arm sits just inside the near long edge and reaches almost all of the
  table; its unloaded end-effector speed is about 0.004 m/step.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .arm import ArmConfig
from .dynaplan import EpisodeSetup, PlannerMode, ReachSetup
from .errors import ConfigError
from .eta import EtaConfig
from .forecast import ForecastConfig
from .physics import TableConfig, Vec3

SCHEMA_VERSION = 1


@dataclass
class TableSection:
    half_width: float = 0.7
    half_height: float = 0.45
    wall_restitution: float = 0.95
    pocket_radius: float = 0.06
    friction_loss: float = 0.5
    dt: float = 0.004
    surface_z: float = 0.0

    def build(self, friction_loss: float | None = None) -> TableConfig:
        d = dataclasses.asdict(self)
        if friction_loss is not None:
            d["friction_loss"] = friction_loss
        return TableConfig(**d)


@dataclass
class ArmSection:
    link_lengths: list = field(default_factory=lambda: [0.35, 0.35, 0.35])
    base_position: list = field(default_factory=lambda: [0.0, -0.4, 0.0])
    joint_velocity_limit: float = 0.01
    box_half_width: float = 0.12
    goal_tolerance: float = 0.01
    damping: float = 0.1
    hover_height: float = 0.05
    home_angles: list = field(default_factory=lambda: [1.5707963267948966, -1.5707963267948966,
                                                       -1.5707963267948966])

    def build(self) -> ArmConfig:
        return ArmConfig(tuple(self.link_lengths), Vec3(*self.base_position), self.joint_velocity_limit,
                         self.box_half_width, self.goal_tolerance, self.damping, self.hover_height,
                         tuple(self.home_angles))


@dataclass
class TrainSection:
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"


@dataclass
class ForecasterSection:
    H: int = 24
    F: int = 300
    channels: int = 32
    kernel: int = 5
    hidden: int = 256
    diff_gain: float = 20.0
    anchor_last: bool = True
    n_episodes: int = 3000
    windows_per_episode: int = 5
    episode_steps: int = 2000
    # training episodes draw speed (velocity units) and friction uniformly from these
    velocity_range: list = field(default_factory=lambda: [0.0, 5.0])
    friction_range: list = field(default_factory=lambda: [0.0, 10.0])
    data_seed: int = 11
    train: TrainSection = field(default_factory=lambda: TrainSection(epochs=15))


@dataclass
class EtaSection:
    window: int = 500
    n_bins: int = 100
    bin_width: int = 5
    hidden: int = 128
    n_goals: int = 80000
    samples_per_run: int = 5
    data_seed: int = 12
    train: TrainSection = field(default_factory=lambda: TrainSection(epochs=40, batch_size=128))


@dataclass
class PlannerSection:
    t_ttr_init: int = 75
    gamma: float = 0.9
    t_ttr_min: int = 25
    max_steps: int = 500
    spawn_margin: float = 0.1
    velocity_scale: float = 0.0018
    # ball speed (velocity units) used by the friction sweep
    default_velocity: float = 3.0
    # arrival radius of the solvability scan; null means the box circumradius
    solvable_radius: float | None = None


@dataclass
class SweepSection:
    velocity_values: list = field(default_factory=lambda: [0.5 * i for i in range(11)])
    friction_values: list = field(default_factory=lambda: [float(i) for i in range(11)])
    episodes_per_point: int = 100
    repeats_per_point: int = 10
    base_seed: int = 20240601
    modes: list = field(default_factory=lambda: ["Dynamic", "DynamicOracleTraj", "TargetPursuit"])


@dataclass
class ReachSection:
    speeds: list = field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
    spawn_radius: list = field(default_factory=lambda: [0.15, 0.8])
    extent: float = 1.5
    episodes_per_point: int = 100
    repeats_per_point: int = 3
    forecast_episodes: int = 6000
    # share of forecaster training targets that hold still
    stationary_fraction: float = 0.1
    success_tolerance: float = 0.02
    # straight-line targets leave the workspace quickly, so keep training
    # episodes at benchmark length instead of the long table episodes
    episode_steps: int = 500
    eta_goals: int = 12000
    data_seed: int = 13


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    table: TableSection = field(default_factory=TableSection)
    arm: ArmSection = field(default_factory=ArmSection)
    forecaster: ForecasterSection = field(default_factory=ForecasterSection)
    eta: EtaSection = field(default_factory=EtaSection)
    planner: PlannerSection = field(default_factory=PlannerSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    reach: ReachSection = field(default_factory=ReachSection)

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version} (expected {SCHEMA_VERSION})")
        table = self.table.build()
        self.arm.build()
        self.forecast_config(table)
        self.eta_config()
        if self.eta.window != self.planner.max_steps:
            raise ConfigError("eta.window must equal planner.max_steps")
        if self.planner.velocity_scale <= 0:
            raise ConfigError("planner.velocity_scale must be positive")
        s = self.sweep
        if not s.velocity_values or not s.friction_values:
            raise ConfigError("sweep values must be non-empty")
        if s.episodes_per_point < 1 or s.repeats_per_point < 1:
            raise ConfigError("episodes_per_point and repeats_per_point must be >= 1")
        if min(s.velocity_values) < 0 or min(s.friction_values) < 0:
            raise ConfigError("sweep values must be non-negative")
        for m in s.modes:
            PlannerMode.parse(m)
        if not 0.0 <= self.reach.stationary_fraction <= 1.0:
            raise ConfigError("reach.stationary_fraction must lie in [0, 1]")
        if self.reach.success_tolerance <= 0:
            raise ConfigError("reach.success_tolerance must be positive")
        for t in (self.forecaster.train, self.eta.train):
            if t.learning_rate <= 0:
                raise ConfigError("learning_rate must be positive")
        return self

    # -- builders

    def forecast_config(self, table: TableConfig | None = None) -> ForecastConfig:
        table = self.table.build() if table is None else table
        f = self.forecaster
        return ForecastConfig.for_table(table, H=f.H, F=f.F, channels=f.channels, kernel=f.kernel,
                                        hidden=f.hidden, diff_gain=f.diff_gain, anchor_last=f.anchor_last)

    def reach_forecast_config(self) -> ForecastConfig:
        f = self.forecaster
        e = self.reach.extent
        return ForecastConfig(H=f.H, F=f.F, half_width=e, half_height=e, channels=f.channels,
                              kernel=f.kernel, hidden=f.hidden, diff_gain=f.diff_gain,
                              anchor_last=f.anchor_last)

    def eta_config(self) -> EtaConfig:
        e = self.eta
        return EtaConfig(e.window, e.n_bins, e.bin_width, e.hidden)

    def episode_setup(self, velocity: float | None = None, friction: float | None = None) -> EpisodeSetup:
        p = self.planner
        v = p.default_velocity if velocity is None else velocity
        speed = v * p.velocity_scale
        return EpisodeSetup(table=self.table.build(friction), arm=self.arm.build(),
                            speed_range=(speed, speed), spawn_margin=p.spawn_margin,
                            max_steps=p.max_steps, history=self.forecaster.H, horizon=self.forecaster.F,
                            eta_window=self.eta.window, t_ttr_init=p.t_ttr_init, gamma=p.gamma,
                            t_ttr_min=p.t_ttr_min, solvable_radius=p.solvable_radius)

    def reach_setup(self) -> ReachSetup:
        p = self.planner
        return ReachSetup(arm=self.arm.build(), spawn_radius=tuple(self.reach.spawn_radius),
                          max_steps=p.max_steps, history=self.forecaster.H, horizon=self.forecaster.F,
                          t_ttr_init=p.t_ttr_init, gamma=p.gamma, t_ttr_min=p.t_ttr_min,
                          extent=self.reach.extent, success_tolerance=self.reach.success_tolerance)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(sorted(unknown))}")
    default = cls()
    kw: dict[str, Any] = {}
    for name, value in data.items():
        cur = getattr(default, name)
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(cur):
            kw[name] = _from_dict(type(cur), value, path)
        else:
            if isinstance(cur, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"{path} must be true or false, got {value!r}")
            elif cur is not None and isinstance(cur, (int, float)) and (
                    isinstance(value, bool) or not isinstance(value, (int, float))):
                raise ConfigError(f"{path} must be a number, got {value!r}")
            if isinstance(cur, list) and not isinstance(value, list):
                raise ConfigError(f"{path} must be a list")
            kw[name] = value
    return dataclasses.replace(default, **kw)


def from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data or {}, "").validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    try:
        return from_dict(data or {})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
