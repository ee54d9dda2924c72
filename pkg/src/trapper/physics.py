"""Discrete-time planar physics for the trapping table and the straight-line reach target.

One call to :func:`step_ball` advances the ball by exactly one simulation step.
Velocities are stored in metres per step; ``TableConfig.dt`` only enters through
the friction decay factor ``exp(-friction_loss * dt)``.

The scalar path (:func:`step_ball`) is plain Python floats because it sits in the
episode hot loop.  :func:`simulate_many` is the numpy batch equivalent used for
dataset generation; both perform the same IEEE operations in the same order so
their results agree bit-for-bit.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, SimulationError


class Vec3(NamedTuple):
    x: float
    y: float
    z: float = 0.0


class BallStatus(enum.Enum):
    ROLLING = "Rolling"
    IN_POCKET = "InPocket"
    TRAPPED = "Trapped"
    DEFLECTED = "Deflected"


@dataclass(frozen=True)
class BallState:
    position: Vec3
    velocity: Vec3
    status: BallStatus = BallStatus.ROLLING

    @property
    def speed(self) -> float:
        return math.hypot(self.velocity.x, self.velocity.y)


def _default_pockets(half_width: float, half_height: float, z: float) -> tuple[Vec3, ...]:
    # 4 corners followed by the 4 edge midpoints
    return (
        Vec3(half_width, half_height, z),
        Vec3(half_width, -half_height, z),
        Vec3(-half_width, -half_height, z),
        Vec3(-half_width, half_height, z),
        Vec3(0.0, half_height, z),
        Vec3(half_width, 0.0, z),
        Vec3(0.0, -half_height, z),
        Vec3(-half_width, 0.0, z),
    )


@dataclass(frozen=True)
class TableConfig:
    half_width: float = 0.7
    half_height: float = 0.45
    wall_restitution: float = 0.95
    pocket_radius: float = 0.06
    friction_loss: float = 0.5
    dt: float = 0.004
    surface_z: float = 0.0
    pocket_centers: tuple[Vec3, ...] = field(default=())

    def __post_init__(self):
        if not self.pocket_centers:
            object.__setattr__(
                self, "pocket_centers",
                _default_pockets(self.half_width, self.half_height, self.surface_z))
        else:
            object.__setattr__(self, "pocket_centers", tuple(Vec3(*p) for p in self.pocket_centers))
        self.validate()

    def validate(self) -> None:
        if self.half_width <= 0 or self.half_height <= 0:
            raise ConfigError("table half extents must be positive")
        if not 0 < self.wall_restitution <= 1:
            raise ConfigError("wall_restitution must lie in (0, 1]")
        if self.pocket_radius <= 0:
            raise ConfigError("pocket_radius must be positive")
        if self.friction_loss < 0:
            raise ConfigError("friction_loss must be >= 0")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if len(self.pocket_centers) != 8:
            raise ConfigError(f"expected 8 pocket centers, got {len(self.pocket_centers)}")
        for p in self.pocket_centers:
            on_x = math.isclose(abs(p.x), self.half_width, abs_tol=1e-9)
            on_y = math.isclose(abs(p.y), self.half_height, abs_tol=1e-9)
            if not (on_x or on_y):
                raise ConfigError(f"pocket {p} is not on the table boundary")

    @property
    def decay(self) -> float:
        """Per-step multiplicative velocity factor."""
        return math.exp(-self.friction_loss * self.dt)

    @property
    def width(self) -> float:
        return 2.0 * self.half_width

    def with_friction(self, friction_loss: float) -> "TableConfig":
        return replace(self, friction_loss=friction_loss)


@dataclass(frozen=True)
class EpisodeInit:
    seed: int
    speed_range: tuple[float, float] = (0.0, 0.01)
    spawn_margin: float = 0.1

    def __post_init__(self):
        lo, hi = self.speed_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"invalid speed_range {self.speed_range}")


@dataclass(frozen=True)
class Trajectory:
    """Positions after each of ``len(self)`` consecutive steps.

    ``off_table[k]`` is true from the step at which the ball dropped into a
    pocket onward; those rows repeat the absorption point.
    """
    positions: np.ndarray  # (n, 3)
    off_table: np.ndarray  # (n,) bool

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, item) -> "Trajectory":
        return Trajectory(self.positions[item], self.off_table[item])

    def to_csv(self, path, start_step: int = 1) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "x", "y", "z", "off_table"])
            for k, (p, off) in enumerate(zip(self.positions, self.off_table)):
                w.writerow([k + start_step, repr(float(p[0])), repr(float(p[1])),
                            repr(float(p[2])), int(bool(off))])


def _check_finite(state: BallState) -> None:
    for v in (*state.position, *state.velocity):
        if not math.isfinite(v):
            raise SimulationError(f"non-finite ball state: {state}")


def step_ball(state: BallState, table: TableConfig) -> BallState:
    """Advance a rolling ball by one step: move, reflect off walls, decay, absorb."""
    _check_finite(state)
    if state.status is not BallStatus.ROLLING:
        raise SimulationError(f"cannot step a ball with status {state.status.value}")
    hw, hh = table.half_width, table.half_height
    e = table.wall_restitution
    x = state.position.x + state.velocity.x
    y = state.position.y + state.velocity.y
    vx, vy = state.velocity.x, state.velocity.y
    if x > hw:
        x = 2.0 * hw - x
        vx = -vx * e
    elif x < -hw:
        x = -2.0 * hw - x
        vx = -vx * e
    if y > hh:
        y = 2.0 * hh - y
        vy = -vy * e
    elif y < -hh:
        y = -2.0 * hh - y
        vy = -vy * e
    decay = table.decay
    vx = vx * decay
    vy = vy * decay
    z = state.position.z
    r2 = table.pocket_radius * table.pocket_radius
    for p in table.pocket_centers:
        dx = x - p.x
        dy = y - p.y
        if dx * dx + dy * dy <= r2:
            return BallState(Vec3(x, y, z), Vec3(0.0, 0.0, 0.0), BallStatus.IN_POCKET)
    return BallState(Vec3(x, y, z), Vec3(vx, vy, 0.0), BallStatus.ROLLING)


def sample_initial(init: EpisodeInit, table: TableConfig) -> BallState:
    """Random spawn: uniform position away from walls and pockets, uniform speed and heading."""
    m = init.spawn_margin
    if m < 0 or m >= min(table.half_width, table.half_height):
        raise ConfigError(f"spawn_margin {m} does not fit inside the table")
    rng = np.random.default_rng(init.seed)
    keep_out = table.pocket_radius + m
    while True:
        x = float(rng.uniform(-table.half_width + m, table.half_width - m))
        y = float(rng.uniform(-table.half_height + m, table.half_height - m))
        if all(math.hypot(x - p.x, y - p.y) > keep_out for p in table.pocket_centers):
            break
    speed = float(rng.uniform(*init.speed_range))
    heading = float(rng.uniform(0.0, 2.0 * math.pi))
    vel = Vec3(speed * math.cos(heading), speed * math.sin(heading), 0.0)
    return BallState(Vec3(x, y, table.surface_z), vel)


def run_ballistic(state: BallState, table: TableConfig, n_steps: int) -> Trajectory:
    """Arm-free rollout: the positions after each of ``n_steps`` steps."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    pos = np.empty((n_steps, 3))
    off = np.zeros(n_steps, dtype=bool)
    s = state
    for k in range(n_steps):
        if s.status is BallStatus.ROLLING:
            s = step_ball(s, table)
        pos[k] = s.position
        off[k] = s.status is BallStatus.IN_POCKET
    return Trajectory(pos, off)


def simulate_many(positions: np.ndarray, velocities: np.ndarray, table: TableConfig,
                  n_steps: int, decay: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Batch version of :func:`run_ballistic` for planar starts.

    Args:
        positions: (N, 2) start positions.
        velocities: (N, 2) start velocities, metres per step.
        decay: optional (N,) per-ball friction factors overriding ``table.decay``.

    Returns:
        ``(xy, off)`` with shapes (N, n_steps, 2) and (N, n_steps).
    """
    x = np.array(positions[:, 0], dtype=np.float64)
    y = np.array(positions[:, 1], dtype=np.float64)
    vx = np.array(velocities[:, 0], dtype=np.float64)
    vy = np.array(velocities[:, 1], dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))
            and np.all(np.isfinite(vx)) and np.all(np.isfinite(vy))):
        raise SimulationError("non-finite start state in batch")
    n = len(x)
    hw, hh = table.half_width, table.half_height
    e = table.wall_restitution
    decay = table.decay if decay is None else np.asarray(decay, dtype=np.float64)
    r2 = table.pocket_radius * table.pocket_radius
    out = np.empty((n, n_steps, 2))
    off = np.zeros((n, n_steps), dtype=bool)
    active = np.ones(n, dtype=bool)
    for k in range(n_steps):
        a = active
        x = np.where(a, x + vx, x)
        y = np.where(a, y + vy, y)
        hi = a & (x > hw)
        lo = a & (x < -hw)
        x = np.where(hi, 2.0 * hw - x, np.where(lo, -2.0 * hw - x, x))
        vx = np.where(hi | lo, -vx * e, vx)
        hi = a & (y > hh)
        lo = a & (y < -hh)
        y = np.where(hi, 2.0 * hh - y, np.where(lo, -2.0 * hh - y, y))
        vy = np.where(hi | lo, -vy * e, vy)
        vx = vx * decay
        vy = vy * decay
        absorbed = np.zeros(n, dtype=bool)
        for p in table.pocket_centers:
            dx = x - p.x
            dy = y - p.y
            absorbed |= dx * dx + dy * dy <= r2
        absorbed &= a
        active = a & ~absorbed
        vx = np.where(active, vx, 0.0)
        vy = np.where(active, vy, 0.0)
        out[:, k, 0] = x
        out[:, k, 1] = y
        off[:, k] = ~active
    return out, off


@dataclass(frozen=True)
class ReachTargetState:
    position: Vec3
    velocity: Vec3


def step_reach_target(state: ReachTargetState) -> ReachTargetState:
    p, v = state.position, state.velocity
    return ReachTargetState(Vec3(p.x + v.x, p.y + v.y, p.z + v.z), v)


def sample_reach_target(seed: int, speed: float, center: Sequence[float],
                        radius_range: tuple[float, float], z: float = 0.0) -> ReachTargetState:
    """Spawn a constant-velocity target in an annulus around ``center``."""
    rng = np.random.default_rng(seed)
    r = float(np.sqrt(rng.uniform(radius_range[0] ** 2, radius_range[1] ** 2)))
    phi = float(rng.uniform(0.0, 2.0 * math.pi))
    heading = float(rng.uniform(0.0, 2.0 * math.pi))
    pos = Vec3(center[0] + r * math.cos(phi), center[1] + r * math.sin(phi), z)
    return ReachTargetState(pos, Vec3(speed * math.cos(heading), speed * math.sin(heading), 0.0))


def run_reach_target(state: ReachTargetState, n_steps: int) -> Trajectory:
    pos = np.empty((n_steps, 3))
    s = state
    for k in range(n_steps):
        s = step_reach_target(s)
        pos[k] = s.position
    return Trajectory(pos, np.zeros(n_steps, dtype=bool))
