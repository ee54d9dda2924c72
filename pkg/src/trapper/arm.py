"""Planar articulated arm: kinematics, damped least-squares chunk planner, trap mechanics."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ArmDroppedError, ConfigError
from .physics import BallState, BallStatus, Vec3


@dataclass(frozen=True)
class ArmConfig:
    link_lengths: tuple[float, ...] = (0.35, 0.35, 0.35)
    # mounted just inside the near long edge of the default table
    base_position: Vec3 = Vec3(0.0, -0.4, 0.0)
    joint_velocity_limit: float = 0.01
    box_half_width: float = 0.12
    goal_tolerance: float = 0.01
    damping: float = 0.1
    hover_height: float = 0.05
    home_angles: tuple[float, ...] = (math.pi / 2, -math.pi / 2, -math.pi / 2)

    def __post_init__(self):
        object.__setattr__(self, "link_lengths", tuple(float(v) for v in self.link_lengths))
        object.__setattr__(self, "home_angles", tuple(float(v) for v in self.home_angles))
        object.__setattr__(self, "base_position", Vec3(*self.base_position))
        if not self.link_lengths or any(L <= 0 for L in self.link_lengths):
            raise ConfigError("link lengths must be positive")
        if len(self.home_angles) != len(self.link_lengths):
            raise ConfigError("home_angles must have one entry per link")
        if self.joint_velocity_limit <= 0:
            raise ConfigError("joint_velocity_limit must be positive")
        if self.goal_tolerance <= 0 or self.box_half_width <= 0:
            raise ConfigError("goal_tolerance and box_half_width must be positive")
        if self.damping < 0:
            raise ConfigError("damping must be >= 0")

    @property
    def reach(self) -> float:
        return sum(self.link_lengths)

    @property
    def n_joints(self) -> int:
        return len(self.link_lengths)


@dataclass(frozen=True)
class ArmAction:
    joint_deltas: tuple[float, ...]


class TrapOutcome(enum.Enum):
    NOT_YET = "NotYet"
    SUCCESS = "Success"
    MISS = "Miss"


@dataclass(frozen=True)
class RobotState:
    joint_angles: tuple[float, ...]
    joint_velocities: tuple[float, ...]
    end_effector: Vec3
    dropped: bool = False
    drop_outcome: TrapOutcome | None = None


class Goal(NamedTuple):
    position: Vec3


class IKChunk(NamedTuple):
    actions: list[ArmAction]
    unreachable: bool


def forward_kinematics(theta: Sequence[float], cfg: ArmConfig) -> Vec3:
    if len(theta) != cfg.n_joints:
        raise ValueError(f"expected {cfg.n_joints} joint angles, got {len(theta)}")
    x, y = cfg.base_position.x, cfg.base_position.y
    phi = 0.0
    for L, t in zip(cfg.link_lengths, theta):
        phi += t
        x += L * math.cos(phi)
        y += L * math.sin(phi)
    return Vec3(x, y, cfg.hover_height)


def jacobian(theta: Sequence[float], cfg: ArmConfig) -> np.ndarray:
    """2 x n matrix of d(ee_x, ee_y)/d(theta)."""
    if len(theta) != cfg.n_joints:
        raise ValueError(f"expected {cfg.n_joints} joint angles, got {len(theta)}")
    phis = np.cumsum(theta)
    cx = np.asarray(cfg.link_lengths) * np.cos(phis)
    sy = np.asarray(cfg.link_lengths) * np.sin(phis)
    # column j collects the links at or after joint j
    J = np.empty((2, cfg.n_joints))
    J[0] = -np.cumsum(sy[::-1])[::-1]
    J[1] = np.cumsum(cx[::-1])[::-1]
    return J


def home_state(cfg: ArmConfig) -> RobotState:
    th = cfg.home_angles
    return RobotState(th, (0.0,) * len(th), forward_kinematics(th, cfg))


def apply_action(state: RobotState, action: ArmAction, cfg: ArmConfig) -> RobotState:
    th = tuple(a + d for a, d in zip(state.joint_angles, action.joint_deltas))
    return RobotState(th, action.joint_deltas, forward_kinematics(th, cfg),
                      state.dropped, state.drop_outcome)


def reachable_target(gx: float, gy: float, cfg: ArmConfig) -> tuple[float, float, bool]:
    """Project a planar goal onto the workspace disk; the flag is True if it had to move."""
    bx, by = cfg.base_position.x, cfg.base_position.y
    dx, dy = gx - bx, gy - by
    r = math.hypot(dx, dy)
    limit = cfg.reach * (1.0 - 1e-3)
    if r <= limit:
        return gx, gy, False
    s = limit / r
    return bx + dx * s, by + dy * s, True


def dls_delta(theta: Sequence[float], ex: float, ey: float, cfg: ArmConfig,
              damping: float | None = None, limit: bool = True) -> tuple[float, ...]:
    """One damped least-squares step J^T (J J^T + lambda^2 I)^-1 e.

    With ``limit`` the whole step is scaled down so that no component exceeds
    the joint velocity limit; this keeps the step direction unchanged.
    """
    lam = cfg.damping if damping is None else damping
    phi = 0.0
    cx = []
    sy = []
    for L, t in zip(cfg.link_lengths, theta):
        phi += t
        cx.append(L * math.cos(phi))
        sy.append(L * math.sin(phi))
    n = len(cx)
    jx = [0.0] * n
    jy = [0.0] * n
    ax = ay = 0.0
    for k in range(n - 1, -1, -1):
        ax += sy[k]
        ay += cx[k]
        jx[k] = -ax
        jy[k] = ay
    a = sum(v * v for v in jx) + lam * lam
    b = sum(u * v for u, v in zip(jx, jy))
    d = sum(v * v for v in jy) + lam * lam
    det = a * d - b * b
    if det == 0.0:
        return (0.0,) * n
    wx = (d * ex - b * ey) / det
    wy = (a * ey - b * ex) / det
    delta = [u * wx + v * wy for u, v in zip(jx, jy)]
    if limit:
        peak = max(abs(v) for v in delta)
        if peak > cfg.joint_velocity_limit:
            s = cfg.joint_velocity_limit / peak
            delta = [v * s for v in delta]
    return tuple(delta)


def ik_plan(state: RobotState, g: Goal, cfg: ArmConfig, n_steps: int = 5) -> IKChunk:
    """Plan the next ``n_steps`` joint increments toward ``g`` with damped least squares."""
    if state.dropped:
        raise ArmDroppedError("box already dropped")
    gx, gy = g.position.x, g.position.y
    if not (math.isfinite(gx) and math.isfinite(gy)):
        raise ValueError(f"goal must be finite, got {g}")
    tx, ty, unreachable = reachable_target(gx, gy, cfg)
    eps2 = cfg.goal_tolerance * cfg.goal_tolerance
    theta = state.joint_angles
    ee = state.end_effector
    zero = (0.0,) * cfg.n_joints
    actions = []
    for _ in range(n_steps):
        ex, ey = tx - ee.x, ty - ee.y
        if (gx - ee.x) ** 2 + (gy - ee.y) ** 2 <= eps2:
            actions.append(ArmAction(zero))
            continue
        delta = dls_delta(theta, ex, ey, cfg)
        actions.append(ArmAction(delta))
        theta = tuple(a + d for a, d in zip(theta, delta))
        ee = forward_kinematics(theta, cfg)
    return IKChunk(actions, unreachable)


class StaticPlanner:
    """Goal-conditioned static planner that replays 5-step IK chunks.

    A chunk is recomputed when it runs out or the goal changes.
    """

    def __init__(self, cfg: ArmConfig, chunk_steps: int = 5):
        self.cfg = cfg
        self.chunk_steps = chunk_steps
        self.plan_calls = 0
        self.unreachable = False
        self._chunk: list[ArmAction] = []
        self._goal: tuple[float, float] | None = None

    def reset(self) -> None:
        self._chunk = []
        self._goal = None

    def step(self, state: RobotState, g: Goal) -> ArmAction:
        if state.dropped:
            raise ArmDroppedError("box already dropped; no further planning")
        key = (g.position.x, g.position.y)
        if not self._chunk or key != self._goal:
            chunk = ik_plan(state, g, self.cfg, self.chunk_steps)
            self.plan_calls += 1
            self.unreachable = chunk.unreachable
            self._chunk = list(chunk.actions)
            self._goal = key
        return self._chunk.pop(0)


def static_plan_step(state: RobotState, g: Goal, cfg: ArmConfig,
                     planner: StaticPlanner | None = None) -> ArmAction:
    """Next action of the static planner; pass a persistent ``planner`` to reuse chunks."""
    if planner is None:
        planner = StaticPlanner(cfg)
    return planner.step(state, g)


def attempt_trap(state: RobotState, g: Goal, ball: BallState,
                 cfg: ArmConfig) -> tuple[TrapOutcome, RobotState]:
    """Drop the box on first arrival within tolerance of ``g``; the result is final."""
    if state.dropped:
        return state.drop_outcome, state
    ee = state.end_effector
    if math.hypot(ee.x - g.position.x, ee.y - g.position.y) > cfg.goal_tolerance:
        return TrapOutcome.NOT_YET, state
    covered = max(abs(ball.position.x - ee.x), abs(ball.position.y - ee.y)) <= cfg.box_half_width
    outcome = TrapOutcome.SUCCESS if (ball.status is BallStatus.ROLLING and covered) else TrapOutcome.MISS
    return outcome, replace(state, dropped=True, drop_outcome=outcome)


def batch_dls_arrival(theta0: np.ndarray, goals: np.ndarray, cfg: ArmConfig, max_steps: int,
                      radius: float | None = None, record: bool = False,
                      deadlines: np.ndarray | None = None, first_only: bool = False):
    """Vectorised static-planner rollouts from many start poses toward many fixed goals.

    Args:
        theta0: (N, n) or (n,) start joint angles.
        goals: (N, 2) planar goals.
        radius: arrival radius, defaults to ``goal_tolerance``.
        record: also return the (N, max_steps + 1, n) joint history.
        deadlines: per-goal last useful step; goals are dropped once it passes.
        first_only: stop as soon as any goal is reached.

    Returns:
        arrival step per goal (``-1`` when not reached within ``max_steps``),
        plus the history if requested.
    """
    goals = np.asarray(goals, dtype=np.float64)
    N = len(goals)
    th = np.broadcast_to(np.asarray(theta0, dtype=np.float64), (N, cfg.n_joints)).copy()
    L = np.asarray(cfg.link_lengths)
    r = cfg.goal_tolerance if radius is None else radius
    r2 = r * r
    lam2 = cfg.damping * cfg.damping
    bx, by = cfg.base_position.x, cfg.base_position.y
    # project goals into the workspace, as the scalar planner does
    d = np.hypot(goals[:, 0] - bx, goals[:, 1] - by)
    lim = cfg.reach * (1.0 - 1e-3)
    s = np.where(d > lim, lim / np.where(d > 0, d, 1.0), 1.0)
    tgt = np.stack([bx + (goals[:, 0] - bx) * s, by + (goals[:, 1] - by) * s], axis=1)
    arrival = np.full(N, -1, dtype=np.int64)
    hist = np.empty((N, max_steps + 1, cfg.n_joints)) if record else None
    active = np.arange(N)
    for k in range(max_steps + 1):
        if record:
            hist[:, k] = th
        if len(active) == 0:
            if record:
                hist[:, k + 1:] = th[:, None, :]
            break
        ta = th[active]
        phis = np.cumsum(ta, axis=1)
        cx = L * np.cos(phis)
        sy = L * np.sin(phis)
        ex_ = bx + cx.sum(axis=1)
        ey_ = by + sy.sum(axis=1)
        g = goals[active]
        done = (g[:, 0] - ex_) ** 2 + (g[:, 1] - ey_) ** 2 <= r2
        arrival[active[done]] = k
        keep = ~done
        if first_only and done.any():
            break
        if deadlines is not None:
            keep &= deadlines[active] > k
        if k == max_steps:
            break
        active = active[keep]
        if len(active) == 0:
            continue
        cx, sy, ex_, ey_ = cx[keep], sy[keep], ex_[keep], ey_[keep]
        jx = -np.cumsum(sy[:, ::-1], axis=1)[:, ::-1]
        jy = np.cumsum(cx[:, ::-1], axis=1)[:, ::-1]
        t = tgt[active]
        ex = t[:, 0] - ex_
        ey = t[:, 1] - ey_
        a = (jx * jx).sum(axis=1) + lam2
        b = (jx * jy).sum(axis=1)
        dd = (jy * jy).sum(axis=1) + lam2
        det = a * dd - b * b
        safe = np.where(det == 0.0, 1.0, det)
        wx = np.where(det == 0.0, 0.0, (dd * ex - b * ey) / safe)
        wy = np.where(det == 0.0, 0.0, (a * ey - b * ex) / safe)
        delta = jx * wx[:, None] + jy * wy[:, None]
        peak = np.abs(delta).max(axis=1)
        scale = np.where(peak > cfg.joint_velocity_limit,
                         cfg.joint_velocity_limit / np.where(peak > 0, peak, 1.0), 1.0)
        th[active] = th[active] + delta * scale[:, None]
    if record:
        return arrival, hist
    return arrival
