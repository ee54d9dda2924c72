"""Moving-target add-on for a static goal-reaching planner.

A re-plan picks an intermediate goal on the forecast ball path where arm and
ball should arrive together; between re-plans the static planner simply drives
toward that goal.  The re-plan window shrinks geometrically as the episode goes
on.
"""
from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .arm import (ArmConfig, Goal, RobotState, StaticPlanner, TrapOutcome, apply_action,
                  attempt_trap, batch_dls_arrival, home_state)
from .errors import ConfigError
from .physics import (BallState, BallStatus, EpisodeInit, ReachTargetState, TableConfig, Vec3,
                      run_ballistic, run_reach_target, sample_initial, sample_reach_target,
                      step_ball, step_reach_target)


@dataclass
class ReplanSchedule:
    t_ttr_init: int = 75
    gamma: float = 0.9
    t_ttr_min: int = 25
    t_ttr: int = -1

    def __post_init__(self):
        if self.t_ttr < 0:
            self.t_ttr = self.t_ttr_init


def next_ttr(sched: ReplanSchedule) -> int:
    """Shrink the re-plan window: ``max(floor(gamma * t_ttr), t_ttr_min)``."""
    # the epsilon absorbs binary rounding of gamma, e.g. 0.9 * 30
    sched.t_ttr = max(int(math.floor(sched.gamma * sched.t_ttr + 1e-9)), sched.t_ttr_min)
    return sched.t_ttr


def replan_instants(max_steps: int, sched: ReplanSchedule | None = None) -> list[int]:
    sched = ReplanSchedule() if sched is None else sched
    out = []
    t = 0
    while t < max_steps:
        out.append(t)
        t += sched.t_ttr
        next_ttr(sched)
    return out


class PlannerMode(enum.Enum):
    DYNAMIC = "Dynamic"
    DYNAMIC_ORACLE_TRAJ = "DynamicOracleTraj"
    TARGET_PURSUIT = "TargetPursuit"

    @classmethod
    def parse(cls, name: str) -> "PlannerMode":
        for m in cls:
            if m.value.lower() == name.lower() or m.name.lower() == name.lower():
                return m
        raise ConfigError(f"unknown planner mode {name!r}")


class EpisodeOutcome(enum.Enum):
    SUCCESS = "Success"
    MISS = "Miss"
    BALL_LOST = "BallLost"
    TIMEOUT = "Timeout"


class EtaProvider(Protocol):
    passes: int

    def estimate(self, state: RobotState, goals: np.ndarray) -> np.ndarray:
        """Arrival-step estimates for each planar goal in ``goals`` (k, 2)."""


class ForecastProvider(Protocol):
    passes: int

    def forecast(self, history: np.ndarray, t: int) -> np.ndarray:
        """(F, 3) positions for steps t+1..t+F given planar history up to t."""


class OracleEta:
    """Exact arrival times by simulating the static planner from a cloned state."""

    def __init__(self, arm: ArmConfig, window: int = 500, radius: float | None = None):
        self.arm = arm
        self.window = window
        self.radius = radius
        self.passes = 0

    def estimate(self, state: RobotState, goals: np.ndarray) -> np.ndarray:
        goals = np.asarray(goals, dtype=np.float64).reshape(-1, 2)
        self.passes += len(goals)
        arr = batch_dls_arrival(np.asarray(state.joint_angles), goals, self.arm, self.window,
                                radius=self.radius)
        return np.where(arr < 0, self.window, arr)


class OracleForecaster:
    """Replays a recorded arm-free trajectory; index ``k`` holds the position at step k+1."""

    def __init__(self, positions: np.ndarray, horizon: int):
        self.positions = np.asarray(positions)
        self.horizon = horizon
        self.passes = 0

    def forecast(self, history: np.ndarray, t: int) -> np.ndarray:
        fut = self.positions[t:t + self.horizon]
        if len(fut) < self.horizon:
            last = self.positions[-1] if len(fut) == 0 else fut[-1]
            fut = np.concatenate([fut, np.repeat(last[None], self.horizon - len(fut), 0)])
        return fut


@dataclass
class GoalSearch:
    d: float
    e_t: int
    corners: np.ndarray  # (4, 3)
    corner_etas: np.ndarray  # (4,)
    chosen: int
    e_star: int
    goal: Vec3
    clamped: bool
    eta_passes: int


def _clamp(e, horizon: int) -> int:
    return int(min(max(int(e), 1), horizon))


class _CachedEta:
    """Per-re-plan memo so repeated goals cost no extra network pass."""

    def __init__(self, eta: EtaProvider, state: RobotState):
        self.eta = eta
        self.state = state
        self.cache: dict[tuple[float, float], int] = {}
        self.passes = 0

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        keys = [(float(x), float(y)) for x, y in pts]
        missing = []
        for k in keys:
            if k not in self.cache and k not in missing:
                missing.append(k)
        if missing:
            vals = self.eta.estimate(self.state, np.array(missing))
            self.passes += len(missing)
            for k, v in zip(missing, vals):
                self.cache[k] = int(v)
        return np.array([self.cache[k] for k in keys])


def _planar_dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def search_region_size(state: RobotState, ball_pos: Sequence[float], traj: np.ndarray,
                       eta) -> tuple[float, int, bool]:
    """Half-width of the corner-search square: distance the ball covers while the arm
    would travel to where the ball is now.  Returns ``(d, e_t, clamped)``."""
    if not isinstance(eta, _CachedEta):
        eta = _CachedEta(eta, state)
    F = len(traj)
    raw = int(eta(np.array([ball_pos[:2]]))[0])
    e_t = _clamp(raw, F)
    return _planar_dist(traj[e_t - 1], ball_pos), e_t, e_t != raw


def find_intermediate_goal(state: RobotState, ball_pos: Sequence[float], traj: np.ndarray,
                           eta: EtaProvider) -> GoalSearch:
    cached = _CachedEta(eta, state)
    F = len(traj)
    d, e_t, clamped = search_region_size(state, ball_pos, traj, cached)
    x, y = float(ball_pos[0]), float(ball_pos[1])
    z = float(ball_pos[2]) if len(ball_pos) > 2 else 0.0
    corners = np.array([[x + d, y + d, z], [x + d, y - d, z],
                        [x - d, y - d, z], [x - d, y + d, z]])
    raw = cached(corners[:, :2])
    etas = np.array([_clamp(e, F) for e in raw])
    clamped |= bool(np.any(etas != raw))
    gaps = [_planar_dist(c, traj[e - 1]) for c, e in zip(corners, etas)]
    best = int(np.argmin(gaps))  # first index wins ties
    raw_star = int(cached(corners[best:best + 1, :2])[0])
    e_star = _clamp(raw_star, F)
    g = traj[e_star - 1]
    return GoalSearch(d, e_t, corners, etas, best, e_star, Vec3(float(g[0]), float(g[1]), z),
                      clamped or e_star != raw_star, cached.passes)


def brute_force_goal(state: RobotState, traj: np.ndarray, eta: EtaProvider) -> tuple[int, Vec3]:
    """Scan every forecast offset for the best arm/ball simultaneous-arrival point.

    Picks the offset ``e`` minimising ``|eta(traj[e]) - e|`` (earliest on ties).
    """
    F = len(traj)
    etas = np.asarray(eta.estimate(state, traj[:, :2]))
    gap = np.abs(etas - np.arange(1, F + 1))
    e = int(np.argmin(gap)) + 1
    g = traj[e - 1]
    return e, Vec3(float(g[0]), float(g[1]), float(g[2]))


@dataclass
class EpisodeSetup:
    table: TableConfig = field(default_factory=TableConfig)
    arm: ArmConfig = field(default_factory=ArmConfig)
    speed_range: tuple[float, float] = (0.0, 0.009)
    spawn_margin: float = 0.1
    max_steps: int = 500
    history: int = 24
    horizon: int = 300
    eta_window: int = 500
    t_ttr_init: int = 75
    gamma: float = 0.9
    t_ttr_min: int = 25
    # arrival radius for the solvability scan; None means the box circumradius
    solvable_radius: float | None = None

    def schedule(self) -> ReplanSchedule:
        return ReplanSchedule(self.t_ttr_init, self.gamma, self.t_ttr_min)

    @property
    def solvability_radius(self) -> float:
        if self.solvable_radius is not None:
            return self.solvable_radius
        return self.arm.box_half_width * math.sqrt(2.0)


@dataclass
class Models:
    forecaster: ForecastProvider | None = None
    eta: EtaProvider | None = None


@dataclass
class ReplanRecord:
    step: int
    state: RobotState
    search: GoalSearch
    forecast_passes: int
    eta_passes: int
    latency_s: float


@dataclass
class EpisodeResult:
    outcome: EpisodeOutcome
    steps_elapsed: int
    replan_count: int
    replan_latencies: list[float]
    solvable: bool
    seed: int
    mode: PlannerMode
    replans: list[ReplanRecord] = field(default_factory=list)
    trace: list[dict] | None = None

    @property
    def success(self) -> bool:
        return self.outcome is EpisodeOutcome.SUCCESS

    @property
    def replans_excluding_first(self) -> int:
        return max(self.replan_count - 1, 0)


def _chase_reaches(robot: RobotState, start: Sequence[float], path: np.ndarray, off_table: np.ndarray,
                   arm: ArmConfig, n: int, radius: float) -> bool:
    """Drop-free target pursuit along the recorded path: does the end effector ever come
    within ``radius`` of the on-table ball?"""
    planner = StaticPlanner(arm, chunk_steps=1)
    r2 = radius * radius
    bx, by = float(start[0]), float(start[1])
    for t in range(n):
        g = Goal(Vec3(bx, by, 0.0))
        robot = apply_action(robot, planner.step(robot, g), arm)
        if off_table[t]:
            return False
        bx, by = float(path[t, 0]), float(path[t, 1])
        ee = robot.end_effector
        if (ee.x - bx) ** 2 + (ee.y - by) ** 2 <= r2:
            return True
    return False


def is_solvable(robot: RobotState, path: np.ndarray, off_table: np.ndarray, arm: ArmConfig,
                max_steps: int, radius: float, start: Sequence[float] | None = None) -> bool:
    """Whether a static-planner oracle with perfect knowledge of the ball gets there in time.

    ``path[k]`` is the ball position at step k+1.  The episode counts as solvable if
    the arm, planning straight to some future on-table ball position, arrives no later
    than the ball does, or, when the start position is given, if chasing the ball
    brings the end effector within ``radius`` of it at some step.
    """
    n = min(len(path), max_steps)
    times = np.arange(1, n + 1)
    on = ~np.asarray(off_table[:n], dtype=bool)
    if not on.any():
        return False
    goals = path[:n][on][:, :2]
    deadlines = times[on]
    arr = batch_dls_arrival(np.asarray(robot.joint_angles), goals, arm, max_steps,
                            radius=radius, deadlines=deadlines, first_only=True)
    hit = arr >= 0
    if np.any(arr[hit] <= deadlines[hit]):
        return True
    if start is None:
        return False
    return _chase_reaches(robot, start, path, off_table, arm, n, radius)


def padded_window(history: Sequence[Sequence[float]], H: int) -> np.ndarray:
    """Last ``H`` planar observations, front-padded with the earliest one."""
    h = np.asarray(history[-H:], dtype=np.float64)
    if len(h) < H:
        h = np.concatenate([np.repeat(h[:1], H - len(h), axis=0), h])
    return h


def goal_for_mode(mode: PlannerMode, ball_pos: Sequence[float], state: RobotState | None = None,
                  traj: np.ndarray | None = None, eta: EtaProvider | None = None) -> GoalSearch | Vec3:
    """Goal rule of each planner mode at a re-plan instant.

    Target pursuit simply chases the current ball position; the dynamic modes run the
    corner search over whichever forecast they were handed.
    """
    if mode is PlannerMode.TARGET_PURSUIT:
        return Vec3(float(ball_pos[0]), float(ball_pos[1]),
                    float(ball_pos[2]) if len(ball_pos) > 2 else 0.0)
    if traj is None or eta is None or state is None:
        raise ConfigError(f"{mode.value} needs a robot state, a forecast and an ETA provider")
    return find_intermediate_goal(state, ball_pos, traj, eta)


def _check_models(mode: PlannerMode, models: Models | None) -> Models:
    models = Models() if models is None else models
    if mode is PlannerMode.DYNAMIC and (models.forecaster is None or models.eta is None):
        raise ConfigError("Dynamic mode needs a trained forecaster and ETA model")
    if mode is PlannerMode.DYNAMIC_ORACLE_TRAJ and models.eta is None:
        raise ConfigError("DynamicOracleTraj mode needs a trained ETA model")
    return models


class _Replanner:
    def __init__(self, mode: PlannerMode, setup: EpisodeSetup, forecaster, eta):
        self.mode = mode
        self.setup = setup
        self.forecaster = forecaster
        self.eta = eta
        self.sched = setup.schedule()
        self.next_at = 0
        self.records: list[ReplanRecord] = []
        self.goal: Vec3 | None = None
        self.last: GoalSearch | None = None

    def goal_at(self, t: int, robot: RobotState, ball_pos, history) -> tuple[Vec3, bool]:
        if self.mode is PlannerMode.TARGET_PURSUIT:
            self.goal = goal_for_mode(self.mode, ball_pos)
            return self.goal, False
        if t != self.next_at:
            return self.goal, False
        t0 = time.perf_counter()
        fp0 = self.forecaster.passes
        traj = self.forecaster.forecast(np.asarray(history), t)
        search = goal_for_mode(self.mode, ball_pos, robot, traj, self.eta)
        dt = time.perf_counter() - t0
        self.records.append(ReplanRecord(t, robot, search, self.forecaster.passes - fp0,
                                         search.eta_passes, dt))
        self.goal = search.goal
        self.last = search
        self.next_at = t + self.sched.t_ttr
        next_ttr(self.sched)
        return self.goal, True


def _trace_row(t, ball_pos, ee, goal, rp: _Replanner, replanned: bool) -> dict:
    s = rp.last if replanned else None
    return {
        "step": t,
        "ball_x": ball_pos[0], "ball_y": ball_pos[1],
        "ee_x": ee.x, "ee_y": ee.y,
        "gtilde_x": goal.x, "gtilde_y": goal.y,
        "t_ttr": rp.sched.t_ttr if rp.mode is not PlannerMode.TARGET_PURSUIT else 0,
        "replanned_flag": int(replanned),
        "d": s.d if s else "",
        "e_t": s.e_t if s else "",
        "corner_etas": ";".join(str(int(e)) for e in s.corner_etas) if s else "",
        "e_star": s.e_star if s else "",
        "outcome": "",
    }


def run_episode(mode: PlannerMode, seed: int, setup: EpisodeSetup | None = None,
                models: Models | None = None, trace: bool = False,
                solvable: bool | None = None) -> EpisodeResult:
    """One trapping episode of at most ``setup.max_steps`` steps.

    ``solvable`` may be supplied when it was already computed for the same seed.
    """
    setup = EpisodeSetup() if setup is None else setup
    models = _check_models(mode, models)
    table, arm = setup.table, setup.arm
    ball = sample_initial(EpisodeInit(seed, setup.speed_range, setup.spawn_margin), table)
    robot = home_state(arm)
    need_oracle = solvable is None or mode is PlannerMode.DYNAMIC_ORACLE_TRAJ
    if need_oracle:
        oracle = run_ballistic(ball, table, setup.max_steps + setup.horizon)
    if solvable is None:
        solvable = is_solvable(robot, oracle.positions, oracle.off_table, arm, setup.max_steps,
                               setup.solvability_radius, start=ball.position)
    if mode is PlannerMode.DYNAMIC_ORACLE_TRAJ:
        forecaster = OracleForecaster(oracle.positions, setup.horizon)
    else:
        forecaster = models.forecaster
    rp = _Replanner(mode, setup, forecaster, models.eta)
    planner = StaticPlanner(arm)
    history = [(ball.position.x, ball.position.y)]
    rows = [] if trace else None
    outcome = EpisodeOutcome.TIMEOUT
    steps = setup.max_steps
    for t in range(setup.max_steps):
        goal, replanned = rp.goal_at(t, robot, ball.position, history)
        if trace:
            rows.append(_trace_row(t, ball.position, robot.end_effector, goal, rp, replanned))
        g = Goal(goal)
        robot = apply_action(robot, planner.step(robot, g), arm)
        ball = step_ball(ball, table)
        trap, robot = attempt_trap(robot, g, ball, arm)
        if trap is not TrapOutcome.NOT_YET:
            outcome = EpisodeOutcome.SUCCESS if trap is TrapOutcome.SUCCESS else EpisodeOutcome.MISS
            steps = t + 1
            break
        if ball.status is BallStatus.IN_POCKET:
            outcome = EpisodeOutcome.BALL_LOST
            steps = t + 1
            break
        history.append((ball.position.x, ball.position.y))
    if trace and rows:
        rows[-1]["outcome"] = f"{outcome.value} at step {steps}"
    return EpisodeResult(outcome, steps, len(rp.records), [r.latency_s for r in rp.records],
                         solvable, seed, mode, rp.records, rows)


@dataclass
class ReachSetup:
    arm: ArmConfig = field(default_factory=ArmConfig)
    spawn_radius: tuple[float, float] = (0.15, 0.8)
    max_steps: int = 500
    history: int = 24
    horizon: int = 300
    t_ttr_init: int = 75
    gamma: float = 0.9
    t_ttr_min: int = 25
    # forecaster normalisation extents for the open workspace
    extent: float = 1.5
    # success radius; kept above the planner's stop tolerance so that an arm
    # settling on the edge of its goal region still counts a near-exact goal
    success_tolerance: float = 0.02

    def schedule(self) -> ReplanSchedule:
        return ReplanSchedule(self.t_ttr_init, self.gamma, self.t_ttr_min)


def run_reach_episode(mode: PlannerMode, seed: int, speed: float, setup: ReachSetup | None = None,
                      models: Models | None = None) -> EpisodeResult:
    """Straight-line moving target; success when the end effector gets within tolerance of it."""
    setup = ReachSetup() if setup is None else setup
    models = _check_models(mode, models)
    arm = setup.arm
    base = arm.base_position
    target = sample_reach_target(seed, speed, (base.x, base.y), setup.spawn_radius)
    if mode is PlannerMode.DYNAMIC_ORACLE_TRAJ:
        path = run_reach_target(target, setup.max_steps + setup.horizon)
        forecaster = OracleForecaster(path.positions, setup.horizon)
    else:
        forecaster = models.forecaster
    rp = _Replanner(mode, setup, forecaster, models.eta)
    planner = StaticPlanner(arm)
    robot = home_state(arm)
    history = [(target.position.x, target.position.y)]
    tol = setup.success_tolerance
    outcome = EpisodeOutcome.TIMEOUT
    steps = setup.max_steps
    for t in range(setup.max_steps):
        goal, _ = rp.goal_at(t, robot, target.position, history)
        robot = apply_action(robot, planner.step(robot, Goal(goal)), arm)
        target = step_reach_target(target)
        ee = robot.end_effector
        if math.hypot(ee.x - target.position.x, ee.y - target.position.y) <= tol:
            outcome = EpisodeOutcome.SUCCESS
            steps = t + 1
            break
        history.append((target.position.x, target.position.y))
    # reach targets always start inside the workspace
    return EpisodeResult(outcome, steps, len(rp.records), [r.latency_s for r in rp.records],
                         True, seed, mode, rp.records)
