"""Arrival-time classifier for the static planner.

Remaining steps until the arm reaches a goal are quantised into ``n_bins`` bins
of ``bin_width`` steps.  The classifier sees the arm pose and the goal and
returns a distribution over bins; the decoded estimate is the bin midpoint.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .arm import (ArmConfig, Goal, RobotState, StaticPlanner, apply_action, batch_dls_arrival,
                  forward_kinematics, home_state, reachable_target)
from .errors import ConfigError, ShapeError
from .fileio import read_container, write_container
from .physics import TableConfig, Vec3
from .tinynet import Loss, Network, TrainConfig, dense, relu, softmax, train


@dataclass(frozen=True)
class EtaConfig:
    window: int = 500
    n_bins: int = 100
    bin_width: int = 5
    hidden: int = 128

    def __post_init__(self):
        if self.window != self.n_bins * self.bin_width:
            raise ConfigError(f"window {self.window} != n_bins {self.n_bins} * bin_width {self.bin_width}")

    def label(self, steps):
        """Bin index of a remaining-step count; counts past the window land in the last bin."""
        s = np.asarray(steps)
        if np.any(s < 0):
            raise ValueError("remaining steps must be >= 0")
        return np.minimum(s // self.bin_width, self.n_bins - 1)

    def midpoint(self, b):
        return np.asarray(b) * self.bin_width + self.bin_width // 2


N_FEATURES_PER_JOINT = 2


def eta_features(theta: np.ndarray, goals: np.ndarray, arm: ArmConfig) -> np.ndarray:
    """Per row: sin/cos of every joint angle, end effector, goal, goal minus end effector.

    Positions are taken relative to the arm base and divided by its reach.
    """
    th = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    g = np.atleast_2d(np.asarray(goals, dtype=np.float64))[:, :2]
    if th.shape[1] != arm.n_joints:
        raise ShapeError(f"expected {arm.n_joints} joint angles, got {th.shape[1]}")
    th = np.broadcast_to(th, (len(g), arm.n_joints)) if len(th) == 1 else th
    if len(th) != len(g):
        raise ShapeError(f"{len(th)} arm poses but {len(g)} goals")
    phis = np.cumsum(th, axis=1)
    L = np.asarray(arm.link_lengths)
    ee = np.stack([(L * np.cos(phis)).sum(axis=1), (L * np.sin(phis)).sum(axis=1)], axis=1)
    base = np.array([arm.base_position.x, arm.base_position.y])
    gr = (g - base) / arm.reach
    er = ee / arm.reach
    return np.concatenate([np.sin(th), np.cos(th), er, gr, gr - er], axis=1)


def n_features(arm: ArmConfig) -> int:
    return N_FEATURES_PER_JOINT * arm.n_joints + 6


def build_classifier(arm: ArmConfig, cfg: EtaConfig, seed: int = 0) -> Network:
    h = cfg.hidden
    return Network([dense(n_features(arm), h), relu(), dense(h, h), relu(), dense(h, h), relu(),
                    dense(h, cfg.n_bins)], seed=seed)


def build_regressor(arm: ArmConfig, cfg: EtaConfig, seed: int = 0) -> Network:
    h = cfg.hidden
    return Network([dense(n_features(arm), h), relu(), dense(h, h), relu(), dense(h, h), relu(),
                    dense(h, 1)], seed=seed)


@dataclass(frozen=True)
class EtaPrediction:
    bin: int
    steps: int
    distribution: np.ndarray


@dataclass
class EtaModel:
    cfg: EtaConfig
    arm: ArmConfig
    net: Network

    def distribution(self, theta, goals) -> np.ndarray:
        return softmax(self.net.predict(eta_features(theta, goals, self.arm)))

    def predict(self, state: RobotState, g: Goal) -> EtaPrediction:
        p = self.distribution(np.asarray(state.joint_angles), np.array([g.position[:2]]))[0]
        b = int(np.argmax(p))
        return EtaPrediction(b, int(self.cfg.midpoint(b)), p)

    def estimate_steps(self, theta, goals) -> np.ndarray:
        """Midpoint step estimate for each goal row, one forward pass."""
        logits = self.net.predict(eta_features(theta, goals, self.arm))
        return self.cfg.midpoint(np.argmax(logits, axis=1)).astype(np.int64)

    def save(self, path) -> None:
        self.net.save(path, {"eta": asdict(self.cfg), "arm": _arm_dict(self.arm)})

    @classmethod
    def load(cls, path) -> "EtaModel":
        net, meta = Network.load(path)
        if "eta" not in meta:
            raise ConfigError(f"{path} is not an ETA model")
        return cls(EtaConfig(**meta["eta"]), _arm_from_dict(meta["arm"]), net)


def _arm_dict(arm: ArmConfig) -> dict:
    d = asdict(arm)
    d["base_position"] = list(arm.base_position)
    return d


def _arm_from_dict(d: dict) -> ArmConfig:
    return ArmConfig(**{**d, "link_lengths": tuple(d["link_lengths"]),
                        "home_angles": tuple(d["home_angles"]),
                        "base_position": Vec3(*d["base_position"])})


def predict_eta(model: EtaModel, state: RobotState, g: Goal) -> EtaPrediction:
    return model.predict(state, g)


class LearnedEta:
    """ETA provider for the planner; ``passes`` counts goal evaluations."""

    def __init__(self, model: EtaModel):
        self.model = model
        self.passes = 0
        self.forward_calls = 0

    def estimate(self, state: RobotState, goals: np.ndarray) -> np.ndarray:
        goals = np.asarray(goals, dtype=np.float64).reshape(-1, 2)
        self.passes += len(goals)
        self.forward_calls += 1
        return self.model.estimate_steps(np.asarray(state.joint_angles), goals)


def oracle_eta(state: RobotState, g: Goal, arm: ArmConfig, window: int = 500) -> int | None:
    """Exact steps for the static planner to bring the end effector within tolerance of ``g``.

    ``None`` means unreachable: outside the workspace or not reached within ``window``.
    """
    gx, gy = g.position.x, g.position.y
    if reachable_target(gx, gy, arm)[2]:
        return None
    s = RobotState(state.joint_angles, state.joint_velocities, state.end_effector)
    planner = StaticPlanner(arm)
    eps = arm.goal_tolerance
    for k in range(window + 1):
        ee = s.end_effector
        if math.hypot(ee.x - gx, ee.y - gy) <= eps:
            return k
        if k == window:
            break
        s = apply_action(s, planner.step(s, g), arm)
    return None


# ---------------------------------------------------------------- data

@dataclass
class EtaDataset:
    theta: np.ndarray       # (N, n) arm pose
    goals: np.ndarray       # (N, 2)
    remaining: np.ndarray   # (N,) exact steps to arrival
    labels: np.ndarray      # (N,) bins
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def save(self, path) -> None:
        write_container(path, "eta-dataset", self.meta,
                        {"theta": self.theta, "goals": self.goals,
                         "remaining": self.remaining, "labels": self.labels})

    @classmethod
    def load(cls, path) -> "EtaDataset":
        meta, a = read_container(path, kind="eta-dataset")
        return cls(a["theta"], a["goals"], a["remaining"], a["labels"], meta)


def sample_goals(rng, n: int, arm: ArmConfig, table: TableConfig | None) -> np.ndarray:
    """Uniform goals over the table clipped to the arm workspace (or the whole workspace)."""
    base = np.array([arm.base_position.x, arm.base_position.y])
    lim = arm.reach * (1.0 - 1e-3)
    if table is None:
        lo, hi = base - lim, base + lim
    else:
        lo = np.maximum(base - lim, [-table.half_width, -table.half_height])
        hi = np.minimum(base + lim, [table.half_width, table.half_height])
        if np.any(hi <= lo):
            raise ConfigError("arm workspace does not overlap the table")
    out = np.empty((0, 2))
    tries = 0
    while len(out) < n:
        cand = rng.uniform(lo, hi, size=(2 * n, 2))
        ok = np.hypot(*(cand - base).T) <= lim
        out = np.concatenate([out, cand[ok]])
        tries += 1
        if tries > 1000:
            raise ConfigError("could not sample reachable goals")
    return out[:n]


def collect_eta_data(n_goals: int, arm: ArmConfig, table: TableConfig | None, seed: int = 0,
                     cfg: EtaConfig = EtaConfig(), samples_per_run: int = 5,
                     chains: int = 64, home_restart: float = 0.2) -> tuple[EtaDataset, int]:
    """Label arm poses along static-planner runs with their remaining steps to the goal.

    ``chains`` runs proceed side by side; each chain starts its next run from the home
    pose (probability ``home_restart``, since every episode starts there) or else, evenly,
    from the arrival pose or a random intermediate pose of its previous run.  Runs that do not
    arrive within the window are skipped and counted.

    Returns the dataset and the number of skipped goals.
    """
    if n_goals < 1:
        raise ConfigError("n_goals must be >= 1")
    rng = np.random.default_rng(seed)
    goals = sample_goals(rng, n_goals, arm, table)
    home = np.asarray(home_state(arm).joint_angles)
    th_rows, g_rows, rem_rows = [], [], []
    skipped = 0
    starts = np.repeat(home[None], min(chains, n_goals), axis=0)
    for lo in range(0, n_goals, chains):
        g = goals[lo:lo + chains]
        th0 = starts[:len(g)]
        arrival, hist = batch_dls_arrival(th0, g, arm, cfg.window, record=True)
        nxt = np.empty_like(th0)
        for i in range(len(g)):
            a = int(arrival[i])
            if a < 0:
                skipped += 1
                nxt[i] = hist[i, -1]
                continue
            ks = rng.integers(0, a + 1, size=samples_per_run)
            th_rows.append(hist[i, ks])
            g_rows.append(np.repeat(g[i][None], samples_per_run, axis=0))
            rem_rows.append(a - ks)
            u = rng.random()
            if u < home_restart:
                nxt[i] = home
            elif u < home_restart + (1.0 - home_restart) / 2:
                nxt[i] = hist[i, a]
            else:
                nxt[i] = hist[i, int(rng.integers(0, a + 1))]
        starts = np.concatenate([nxt, starts[len(g):]])
    if not rem_rows:
        raise ConfigError("no goal was reached; the dataset is empty")
    rem = np.concatenate(rem_rows).astype(np.int64)
    meta = {"window": cfg.window, "n_bins": cfg.n_bins, "bin_width": cfg.bin_width,
            "seed": int(seed), "n_goals": int(n_goals), "skipped": skipped,
            "count": int(len(rem)), "region": "workspace" if table is None else "table"}
    ds = EtaDataset(np.concatenate(th_rows), np.concatenate(g_rows), rem, cfg.label(rem), meta)
    return ds, skipped


# ---------------------------------------------------------------- training

@dataclass
class EtaReport:
    losses: list[float]
    initial_loss: float
    final_loss: float
    within_one: float       # held-out fraction with |bin error| <= 1
    exact: float
    mean_abs_bins: float


def bin_metrics(pred_bins: np.ndarray, true_bins: np.ndarray) -> tuple[float, float, float]:
    err = np.abs(np.asarray(pred_bins) - np.asarray(true_bins))
    return float(np.mean(err <= 1)), float(np.mean(err == 0)), float(np.mean(err))


def _split(n: int, val_fraction: float, seed: int):
    rng = np.random.default_rng([seed, 3])
    # samples come in groups of one run; keep groups together
    val = np.zeros(n, dtype=bool)
    val[rng.permutation(n)[:int(round(val_fraction * n))]] = True
    return ~val, val


def _group_split(ds: EtaDataset, val_fraction: float, seed: int):
    keys = np.unique(ds.goals, axis=0, return_inverse=True)[1].ravel()
    n_groups = keys.max() + 1
    tr_g, val_g = _split(n_groups, val_fraction, seed)
    return tr_g[keys], val_g[keys]


def train_eta(ds: EtaDataset, arm: ArmConfig, tcfg: TrainConfig, cfg: EtaConfig = EtaConfig(),
              val_fraction: float = 0.1, init_seed: int = 0) -> tuple[EtaModel, EtaReport]:
    if len(ds) == 0:
        raise ConfigError("empty ETA dataset")
    tr, val = _group_split(ds, val_fraction, tcfg.seed)
    if not val.any():
        val = tr
    x = eta_features(ds.theta, ds.goals, arm)
    net = build_classifier(arm, cfg, init_seed)
    rep = train(net, x[tr], ds.labels[tr],
                TrainConfig(tcfg.learning_rate, tcfg.epochs, tcfg.batch_size, tcfg.seed,
                            Loss.SOFTMAX_CROSS_ENTROPY, tcfg.optimizer))
    model = EtaModel(cfg, arm, rep.network)
    pred = np.argmax(model.net.predict(x[val]), axis=1)
    w1, ex, mae = bin_metrics(pred, ds.labels[val])
    return model, EtaReport(rep.losses, rep.initial_loss, rep.final_loss, w1, ex, mae)


def train_eta_regression(ds: EtaDataset, arm: ArmConfig, tcfg: TrainConfig, cfg: EtaConfig = EtaConfig(),
                         val_fraction: float = 0.1, init_seed: int = 0) -> tuple[Network, EtaReport]:
    """Same trunk with a scalar head fitted to remaining steps / window by squared error."""
    tr, val = _group_split(ds, val_fraction, tcfg.seed)
    if not val.any():
        val = tr
    x = eta_features(ds.theta, ds.goals, arm)
    y = (np.minimum(ds.remaining, cfg.window - 1) / cfg.window)[:, None]
    rep = train(build_regressor(arm, cfg, init_seed), x[tr], y[tr],
                TrainConfig(tcfg.learning_rate, tcfg.epochs, tcfg.batch_size, tcfg.seed,
                            Loss.MEAN_SQUARED_ERROR, tcfg.optimizer))
    steps = np.clip(rep.network.predict(x[val])[:, 0] * cfg.window, 0, cfg.window - 1)
    w1, ex, mae = bin_metrics(cfg.label(np.floor(steps).astype(np.int64)), ds.labels[val])
    return rep.network, EtaReport(rep.losses, rep.initial_loss, rep.final_loss, w1, ex, mae)
