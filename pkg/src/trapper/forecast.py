"""Single-shot ball trajectory forecaster.

A small 1-D ConvNet reads the last ``H`` planar ball positions and emits the
next ``F`` positions in one forward pass.  Coordinates are scaled to [-1, 1]
by the table half extents on the way in and back out.

Two input channels hold the scaled positions and two more their step-to-step
differences (times ``diff_gain``, since raw differences are tiny next to the
positions).  With ``anchor_last`` the dense head's output is read relative to
the newest observed position; the loss is still taken on absolute positions.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .fileio import read_container, write_container
from .physics import EpisodeInit, TableConfig, sample_initial, simulate_many
from .tinynet import Loss, Network, TrainConfig, conv1d, dense, flatten, relu, train


@dataclass(frozen=True)
class ForecastConfig:
    H: int = 24
    F: int = 300
    half_width: float = 1.0
    half_height: float = 0.6
    surface_z: float = 0.0
    channels: int = 32
    kernel: int = 5
    hidden: int = 256
    diff_gain: float = 20.0
    anchor_last: bool = True

    def __post_init__(self):
        if self.H < 1 or self.F < 4 * self.H:
            raise ConfigError(f"forecast horizon F={self.F} must be at least 4*H={4 * self.H}")
        if self.half_width <= 0 or self.half_height <= 0:
            raise ConfigError("normalisation extents must be positive")

    @classmethod
    def for_table(cls, table: TableConfig, **kw) -> "ForecastConfig":
        return cls(half_width=table.half_width, half_height=table.half_height,
                   surface_z=table.surface_z, **kw)

    @property
    def scale(self) -> np.ndarray:
        return np.array([self.half_width, self.half_height])


def build_network(cfg: ForecastConfig, seed: int = 0) -> Network:
    c, k = cfg.channels, cfg.kernel
    return Network([
        conv1d(4, c, k), relu(),
        conv1d(c, c, k), relu(),
        flatten(),
        dense(c * cfg.H, cfg.hidden), relu(),
        dense(cfg.hidden, 2 * cfg.F),
    ], seed=seed)


@dataclass
class ForecastModel:
    cfg: ForecastConfig
    net: Network

    def _encode(self, windows: np.ndarray) -> np.ndarray:
        w = np.asarray(windows, dtype=np.float64)
        if w.ndim != 3 or w.shape[1] != self.cfg.H or w.shape[2] < 2:
            raise ShapeError(f"expected windows of shape (N, {self.cfg.H}, 2), got {w.shape}")
        p = w[:, :, :2] / self.cfg.scale
        d = np.diff(p, axis=1, prepend=p[:, :1]) * self.cfg.diff_gain
        return np.concatenate([p, d], axis=2).transpose(0, 2, 1)

    def _anchor(self, windows: np.ndarray) -> np.ndarray:
        """Scaled newest position per window, (N, 1, 2), or zeros without anchoring."""
        w = np.asarray(windows, dtype=np.float64)
        if not self.cfg.anchor_last:
            return np.zeros((len(w), 1, 2))
        return w[:, -1:, :2] / self.cfg.scale

    def _decode(self, out: np.ndarray, anchor: np.ndarray) -> np.ndarray:
        xy = (out.reshape(len(out), self.cfg.F, 2) + anchor) * self.cfg.scale
        lim = 1.5 * self.cfg.scale
        return np.clip(xy, -lim, lim)

    def predict_batch(self, windows: np.ndarray) -> np.ndarray:
        """(N, H, 2) histories -> (N, F, 2) planar forecasts, one forward pass."""
        return self._decode(self.net.predict(self._encode(windows)), self._anchor(windows))

    def predict(self, window: np.ndarray) -> np.ndarray:
        """(H, 2) history -> (F, 3) forecast with the table surface height appended."""
        w = np.asarray(window, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != self.cfg.H:
            raise ShapeError(f"expected a ({self.cfg.H}, 2) window, got {w.shape}")
        xy = self.predict_batch(w[None])[0]
        return np.column_stack([xy, np.full(self.cfg.F, self.cfg.surface_z)])

    def save(self, path) -> None:
        self.net.save(path, {"forecast": asdict(self.cfg)})

    @classmethod
    def load(cls, path) -> "ForecastModel":
        net, meta = Network.load(path)
        if "forecast" not in meta:
            raise ConfigError(f"{path} is not a forecaster model")
        return cls(ForecastConfig(**meta["forecast"]), net)


class LearnedForecaster:
    """Forecast provider for the planner; ``passes`` counts network forward passes."""

    def __init__(self, model: ForecastModel):
        self.model = model
        self._base = model.net.forward_passes

    @property
    def passes(self) -> int:
        return self.model.net.forward_passes - self._base

    def forecast(self, history: np.ndarray, t: int) -> np.ndarray:
        h = np.asarray(history, dtype=np.float64)[:, :2]
        H = self.model.cfg.H
        if len(h) < H:
            h = np.concatenate([np.repeat(h[:1], H - len(h), axis=0), h])
        return self.model.predict(h[-H:])


def oracle_forecast(positions: np.ndarray, t: int, F: int) -> np.ndarray:
    """Recorded future slice after step ``t``; ``positions[k]`` is the state at step k.

    Past the end of the recording the final point is repeated.
    """
    p = np.asarray(positions)
    fut = p[t + 1:t + 1 + F]
    if len(fut) < F:
        last = p[-1] if len(fut) == 0 else fut[-1]
        fut = np.concatenate([fut, np.repeat(last[None], F - len(fut), axis=0)])
    return fut


# ---------------------------------------------------------------- data

@dataclass
class ForecastDataset:
    inputs: np.ndarray    # (N, H, 2) table coordinates
    targets: np.ndarray   # (N, F, 2)
    episode: np.ndarray   # (N,) episode index, for grouped splits
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.inputs)

    def save(self, path) -> None:
        write_container(path, "forecast-dataset", self.meta,
                        {"inputs": self.inputs, "targets": self.targets, "episode": self.episode})

    @classmethod
    def load(cls, path) -> "ForecastDataset":
        meta, a = read_container(path, kind="forecast-dataset")
        return cls(a["inputs"], a["targets"], a["episode"], meta)


def rollout_episodes(n_episodes: int, table: TableConfig, speed_range, spawn_margin: float,
                     n_steps: int, seed: int, friction_range=None) -> tuple[np.ndarray, np.ndarray]:
    """Arm-free rollouts including the start point: (N, n_steps + 1, 2) and off-table flags."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**63 - 1, size=n_episodes)
    if friction_range is None:
        decay = None
    else:
        fr = rng.uniform(friction_range[0], friction_range[1], size=n_episodes)
        decay = np.exp(-fr * table.dt)
    p0 = np.empty((n_episodes, 2))
    v0 = np.empty((n_episodes, 2))
    for i, s in enumerate(seeds):
        b = sample_initial(EpisodeInit(int(s), tuple(speed_range), spawn_margin), table)
        p0[i] = b.position[:2]
        v0[i] = b.velocity[:2]
    xy, off = simulate_many(p0, v0, table, n_steps, decay=decay)
    xy = np.concatenate([p0[:, None, :], xy], axis=1)
    off = np.concatenate([np.zeros((n_episodes, 1), dtype=bool), off], axis=1)
    return xy, off


def generate_training_set(n_episodes: int, table: TableConfig, speed_range=(0.0, 0.01),
                          spawn_margin: float = 0.1, seed: int = 0, windows_per_episode: int = 5,
                          episode_steps: int = 2000, H: int = 24, F: int = 300,
                          friction_range=None) -> ForecastDataset:
    """Cut ``windows_per_episode`` random (H, F) windows out of long arm-free episodes."""
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    if episode_steps + 1 < H + F:
        raise ConfigError(f"episodes of {episode_steps} steps cannot hold a window of {H + F}")
    xy, _ = rollout_episodes(n_episodes, table, speed_range, spawn_margin, episode_steps, seed,
                             friction_range)
    rng = np.random.default_rng([seed, 1])
    starts = rng.integers(0, episode_steps + 1 - (H + F) + 1, size=(n_episodes, windows_per_episode))
    idx = starts[:, :, None] + np.arange(H + F)
    win = xy[np.arange(n_episodes)[:, None, None], idx]          # (E, W, H+F, 2)
    win = win.reshape(-1, H + F, 2)
    meta = {"H": H, "F": F, "count": int(len(win)), "seed": int(seed),
            "n_episodes": int(n_episodes), "speed_range": list(map(float, speed_range)),
            "friction_range": None if friction_range is None else list(map(float, friction_range))}
    return ForecastDataset(win[:, :H].copy(), win[:, H:].copy(),
                           np.repeat(np.arange(n_episodes), windows_per_episode), meta)


# ---------------------------------------------------------------- training

@dataclass
class ForecastReport:
    losses: list[float]
    initial_loss: float
    final_loss: float
    bucket_errors: list[float]   # held-out mean planar error per horizon bucket, metres
    bucket: int = 50


def horizon_errors(model: ForecastModel, inputs: np.ndarray, targets: np.ndarray,
                   bucket: int = 50, batch: int = 512) -> list[float]:
    """Mean Euclidean error per block of ``bucket`` forecast steps."""
    err = np.zeros(model.cfg.F)
    for i in range(0, len(inputs), batch):
        pred = model.predict_batch(inputs[i:i + batch])
        err += np.linalg.norm(pred - targets[i:i + batch], axis=2).sum(axis=0)
    err /= len(inputs)
    return [float(err[j:j + bucket].mean()) for j in range(0, model.cfg.F, bucket)]


def split_by_episode(ds: ForecastDataset, val_fraction: float, seed: int):
    eps = np.unique(ds.episode)
    rng = np.random.default_rng([seed, 2])
    n_val = max(1, int(round(val_fraction * len(eps)))) if len(eps) > 1 else 0
    val_eps = rng.choice(eps, size=n_val, replace=False)
    val = np.isin(ds.episode, val_eps)
    return ~val, val


def train_forecaster(ds: ForecastDataset, cfg: ForecastConfig, tcfg: TrainConfig,
                     val_fraction: float = 0.1, init_seed: int = 0) -> tuple[ForecastModel, ForecastReport]:
    if len(ds) == 0:
        raise ConfigError("empty forecaster dataset")
    if ds.inputs.shape[1] != cfg.H or ds.targets.shape[1] != cfg.F:
        raise ShapeError(f"dataset windows ({ds.inputs.shape[1]}, {ds.targets.shape[1]}) "
                         f"do not match H={cfg.H}, F={cfg.F}")
    model = ForecastModel(cfg, build_network(cfg, init_seed))
    tr, val = split_by_episode(ds, val_fraction, tcfg.seed)
    x = model._encode(ds.inputs[tr])
    y = (ds.targets[tr] / cfg.scale - model._anchor(ds.inputs[tr])).reshape(int(tr.sum()), -1)
    rep = train(model.net, x, y, TrainConfig(tcfg.learning_rate, tcfg.epochs, tcfg.batch_size,
                                             tcfg.seed, Loss.MEAN_SQUARED_ERROR, tcfg.optimizer))
    model = ForecastModel(cfg, rep.network)
    held_in, held_out = (ds.inputs[val], ds.targets[val]) if val.any() else (ds.inputs[tr], ds.targets[tr])
    buckets = horizon_errors(model, held_in, held_out)
    return model, ForecastReport(rep.losses, rep.initial_loss, rep.final_loss, buckets)


def generate_reach_training_set(n_episodes: int, center, spawn_radius, speed_range, seed: int = 0,
                                windows_per_episode: int = 5, episode_steps: int = 2000,
                                H: int = 24, F: int = 300, stationary: float = 0.0) -> ForecastDataset:
    """Windows of constant-velocity straight-line targets for the open-workspace benchmark.

    A ``stationary`` fraction of the episodes hold still, so a resting target is
    forecast to stay put instead of drifting.
    """
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    if episode_steps + 1 < H + F:
        raise ConfigError(f"episodes of {episode_steps} steps cannot hold a window of {H + F}")
    rng = np.random.default_rng(seed)
    r = np.sqrt(rng.uniform(spawn_radius[0] ** 2, spawn_radius[1] ** 2, n_episodes))
    phi = rng.uniform(0, 2 * np.pi, n_episodes)
    speed = rng.uniform(speed_range[0], speed_range[1], n_episodes)
    speed[rng.random(n_episodes) < stationary] = 0.0
    heading = rng.uniform(0, 2 * np.pi, n_episodes)
    p0 = np.asarray(center[:2], dtype=np.float64) + np.stack([r * np.cos(phi), r * np.sin(phi)], 1)
    v = np.stack([speed * np.cos(heading), speed * np.sin(heading)], 1)
    starts = rng.integers(0, episode_steps + 1 - (H + F) + 1, size=(n_episodes, windows_per_episode))
    k = starts[:, :, None] + np.arange(H + F)                       # (E, W, H+F)
    win = p0[:, None, None, :] + k[..., None] * v[:, None, None, :]
    win = win.reshape(-1, H + F, 2)
    meta = {"H": H, "F": F, "count": int(len(win)), "seed": int(seed), "n_episodes": int(n_episodes),
            "speed_range": list(map(float, speed_range)), "stationary": float(stationary),
            "kind": "reach"}
    return ForecastDataset(win[:, :H].copy(), win[:, H:].copy(),
                           np.repeat(np.arange(n_episodes), windows_per_episode), meta)
