"""Experiment harness: dataset generation, training, sweeps, reach benchmark, trace replay."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import eta as eta_mod
from . import forecast as fc
from .config import RunConfig
from .dynaplan import (EpisodeResult, Models, PlannerMode, run_episode, run_reach_episode)
from .errors import ConfigError, TraceParseError
from .tinynet import TrainConfig

log = logging.getLogger(__name__)

DATA_FILES = {
    "forecast": "forecast.bin",
    "eta": "eta.bin",
    "reach_forecast": "reach_forecast.bin",
    "reach_eta": "reach_eta.bin",
}
MODEL_FILES = {
    "forecast": "forecaster.bin",
    "eta": "eta.bin",
    "reach_forecast": "reach_forecaster.bin",
    "reach_eta": "reach_eta.bin",
}
SWEEP_COLUMNS = ["mode", "param", "value", "repeat", "success_all", "success_solvable",
                 "n_solvable", "mean_replans", "mean_replan_ms", "base_seed"]
EPISODE_COLUMNS = ["mode", "param", "value", "repeat", "index", "seed", "outcome", "solvable",
                   "steps", "replans", "mean_replan_ms", "max_forecast_passes", "max_eta_passes"]
PARAMS = ("InitialVelocity", "FrictionLoss")
REACH_PARAM = "TargetSpeed"


def derive_seed(base_seed: int, param: str, value: float, repeat: int, index: int) -> int:
    """Episode seed shared by every planner mode, so modes are compared on the same balls."""
    key = f"{param}|{float(value)!r}|{repeat}|{index}".encode()
    h = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
    return (base_seed ^ h) & (2**63 - 1)


# ---------------------------------------------------------------- data + training

def _speed_range(cfg: RunConfig, velocity_range) -> tuple[float, float]:
    s = cfg.planner.velocity_scale
    return (velocity_range[0] * s, velocity_range[1] * s)


def cmd_gen_data(cfg: RunConfig, out_dir: Path) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    f, e, r = cfg.forecaster, cfg.eta, cfg.reach
    if f.n_episodes < 1 or e.n_goals < 1 or r.forecast_episodes < 1 or r.eta_goals < 1:
        raise ConfigError("dataset sizes must be >= 1 (empty datasets are not allowed)")
    table, arm = cfg.table.build(), cfg.arm.build()
    ecfg = cfg.eta_config()
    manifest = {"seed": cfg.seed, "files": {}}

    ds = fc.generate_training_set(f.n_episodes, table, _speed_range(cfg, f.velocity_range),
                                  cfg.planner.spawn_margin, f.data_seed ^ cfg.seed,
                                  f.windows_per_episode, f.episode_steps, f.H, f.F, f.friction_range)
    ds.save(out_dir / DATA_FILES["forecast"])
    manifest["files"]["forecast"] = {"file": DATA_FILES["forecast"], **ds.meta}

    eds, skipped = eta_mod.collect_eta_data(e.n_goals, arm, table, e.data_seed ^ cfg.seed, ecfg,
                                            e.samples_per_run)
    eds.save(out_dir / DATA_FILES["eta"])
    manifest["files"]["eta"] = {"file": DATA_FILES["eta"], **eds.meta}

    base = arm.base_position
    rds = fc.generate_reach_training_set(r.forecast_episodes, (base.x, base.y), r.spawn_radius,
                                         (0.0, max(r.speeds) * cfg.planner.velocity_scale),
                                         r.data_seed ^ cfg.seed, f.windows_per_episode,
                                         r.episode_steps, f.H, f.F, r.stationary_fraction)
    rds.save(out_dir / DATA_FILES["reach_forecast"])
    manifest["files"]["reach_forecast"] = {"file": DATA_FILES["reach_forecast"], **rds.meta}

    reds, _ = eta_mod.collect_eta_data(r.eta_goals, arm, None, (r.data_seed + 1) ^ cfg.seed, ecfg,
                                       e.samples_per_run)
    reds.save(out_dir / DATA_FILES["reach_eta"])
    manifest["files"]["reach_eta"] = {"file": DATA_FILES["reach_eta"], **reds.meta}

    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _tcfg(section) -> TrainConfig:
    return TrainConfig(section.learning_rate, section.epochs, section.batch_size, section.seed,
                       optimizer=section.optimizer)


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing {what}: {path}")
    return path


def cmd_train(cfg: RunConfig, data_dir: Path, model_dir: Path, which: Sequence[str] | None = None) -> dict:
    data_dir, model_dir = Path(data_dir), Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    which = list(which or MODEL_FILES)
    arm = cfg.arm.build()
    metrics: dict = {}
    for key in which:
        src = _need(data_dir / DATA_FILES[key], f"{key} dataset")
        if key in ("forecast", "reach_forecast"):
            ds = fc.ForecastDataset.load(src)
            fcfg = cfg.forecast_config() if key == "forecast" else cfg.reach_forecast_config()
            model, rep = fc.train_forecaster(ds, fcfg, _tcfg(cfg.forecaster.train), init_seed=cfg.seed)
            model.save(model_dir / MODEL_FILES[key])
            metrics[key] = {"losses": rep.losses, "initial_loss": rep.initial_loss,
                            "final_loss": rep.final_loss, "bucket": rep.bucket,
                            "holdout_bucket_error_m": rep.bucket_errors}
        else:
            ds = eta_mod.EtaDataset.load(src)
            model, rep = eta_mod.train_eta(ds, arm, _tcfg(cfg.eta.train), cfg.eta_config(),
                                           init_seed=cfg.seed)
            model.save(model_dir / MODEL_FILES[key])
            metrics[key] = {"losses": rep.losses, "initial_loss": rep.initial_loss,
                            "final_loss": rep.final_loss, "holdout_within_one_bin": rep.within_one,
                            "holdout_exact_bin": rep.exact, "holdout_mean_abs_bins": rep.mean_abs_bins}
        log.info("trained %s", key)
    (model_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    return metrics


@dataclass
class ModelBundle:
    """Trained networks; plain arrays, safe to ship to worker processes."""
    forecast: fc.ForecastModel | None = None
    eta: eta_mod.EtaModel | None = None

    def providers(self) -> Models:
        return Models(fc.LearnedForecaster(self.forecast) if self.forecast else None,
                      eta_mod.LearnedEta(self.eta) if self.eta else None)


def load_models(model_dir: Path | None, modes: Iterable[PlannerMode], reach: bool = False) -> ModelBundle:
    """Load what the requested modes need; missing files are a configuration error."""
    modes = list(modes)
    need_eta = any(m is not PlannerMode.TARGET_PURSUIT for m in modes)
    need_fc = PlannerMode.DYNAMIC in modes
    if not (need_eta or need_fc):
        return ModelBundle()
    if model_dir is None:
        raise ConfigError("dynamic planner modes need trained models (run `train` first)")
    model_dir = Path(model_dir)
    fkey, ekey = ("reach_forecast", "reach_eta") if reach else ("forecast", "eta")
    bundle = ModelBundle()
    if need_fc:
        bundle.forecast = fc.ForecastModel.load(_need(model_dir / MODEL_FILES[fkey], "forecaster model"))
    if need_eta:
        bundle.eta = eta_mod.EtaModel.load(_need(model_dir / MODEL_FILES[ekey], "ETA model"))
    return bundle


# ---------------------------------------------------------------- sweeps

@dataclass
class EpisodeRow:
    mode: str
    param: str
    value: float
    repeat: int
    index: int
    seed: int
    outcome: str
    solvable: bool
    steps: int
    replans: int
    mean_replan_ms: float
    max_forecast_passes: int
    max_eta_passes: int


def _episode_row(res: EpisodeResult, param, value, repeat, index) -> EpisodeRow:
    lat = res.replan_latencies
    return EpisodeRow(res.mode.value, param, float(value), repeat, index, res.seed, res.outcome.value,
                      bool(res.solvable), res.steps_elapsed, res.replan_count,
                      1e3 * float(np.mean(lat)) if lat else float("nan"),
                      max((r.forecast_passes for r in res.replans), default=0),
                      max((r.eta_passes for r in res.replans), default=0))


def run_cell(cfg: RunConfig, param: str, value: float, repeat: int, modes: Sequence[PlannerMode],
             bundle: ModelBundle, n_episodes: int | None = None) -> list[EpisodeRow]:
    """All episodes of one (param, value, repeat) cell for every mode.

    The solvability label depends only on the episode seed, so it is computed
    once and handed to the remaining modes.
    """
    if n_episodes is None:
        n_episodes = cfg.reach.episodes_per_point if param == REACH_PARAM else cfg.sweep.episodes_per_point
    n = n_episodes
    base = cfg.sweep.base_seed
    rows = []
    if param == REACH_PARAM:
        setup = cfg.reach_setup()
        speed = value * cfg.planner.velocity_scale
        for i in range(n):
            seed = derive_seed(base, param, value, repeat, i)
            for m in modes:
                res = run_reach_episode(m, seed, speed, setup, bundle.providers())
                rows.append(_episode_row(res, param, value, repeat, i))
        return rows
    if param == "InitialVelocity":
        setup = cfg.episode_setup(velocity=value)
    elif param == "FrictionLoss":
        setup = cfg.episode_setup(friction=value)
    else:
        raise ConfigError(f"unknown sweep parameter {param!r}")
    # modes that replay the oracle path compute the label for free
    order = sorted(modes, key=lambda m: m is not PlannerMode.DYNAMIC_ORACLE_TRAJ)
    for i in range(n):
        seed = derive_seed(base, param, value, repeat, i)
        solvable = None
        out = {}
        for m in order:
            res = run_episode(m, seed, setup, bundle.providers(), solvable=solvable)
            solvable = res.solvable
            out[m] = res
        rows.extend(_episode_row(out[m], param, value, repeat, i) for m in modes)
    return rows


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def aggregate(episodes: Sequence[EpisodeRow], base_seed: int) -> list[dict]:
    """One row per (mode, param, value, repeat), in canonical sorted order."""
    cells: dict[tuple, list[EpisodeRow]] = {}
    for e in episodes:
        cells.setdefault((e.mode, e.param, e.value, e.repeat), []).append(e)
    rows = []
    for key in sorted(cells):
        eps = cells[key]
        succ = np.array([e.outcome == "Success" for e in eps])
        sol = np.array([e.solvable for e in eps])
        lat = [e.mean_replan_ms for e in eps if not math.isnan(e.mean_replan_ms)]
        rows.append({
            "mode": key[0], "param": key[1], "value": key[2], "repeat": key[3],
            "success_all": float(succ.mean()),
            "success_solvable": float(succ[sol].mean()) if sol.any() else None,
            "n_solvable": int(sol.sum()),
            "mean_replans": float(np.mean([e.replans for e in eps])),
            "mean_replan_ms": float(np.mean(lat)) if lat else None,
            "base_seed": base_seed,
        })
    return rows


def bootstrap_ci(values: Sequence[float], seed: int = 0, n_boot: int = 2000,
                 alpha: float = 0.05) -> tuple[float, float]:
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if len(v) == 0:
        return (float("nan"), float("nan"))
    rng = np.random.default_rng(seed)
    means = v[rng.integers(0, len(v), size=(n_boot, len(v)))].mean(axis=1)
    return float(np.quantile(means, alpha / 2)), float(np.quantile(means, 1 - alpha / 2))


def summarise(rows: Sequence[dict]) -> list[dict]:
    """Mean and standard deviation across repeats per (mode, param, value)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["mode"], r["param"], r["value"]), []).append(r)
    out = []
    for key in sorted(groups):
        g = groups[key]
        sa = [r["success_all"] for r in g]
        ss = [r["success_solvable"] for r in g if r["success_solvable"] is not None]
        lat = [r["mean_replan_ms"] for r in g if r["mean_replan_ms"] is not None]
        lo, hi = bootstrap_ci(ss)
        out.append({
            "mode": key[0], "param": key[1], "value": key[2], "repeats": len(g),
            "success_all_mean": float(np.mean(sa)), "success_all_std": float(np.std(sa)),
            "success_solvable_mean": float(np.mean(ss)) if ss else None,
            "success_solvable_std": float(np.std(ss)) if ss else None,
            "success_solvable_ci95": [lo, hi] if ss else None,
            "mean_replans": float(np.mean([r["mean_replans"] for r in g])),
            "mean_replan_ms": float(np.mean(lat)) if lat else None,
        })
    return out


def audit(rows: Sequence[dict], episodes: Sequence[EpisodeRow]) -> list[str]:
    """Recompute every aggregate from the per-episode rows; return the problems found."""
    problems = []
    again = aggregate(episodes, rows[0]["base_seed"] if rows else 0)
    if len(again) != len(rows):
        problems.append(f"row count {len(rows)} != recomputed {len(again)}")
    for a, b in zip(rows, again):
        for k in ("success_all", "success_solvable", "n_solvable", "mean_replans"):
            if a[k] != b[k]:
                problems.append(f"{a['mode']} {a['value']} r{a['repeat']}: {k} {a[k]} != {b[k]}")
        if a["success_solvable"] is not None and a["success_solvable"] < a["success_all"]:
            problems.append(f"{a['mode']} {a['value']} r{a['repeat']}: solvable rate below overall rate")
    for e in episodes:
        if not e.solvable and e.outcome == "Success":
            problems.append(f"{e.mode} seed {e.seed}: success on an unsolvable episode")
    return problems


def _run_task(args):
    cfg, param, value, repeat, modes, bundle = args
    return run_cell(cfg, param, value, repeat, modes, bundle)


def run_sweep(cfg: RunConfig, param: str, modes: Sequence[PlannerMode], bundle: ModelBundle,
              values: Sequence[float] | None = None, repeats: int | None = None,
              parallelism: int = 1) -> tuple[list[dict], list[EpisodeRow]]:
    if values is None:
        values = {"InitialVelocity": cfg.sweep.velocity_values,
                  "FrictionLoss": cfg.sweep.friction_values,
                  REACH_PARAM: cfg.reach.speeds}[param]
    if repeats is None:
        repeats = cfg.reach.repeats_per_point if param == REACH_PARAM else cfg.sweep.repeats_per_point
    tasks = [(cfg, param, float(v), r, tuple(modes), bundle) for v in values for r in range(repeats)]
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            chunks = list(pool.map(_run_task, tasks))
    else:
        chunks = [_run_task(t) for t in tasks]
    episodes = [e for c in chunks for e in c]
    episodes.sort(key=lambda e: (e.mode, e.param, e.value, e.repeat, e.index))
    return aggregate(episodes, cfg.sweep.base_seed), episodes


def write_sweep(out_dir: Path, name: str, rows: Sequence[dict], episodes: Sequence[EpisodeRow],
                extra: dict | None = None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / f"{name}.csv", "episodes": out_dir / f"{name}_episodes.csv",
             "json": out_dir / f"{name}.json"}
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) if isinstance(r[c], float) or r[c] is None else r[c]
                        for c in SWEEP_COLUMNS])
    with open(paths["episodes"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPISODE_COLUMNS)
        for e in episodes:
            d = asdict(e)
            w.writerow([_fmt(d[c]) if isinstance(d[c], float) else d[c] for c in EPISODE_COLUMNS])
    problems = audit(rows, episodes)
    report = {"summary": summarise(rows), "audit": {"ok": not problems, "problems": problems[:50]},
              **(extra or {})}
    paths["json"].write_text(json.dumps(report, indent=2, sort_keys=True))
    return {"paths": {k: str(v) for k, v in paths.items()}, "audit_ok": not problems, "report": report}


def read_sweep_csv(path: Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({
                "mode": r["mode"], "param": r["param"], "value": float(r["value"]),
                "repeat": int(r["repeat"]), "success_all": float(r["success_all"]),
                "success_solvable": float(r["success_solvable"]) if r["success_solvable"] else None,
                "n_solvable": int(r["n_solvable"]), "mean_replans": float(r["mean_replans"]),
                "mean_replan_ms": float(r["mean_replan_ms"]) if r["mean_replan_ms"] else None,
                "base_seed": int(r["base_seed"]),
            })
    return rows


# ---------------------------------------------------------------- traces

TRACE_COLUMNS = ["step", "ball_x", "ball_y", "ee_x", "ee_y", "gtilde_x", "gtilde_y", "t_ttr",
                 "replanned_flag", "d", "e_t", "corner_etas", "e_star", "outcome"]


def write_trace(path: Path, trace: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def replay_trace(path: Path) -> list[str]:
    """Narrate a trace: one line per re-plan, then the outcome line."""
    lines = []
    outcome = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceParseError(1, "empty trace file") from None
        missing = [c for c in TRACE_COLUMNS if c not in header]
        if missing:
            raise TraceParseError(1, f"missing column(s): {', '.join(missing)}")
        col = {c: header.index(c) for c in TRACE_COLUMNS}
        for line_no, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise TraceParseError(line_no, f"expected {len(header)} fields, got {len(rec)}")
            try:
                step = int(rec[col["step"]])
                flag = int(rec[col["replanned_flag"]])
                gx, gy = float(rec[col["gtilde_x"]]), float(rec[col["gtilde_y"]])
                if flag:
                    d = float(rec[col["d"]])
                    etas = [int(v) for v in rec[col["corner_etas"]].split(";")]
                    e_star = int(rec[col["e_star"]])
            except ValueError as exc:
                raise TraceParseError(line_no, str(exc)) from None
            if flag:
                lines.append(f"step {step}: d={d:.4f} corner ETAs={etas} e*={e_star} "
                             f"goal=({gx:.4f}, {gy:.4f})")
            if rec[col["outcome"]]:
                outcome = rec[col["outcome"]]
    if outcome is None:
        raise TraceParseError(line_no if lines else 1, "trace has no outcome row")
    lines.append(outcome)
    return lines
