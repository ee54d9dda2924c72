"""Command line entry point: ``trapper <subcommand> [options]``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import bench
from .config import load_config
from .dynaplan import PlannerMode, run_episode
from .errors import ConfigError

log = logging.getLogger("trapper")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the config's global seed")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("--modes", help="comma-separated planner modes "
                        "(Dynamic, DynamicOracleTraj, TargetPursuit)")
    common.add_argument("--parallelism", type=int, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="trapper", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate forecaster and ETA datasets")
    t = sub.add_parser("train", parents=[common], help="train forecaster and ETA models")
    t.add_argument("--data", type=Path, help="dataset directory (default: OUT/data)")
    s = sub.add_parser("sweep", parents=[common], help="velocity or friction sweep")
    s.add_argument("--param", choices=bench.PARAMS, default="InitialVelocity")
    s.add_argument("--values", help="comma-separated values overriding the config")
    s.add_argument("--repeats", type=int)
    s.add_argument("--models", type=Path, help="model directory (default: OUT/models)")
    s.add_argument("--no-plot", action="store_true")
    r = sub.add_parser("reach-bench", parents=[common], help="moving-target reach benchmark")
    r.add_argument("--values", help="comma-separated target speeds overriding the config")
    r.add_argument("--repeats", type=int)
    r.add_argument("--models", type=Path)
    r.add_argument("--no-plot", action="store_true")
    rp = sub.add_parser("replay", parents=[common], help="narrate an episode trace")
    rp.add_argument("trace", type=Path)
    e = sub.add_parser("run-episode", parents=[common], help="one seeded episode with a trace dump")
    e.add_argument("--mode", default="Dynamic")
    e.add_argument("--velocity", type=float)
    e.add_argument("--friction", type=float)
    e.add_argument("--models", type=Path)
    e.add_argument("--no-plot", action="store_true")
    return p


def _modes(arg: str | None, default) -> list[PlannerMode]:
    names = default if arg is None else [m.strip() for m in arg.split(",") if m.strip()]
    if not names:
        raise ConfigError("--modes is empty")
    return [PlannerMode.parse(n) for n in names]


def _values(arg: str | None):
    if arg is None:
        return None
    try:
        vals = [float(v) for v in arg.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values: {exc}") from exc
    if not vals:
        raise ConfigError("--values is empty")
    return vals


def _sweep(cfg, args, param, name) -> dict:
    modes = _modes(args.modes, cfg.sweep.modes)
    reach = param == bench.REACH_PARAM
    bundle = bench.load_models(args.models or args.out / "models", modes, reach=reach)
    rows, episodes = bench.run_sweep(cfg, param, modes, bundle, _values(args.values), args.repeats,
                                     max(1, args.parallelism))
    res = bench.write_sweep(args.out, name, rows, episodes, {"config": cfg.to_dict()})
    if not args.no_plot:
        from .plotting import plot_sweep
        png = plot_sweep(res["report"]["summary"], args.out / f"{name}.png", name)
        res["paths"]["png"] = str(png)
    for k, v in res["paths"].items():
        print(f"{k}: {v}")
    if not res["audit_ok"]:
        log.error("self-audit failed: %s", res["report"]["audit"]["problems"][:5])
        raise RuntimeError("sweep self-audit failed")
    return res


def _run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out: Path = args.out
    if args.command == "gen-data":
        manifest = bench.cmd_gen_data(cfg, out / "data")
        for k, v in manifest["files"].items():
            print(f"{k}: {v['count']} samples -> {out / 'data' / v['file']}")
    elif args.command == "train":
        metrics = bench.cmd_train(cfg, args.data or out / "data", out / "models")
        from .plotting import plot_losses
        plot_losses(metrics, out / "models" / "losses.png")
        print(json.dumps({k: {m: v for m, v in d.items() if m != "losses"} for k, d in metrics.items()},
                         indent=2))
    elif args.command == "sweep":
        name = "sweep_velocity" if args.param == "InitialVelocity" else "sweep_friction"
        _sweep(cfg, args, args.param, name)
    elif args.command == "reach-bench":
        _sweep(cfg, args, bench.REACH_PARAM, "reach_bench")
    elif args.command == "replay":
        for line in bench.replay_trace(args.trace):
            print(line)
    elif args.command == "run-episode":
        mode = PlannerMode.parse(args.mode)
        bundle = bench.load_models(args.models or out / "models", [mode])
        setup = cfg.episode_setup(args.velocity, args.friction)
        seed = cfg.seed if args.seed is None else args.seed
        res = run_episode(mode, seed, setup, bundle.providers(), trace=True)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"trace_{mode.value}_{seed}.csv"
        bench.write_trace(path, res.trace)
        if not args.no_plot:
            from .plotting import plot_trace
            plot_trace(res.trace, path.with_suffix(".png"), setup.table)
        print(f"{res.outcome.value} at step {res.steps_elapsed}; solvable={res.solvable}; "
              f"re-plans={res.replan_count}; trace -> {path}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surface anything else as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
