import csv
import math

import numpy as np
import pytest
import yaml

from trapper import bench
from trapper.cli import main
from trapper.config import SCHEMA_VERSION, RunConfig, dump_config, from_dict, load_config
from trapper.dynaplan import PlannerMode
from trapper.errors import ConfigError, TraceParseError
from trapper.fileio import read_container, write_container

TINY = {
    "forecaster": {"n_episodes": 6, "episode_steps": 400, "hidden": 16, "channels": 4,
                   "train": {"epochs": 1}},
    "eta": {"n_goals": 30, "hidden": 16, "train": {"epochs": 1}},
    "reach": {"forecast_episodes": 4, "eta_goals": 20, "speeds": [0.0, 2.0], "episodes_per_point": 3,
              "repeats_per_point": 1},
    "sweep": {"velocity_values": [1.0, 3.0], "friction_values": [0.0, 5.0], "episodes_per_point": 4,
              "repeats_per_point": 2},
}


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg_path = root / "tiny.yaml"
    cfg_path.write_text(yaml.safe_dump(TINY))
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(root / "a")]) == 0
    assert main(["train", "--config", str(cfg_path), "--out", str(root / "a")]) == 0
    return root, cfg_path


def _row(mode="Dynamic", value=1.0, repeat=0, index=0, outcome="Success", solvable=True, replans=3):
    return bench.EpisodeRow(mode, "InitialVelocity", value, repeat, index, 7, outcome, solvable, 100,
                            replans, 10.0, 1, 5)


# ---------------------------------------------------------------- seeds and aggregation

def test_derive_seed_is_stable_and_mode_free():
    a = bench.derive_seed(1, "InitialVelocity", 2.0, 0, 3)
    assert a == bench.derive_seed(1, "InitialVelocity", 2, 0, 3)
    assert a != bench.derive_seed(1, "InitialVelocity", 2.0, 0, 4)
    assert a != bench.derive_seed(2, "InitialVelocity", 2.0, 0, 3)
    assert a != bench.derive_seed(1, "FrictionLoss", 2.0, 0, 3)
    assert 0 <= a < 2**63


def test_aggregate_rates_and_empty_solvable_field(tmp_path):
    eps = [_row(index=0), _row(index=1, outcome="BallLost"), _row(index=2, outcome="Timeout", solvable=False),
           _row(mode="TargetPursuit", index=0, outcome="Timeout", solvable=False)]
    rows = bench.aggregate(eps, 5)
    assert [r["mode"] for r in rows] == ["Dynamic", "TargetPursuit"]
    d, t = rows
    assert d["success_all"] == pytest.approx(1 / 3) and d["success_solvable"] == 0.5 and d["n_solvable"] == 2
    assert t["success_solvable"] is None and t["n_solvable"] == 0
    res = bench.write_sweep(tmp_path, "s", rows, eps)
    with open(res["paths"]["csv"]) as fh:
        recs = list(csv.DictReader(fh))
    assert recs[1]["success_solvable"] == "" and recs[0]["base_seed"] == "5"
    assert bench.read_sweep_csv(res["paths"]["csv"]) == rows
    assert res["audit_ok"]


def test_audit_detects_tampering():
    eps = [_row(index=i, outcome="Success" if i % 2 else "Timeout") for i in range(4)]
    rows = bench.aggregate(eps, 0)
    assert bench.audit(rows, eps) == []
    rows[0]["success_all"] = 0.9
    assert bench.audit(rows, eps)
    bad = eps + [_row(index=9, solvable=False)]
    assert any("unsolvable" in p for p in bench.audit(bench.aggregate(bad, 0), bad))


def test_canonical_order():
    eps = [_row(mode=m, value=v, repeat=r) for m in ("TargetPursuit", "Dynamic")
           for v in (3.0, 1.0) for r in (1, 0)]
    keys = [(r["mode"], r["value"], r["repeat"]) for r in bench.aggregate(eps, 0)]
    assert keys == sorted(keys)


def test_bootstrap_ci():
    lo, hi = bench.bootstrap_ci([0.5] * 10)
    assert lo == hi == 0.5
    lo, hi = bench.bootstrap_ci([0.0, 1.0] * 20)
    assert 0.3 < lo < 0.5 < hi < 0.7
    assert all(math.isnan(x) for x in bench.bootstrap_ci([]))
    s = bench.summarise(bench.aggregate([_row(repeat=r, outcome="Success" if r else "Timeout")
                                         for r in range(6)], 0))
    assert s[0]["repeats"] == 6 and s[0]["success_solvable_mean"] == pytest.approx(5 / 6)


def test_run_cell_counts_and_determinism():
    cfg = RunConfig()
    modes = [PlannerMode.TARGET_PURSUIT]
    a = bench.run_cell(cfg, "InitialVelocity", 2.0, 0, modes, bench.ModelBundle(), n_episodes=5)
    b = bench.run_cell(cfg, "InitialVelocity", 2.0, 0, modes, bench.ModelBundle(), n_episodes=5)
    assert len(a) == 5 and [r.index for r in a] == list(range(5))
    strip = lambda rows: [(r.seed, r.outcome, r.solvable, r.steps, r.replans) for r in rows]
    assert strip(a) == strip(b)
    with pytest.raises(ConfigError):
        bench.run_cell(cfg, "Gravity", 1.0, 0, modes, bench.ModelBundle(), n_episodes=1)


def test_load_models_requirements(tmp_path):
    assert bench.load_models(None, [PlannerMode.TARGET_PURSUIT]).forecast is None
    with pytest.raises(ConfigError):
        bench.load_models(None, [PlannerMode.DYNAMIC])
    with pytest.raises(ConfigError):
        bench.load_models(tmp_path, [PlannerMode.DYNAMIC_ORACLE_TRAJ])


# ---------------------------------------------------------------- config and files

def test_config_round_trip(tmp_path):
    cfg = RunConfig()
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg
    assert load_config(None) == cfg
    assert from_dict({"sweep": {"episodes_per_point": 7}}).sweep.episodes_per_point == 7


@pytest.mark.parametrize("data", [
    {"schema_version": SCHEMA_VERSION + 1},
    {"tabel": {}},
    {"table": {"friction_loss": "lots"}},
    {"sweep": {"episodes_per_point": 0}},
    {"sweep": {"modes": ["Teleport"]}},
    {"planner": {"max_steps": 400}},
    {"table": 3},
    {"forecaster": {"anchor_last": 1}},
    {"planner": {"gamma": True}},
    {"reach": {"stationary_fraction": 1.5}},
    {"reach": {"success_tolerance": 0.0}},
])
def test_config_rejects(data):
    with pytest.raises(ConfigError):
        from_dict(data)


def test_container_round_trip_and_corruption(tmp_path):
    p = tmp_path / "c.bin"
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1, 2], dtype=np.int64),
              "c": np.array([True, False])}
    write_container(p, "test", {"x": 1}, arrays)
    meta, back = read_container(p, "test")
    assert meta == {"x": 1}
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
        assert back[k].dtype == arrays[k].dtype
    raw = p.read_bytes()
    with pytest.raises(ValueError):
        read_container(p, "other")
    p.write_bytes(raw[:-3])
    with pytest.raises(ValueError):
        read_container(p)
    p.write_bytes(raw + b"x")
    with pytest.raises(ValueError):
        read_container(p)
    p.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError):
        read_container(p)


# ---------------------------------------------------------------- CLI

def test_cli_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("table: [unclosed")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
    bad.write_text("nonsense_key: 1\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert main(["gen-data", "--config", str(tmp_path / "absent.yaml"), "--out", str(tmp_path)]) == 1
    bad.write_text("sweep: {episodes_per_point: 0}\n")
    assert main(["sweep", "--config", str(bad), "--out", str(tmp_path)]) == 1
    bad.write_text("forecaster: {n_episodes: 0}\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
    # dynamic modes without models, and an unknown mode name
    assert main(["run-episode", "--out", str(tmp_path / "none")]) == 1
    assert main(["sweep", "--modes", "Teleport", "--out", str(tmp_path)]) == 1
    assert main(["train", "--out", str(tmp_path / "nodata")]) == 1
    assert "config error" in capsys.readouterr().err


def test_cli_replay_parse_error(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("step,ball_x\n1,2\n")
    assert main(["replay", str(p)]) == 2
    with pytest.raises(TraceParseError):
        bench.replay_trace(p)
    rows = ",".join(bench.TRACE_COLUMNS)
    p.write_text(rows + "\n" + ",".join(["x"] * len(bench.TRACE_COLUMNS)) + "\n")
    with pytest.raises(TraceParseError, match="line 2"):
        bench.replay_trace(p)


def test_cli_run_episode_and_replay(tiny, tmp_path, capsys):
    root, cfg_path = tiny
    out = root / "a"
    for mode in ("TargetPursuit", "DynamicOracleTraj", "Dynamic"):
        code = main(["run-episode", "--config", str(cfg_path), "--out", str(out), "--mode", mode,
                     "--seed", "4", "--velocity", "2"])
        assert code == 0
        summary = capsys.readouterr().out
        trace = out / f"trace_{mode}_4.csv"
        assert trace.exists() and trace.with_suffix(".png").exists()
        assert main(["replay", str(trace)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        outcome, step = lines[-1].split(" at step ")
        assert outcome in ("Success", "Miss", "BallLost", "Timeout") and int(step) >= 1
        n_replans = int(summary.split("re-plans=")[1].split(";")[0])
        assert len(lines) - 1 == n_replans
        assert summary.startswith(lines[-1])


def test_cli_sweep_and_reach_bench(tiny, capsys):
    root, cfg_path = tiny
    out = root / "a"
    assert main(["sweep", "--config", str(cfg_path), "--out", str(out)]) == 0
    rows = bench.read_sweep_csv(out / "sweep_velocity.csv")
    assert len(rows) == 3 * 2 * 2
    assert (out / "sweep_velocity.png").exists() and (out / "sweep_velocity_episodes.csv").exists()
    assert main(["sweep", "--config", str(cfg_path), "--out", str(out), "--param", "FrictionLoss",
                 "--modes", "Dynamic", "--parallelism", "2", "--no-plot"]) == 0
    assert len(bench.read_sweep_csv(out / "sweep_friction.csv")) == 2 * 2
    assert main(["reach-bench", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert (out / "reach_bench.png").exists()
    assert len(bench.read_sweep_csv(out / "reach_bench.csv")) == 3 * 2


def test_parallel_sweep_matches_serial(tiny):
    root, cfg_path = tiny
    cfg = load_config(cfg_path)
    modes = [PlannerMode.DYNAMIC, PlannerMode.TARGET_PURSUIT]
    bundle = bench.load_models(root / "a" / "models", modes)
    a, ea = bench.run_sweep(cfg, "InitialVelocity", modes, bundle, [2.0], 2, 1)
    b, eb = bench.run_sweep(cfg, "InitialVelocity", modes, bundle, [2.0], 2, 2)
    key = lambda r: {k: v for k, v in r.items() if k != "mean_replan_ms"}
    assert [key(r) for r in a] == [key(r) for r in b]
    assert [(e.seed, e.outcome, e.steps) for e in ea] == [(e.seed, e.outcome, e.steps) for e in eb]


def test_gen_data_and_train_are_reproducible(tiny):
    root, cfg_path = tiny
    b = root / "b"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(b)]) == 0
    assert main(["train", "--config", str(cfg_path), "--out", str(b)]) == 0
    for sub, names in (("data", bench.DATA_FILES.values()), ("models", bench.MODEL_FILES.values())):
        for name in names:
            assert (root / "a" / sub / name).read_bytes() == (b / sub / name).read_bytes(), name
    c = root / "c"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(c), "--seed", "9"]) == 0
    assert (c / "data" / "eta.bin").read_bytes() != (b / "data" / "eta.bin").read_bytes()
