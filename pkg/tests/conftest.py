"""Shared fixtures: default config, trained models, the acceptance summary."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import pytest

from trapper import bench
from trapper.config import RunConfig

# criterion number -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@dataclass
class Trained:
    cfg: RunConfig
    data_dir: Path
    model_dir: Path
    metrics: dict
    manifest: dict


@pytest.fixture(scope="session")
def default_cfg() -> RunConfig:
    return RunConfig().validate()


@pytest.fixture(scope="session")
def trained(tmp_path_factory, default_cfg) -> Trained:
    """Datasets and models for the default config, built once per session.

    Set ``TRAPPER_TRAINED_DIR`` to a finished ``gen-data``/``train`` output
    directory to skip the rebuild while iterating.
    """
    reuse = os.environ.get("TRAPPER_TRAINED_DIR")
    if reuse:
        root = Path(reuse)
        return Trained(default_cfg, root / "data", root / "models",
                       json.loads((root / "models" / "metrics.json").read_text()),
                       json.loads((root / "data" / "manifest.json").read_text()))
    root = tmp_path_factory.mktemp("trained")
    manifest = bench.cmd_gen_data(default_cfg, root / "data")
    metrics = bench.cmd_train(default_cfg, root / "data", root / "models")
    assert json.loads((root / "models" / "metrics.json").read_text()).keys() == metrics.keys()
    return Trained(default_cfg, root / "data", root / "models", metrics, manifest)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
