# Copyright (c) 2024 stateful-ope contributors
# This file is part of stateful-ope.
#
#     stateful-ope is free software: you can redistribute it and/or modify
#     it under the terms of the GNU General Public License as published by
#     the Free Software Foundation, either version 3 of the License, or
#     (at your option) any later version.
#
#     stateful-ope is distributed in the hope that it will be useful,
#     but WITHOUT ANY WARRANTY; without even the implied warranty of
#     MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
#     GNU General Public License for more details.
#
#     You should have received a copy of the GNU General Public License
#     along with stateful-ope.  If not, see <https:#www.gnu.org/licenses/>.
#
"""Test the command line and the file formats it writes."""

import json
import logging

import numpy as np
import pandas as pd
import pytest

from stateful_ope.cli import main
from stateful_ope.env import BehaviorPolicy, canonical_config, simulate
from stateful_ope.io import (
    config_hash,
    load_json,
    read_trajectories,
    trajectories_to_frame,
    write_trajectories,
)
from stateful_ope.settings import Settings

log = logging.getLogger(__name__)

TINY = {
    "env": {"horizon_T": 4, "initial_capacity_s0": 2},
    "sample_sizes": [60],
    "replications": 2,
    "truth_rollouts": 200,
    "oos_rollouts": 200,
    "oracle_draws": 2000,
    "grid_size": 11,
    "n_trajectories": 200,
}


@pytest.fixture
def tiny_config(tmp_path):
    """Small experiment config written to disk."""
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_cli_help(capsys):
    """Check help text displays on CLI."""
    try:
        main(["--help"])
    except SystemExit:
        pass
    captured = capsys.readouterr().out
    assert "Off-policy evaluation and learning for capacitated pricing" in captured


def test_cli_requires_command():
    """A subcommand is mandatory."""
    with pytest.raises(SystemExit):
        main([])


def test_simulate_cli(tmp_path):
    """Simulated trajectories match the library call with the same seed."""
    assert main(["simulate", "-n", "50", "--seed", "3", "-o", str(tmp_path)]) == 0

    data = read_trajectories(tmp_path / "trajectories.csv")
    cfg = canonical_config()
    assert data.equals(simulate(cfg, BehaviorPolicy(cfg), 50, seed=3))
    frame = pd.read_csv(tmp_path / "trajectories.csv")
    assert len(frame) == 50 * 10
    assert list(frame.columns) == ["traj_id", "t", "s", "x_0", "x_1", "a", "y", "r"]

    document = load_json(tmp_path / "manifest.json")
    assert document["command"] == "simulate"
    assert document["config_hash"] == config_hash(document["config"])


def test_ope_cli_reproducible(tmp_path, tiny_config):
    """Reruns with the same seed write identical files whatever the workers."""
    first, second = tmp_path / "first", tmp_path / "second"
    base = ["ope", "-c", str(tiny_config), "--modes", "dm,dr", "--seed", "4"]
    assert main([*base, "-o", str(first), "--workers", "1"]) == 0
    assert main([*base, "-o", str(second), "--workers", "2"]) == 0

    assert (first / "ope.csv").read_bytes() == (second / "ope.csv").read_bytes()
    assert (first / "manifest.json").read_bytes() == (
        second / "manifest.json"
    ).read_bytes()
    frame = pd.read_csv(first / "ope.csv")
    assert len(frame) == 2 * 2
    assert set(frame["mode"]) == {"dm", "dr"}


def test_learn_cli(tmp_path, tiny_config):
    """Learning writes one row per mode and replication."""
    args = ["learn", "-c", str(tiny_config), "--modes", "dr", "-o", str(tmp_path)]
    assert main([*args, "--replications", "1", "--delta", "0,0.2"]) == 0
    frame = pd.read_csv(tmp_path / "learn.csv")
    assert len(frame) == 2
    assert frame["delta"].tolist() == [0.0, 0.2]
    config = load_json(tmp_path / "manifest.json")["config"]
    assert config["deltas"] == [0.0, 0.2]
    assert config["preset"] == "steep"
    assert config["env"]["beta0"] == -4.0

    canonical = tmp_path / "canonical"
    rerun = [*args, "--replications", "1", "--preset", "canonical"]
    assert main([*rerun, "-o", str(canonical)]) == 0
    rerun_config = load_json(canonical / "manifest.json")["config"]
    assert rerun_config["env"]["beta0"] == -2.0


def test_analyze_cli(tmp_path, tiny_config):
    """The analysis writes the threshold table, histogram and summary."""
    assert main(["analyze", "-c", str(tiny_config), "-o", str(tmp_path)]) == 0
    thresholds = pd.read_csv(tmp_path / "thresholds.csv")
    assert len(thresholds) == 4 * 2
    assert list(thresholds.columns) == [
        "t", "s", "theta_star", "theta_hat", "same_partition", "gap"
    ]
    numeric = thresholds[["theta_star", "theta_hat", "gap"]].to_numpy()
    assert np.isfinite(numeric).all()
    assert len(pd.read_csv(tmp_path / "delta_hist.csv")) == 40

    summary = load_json(tmp_path / "analysis.json")
    assert summary["delta"] == 0.2
    assert len(summary["concave"]) == 5
    assert set(summary) >= {"fraction_below", "persistence_condition", "oracle_value"}


def test_analyze_cli_shifted(tmp_path, tiny_config):
    """A constructed outcome shift shows up as the mean high-price error."""
    args = ["analyze", "-c", str(tiny_config), "-o", str(tmp_path)]
    assert main([*args, "--shift", "0.03,-0.03"]) == 0
    summary = load_json(tmp_path / "analysis.json")
    assert summary["delta1_mean"] == pytest.approx(0.03, abs=1e-3)


def test_cli_errors(tmp_path, capsys):
    """Invalid configs exit with status 1 and a message."""
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert main(["ope", "-c", str(broken), "-o", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err

    assert main(["ope", "--replications", "0", "-o", str(tmp_path)]) == 1
    assert "replication" in capsys.readouterr().err
    assert main(["simulate", "--preset", "nowhere", "-o", str(tmp_path)]) == 1
    assert not (tmp_path / "manifest.json").exists()


def test_read_trajectories_errors(tmp_path, canonical):
    """Missing files and malformed tables are reported."""
    with pytest.raises(IOError):
        read_trajectories(tmp_path / "missing.csv")

    data = simulate(canonical, BehaviorPolicy(canonical), 5, seed=1)
    frame = trajectories_to_frame(data)
    frame.drop(columns="r").to_csv(tmp_path / "columns.csv", index=False)
    with pytest.raises(ValueError):
        read_trajectories(tmp_path / "columns.csv")
    frame.iloc[:-1].to_csv(tmp_path / "ragged.csv", index=False)
    with pytest.raises(ValueError):
        read_trajectories(tmp_path / "ragged.csv")

    path = write_trajectories(data, tmp_path / "nested" / "data.csv")
    assert read_trajectories(path).equals(data)


def test_settings(monkeypatch):
    """Defaults come from environment variables."""
    monkeypatch.setenv("STATEFUL_OPE_WORKERS", "3")
    monkeypatch.setenv("STATEFUL_OPE_OUTPUT_DIR", "elsewhere")
    monkeypatch.setenv("DEBUG", "yes")
    settings = Settings()
    assert settings.WORKERS == 3
    assert settings.OUTPUT_DIR == "elsewhere"
    assert settings.DEBUG

    monkeypatch.setenv("STATEFUL_OPE_WORKERS", "-2")
    assert Settings().WORKERS == 1
    monkeypatch.setenv("STATEFUL_OPE_WORKERS", "many")
    assert Settings().WORKERS == 1
