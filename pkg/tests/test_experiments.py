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
"""Test the replication protocol behind the command line."""

import logging

import numpy as np
import pytest

from stateful_ope.env import (
    BehaviorPolicy,
    PricingConfig,
    evaluation_policy,
    simulate,
    steep_config,
)
from stateful_ope.experiments import (
    LEARN_COLUMNS,
    OPE_COLUMNS,
    ExperimentConfig,
    ReplicationJob,
    env_from_dict,
    manifest,
    replication_seed,
    run_learn,
    run_ope,
    run_ope_replication,
)
from stateful_ope.learn import learn, regret_slope
from stateful_ope.marginal import oracle_optimal, oracle_value
from stateful_ope.nuisance import (
    LogisticOutcome,
    assign_folds,
    fit_logistic,
    fit_nuisances,
    outcome_features,
)

log = logging.getLogger(__name__)

TINY = {
    "env": {"horizon_T": 4, "initial_capacity_s0": 2},
    "sample_sizes": [60],
    "replications": 2,
    "truth_rollouts": 200,
    "oos_rollouts": 200,
    "oracle_draws": 2000,
    "grid_size": 11,
    "workers": 1,
}


def test_replication_seed():
    """Seeds depend on every coordinate and nothing else."""
    assert replication_seed(0, 1, 2) == replication_seed(0, 1, 2)
    assert replication_seed(0, 1, 2) != replication_seed(0, 2, 1)
    assert replication_seed(0, 1, 2) != replication_seed(1, 1, 2)


def test_env_from_dict():
    """Presets are updated with the given keys."""
    env = env_from_dict({"horizon_T": 3}, "favorable")
    assert env.horizon_T == 3
    assert env.dim == 5
    # A new coefficient vector brings a matching context distribution
    env = env_from_dict({"beta": [0.1, 0.2, 0.3]})
    assert env.context_spec.dim == 3
    with pytest.raises(ValueError):
        env_from_dict({}, "unknown")


def test_experiment_config_validation():
    """Bad replication settings are rejected."""
    with pytest.raises(ValueError):
        ExperimentConfig(replications=0)
    with pytest.raises(ValueError):
        ExperimentConfig(sample_sizes=())
    with pytest.raises(ValueError):
        ExperimentConfig(modes=("dm", "fqe"))
    with pytest.raises(ValueError):
        ExperimentConfig(workers=0)
    with pytest.raises(ValueError):
        ExperimentConfig(outcome_shift=(0.1,))


def test_experiment_config_overrides():
    """Overrides that are None leave the document's values in place."""
    exp = ExperimentConfig.from_dict(TINY, replications=None, master_seed=9)
    assert exp.replications == 2
    assert exp.master_seed == 9
    assert exp.env == PricingConfig(horizon_T=4, initial_capacity_s0=2)
    assert exp.delta_values() == (0.0,)
    assert exp.delta_values(default=0.2) == (0.2,)
    again = ExperimentConfig.from_dict(exp.to_dict(), workers=1)
    assert again.to_dict() == exp.to_dict()


def test_manifest_hash():
    """The manifest hash follows the config but not the worker count."""
    one = manifest("ope", ExperimentConfig.from_dict(TINY))
    two = manifest("ope", ExperimentConfig.from_dict(TINY, workers=2))
    other = manifest("ope", ExperimentConfig.from_dict(TINY, master_seed=1))
    assert one == two
    assert one["config_hash"] != other["config_hash"]
    assert len(one["config_hash"]) == 64


def test_failed_mode_is_recorded():
    """A replication too small to fit nuisances records the error per mode."""
    exp = ExperimentConfig.from_dict(TINY, modes=("dm", "dr"))
    job = ReplicationJob(exp, 0, 4, 0, reference=1.0)
    rows = run_ope_replication(job)
    assert [row["mode"] for row in rows] == ["dm", "dr"]
    for row in rows:
        assert np.isnan(row["estimate"])
        assert row["error"].startswith("ValueError")


def test_run_ope():
    """Every mode reports an estimate and its relative error per replication."""
    exp = ExperimentConfig.from_dict(TINY)
    frame = run_ope(exp)
    assert list(frame.columns) == OPE_COLUMNS
    assert len(frame) == 4 * 2
    assert frame["mode"].tolist() == [
        "dm", "dm", "ipw", "ipw", "dr", "dr", "drnp", "drnp"
    ]
    ok = frame[frame["error"] == ""]
    assert np.allclose(
        ok["rel_abs_error"],
        (ok["estimate"] - ok["oracle_value"]).abs() / ok["oracle_value"].abs(),
    )
    # Modes of one replication share the dataset
    assert frame.groupby("replication")["seed"].nunique().eq(1).all()


def test_run_ope_independent_of_workers():
    """Results do not depend on the number of worker processes."""
    serial = run_ope(ExperimentConfig.from_dict(TINY, modes=("dm", "dr")))
    parallel = run_ope(ExperimentConfig.from_dict(TINY, modes=("dm", "dr"), workers=2))
    assert serial.equals(parallel)


def test_run_learn():
    """Learned policies never beat the optimum by more than rollout noise."""
    exp = ExperimentConfig.from_dict(TINY, modes=("dm", "dr"), oos_rollouts=2000)
    frame = run_learn(exp)
    assert list(frame.columns) == LEARN_COLUMNS
    assert len(frame) == 2 * 2
    assert (frame["error"] == "").all()
    optimum = frame["oracle_gap"] + frame["oos_value"]
    assert np.allclose(optimum, optimum.iloc[0])
    assert (frame["oracle_gap"] > -0.1).all()


@pytest.mark.slow
def test_dr_error_shrinks_with_data():
    """Under a well-specified model the DR error is small and falls with n."""
    exp = ExperimentConfig(
        sample_sizes=(50, 5000),
        replications=20,
        modes=("dr",),
        deltas=(0.0,),
        truth_rollouts=50_000,
        workers=1,
    )
    frame = run_ope(exp).dropna(subset=["rel_abs_error"])
    median = frame.groupby("n")["rel_abs_error"].median()
    log.info(median.to_dict())
    assert median[5000] < 0.05
    assert median[5000] < median[50]


@pytest.mark.slow
def test_misspecified_dm_error_is_its_population_bias(canonical):
    """At delta=0.2 the DM error settles at the bias of the logistic projection."""
    cfg = canonical.with_delta(0.2)
    target = evaluation_policy(cfg)
    truth = oracle_value(target, cfg, n_draws=1_000_000).values[0, -1]

    large = simulate(cfg, BehaviorPolicy(cfg), 100_000, seed=31)
    projection = LogisticOutcome(
        fit_logistic(
            outcome_features(
                large.x.reshape(-1, cfg.dim), large.a.ravel(), cfg.price_array
            ),
            large.y.ravel(),
        ),
        cfg.price_array,
    )
    projected = oracle_value(target, cfg, projection.prob_one, n_draws=1_000_000)
    population_error = abs(projected.values[0, -1] - truth) / truth

    exp = ExperimentConfig(
        env=canonical,
        sample_sizes=(5000,),
        replications=20,
        modes=("dm", "dr"),
        deltas=(0.2,),
        truth_rollouts=1000,
        workers=1,
    )
    frame = run_ope(exp).dropna(subset=["estimate"]).copy()
    frame["true_error"] = (frame["estimate"] - truth).abs() / truth
    median = frame.groupby("mode")["true_error"].median()
    log.info(f"Median errors {median.to_dict()}, DM bias {population_error:.5f}")
    assert median["dm"] > median["dr"]
    assert abs(median["dm"] - population_error) < 0.3 * population_error


@pytest.mark.slow
def test_learned_policy_ranking():
    """DR learns no worse than DM when misspecified, DM beats IPW at n=100."""
    exp = ExperimentConfig(
        env=steep_config(),
        sample_sizes=(5000,),
        replications=20,
        modes=("dm", "dr"),
        deltas=(0.2,),
        oos_rollouts=20_000,
        oracle_draws=200_000,
        workers=1,
    )
    frame = run_learn(exp)
    assert (frame["error"] == "").all()
    value = frame.groupby("mode")["oos_value"].median()
    optimum = float((frame["oos_value"] + frame["oracle_gap"]).iloc[0])
    log.info(f"Median values {value.to_dict()}, optimum {optimum:.5f}")
    assert value["dr"] >= value["dm"] - 0.005 * optimum
    assert value["dr"] >= 0.95 * optimum

    small = ExperimentConfig(
        env=steep_config(),
        sample_sizes=(100,),
        replications=20,
        modes=("dm", "ipw"),
        deltas=(0.0,),
        oos_rollouts=20_000,
        oracle_draws=200_000,
        workers=1,
    )
    frame = run_learn(small)
    value = frame.dropna(subset=["oos_value"]).groupby("mode")["oos_value"].median()
    log.info(f"Median values at n=100 {value.to_dict()}")
    assert value["dm"] >= value["ipw"] - 0.005 * optimum


@pytest.mark.slow
def test_dr_regret_rate():
    """Median DR regret falls with n at a rate between n^-0.7 and n^-0.3."""
    cfg = steep_config()
    optimum = oracle_optimal(cfg, n_draws=200_000, seed=5).values.values[0, -1]
    sizes = (100, 300, 1000, 5000)
    medians = []
    for n in sizes:
        regrets = []
        for rep in range(20):
            seed = replication_seed(0, n, rep)
            data = simulate(cfg, BehaviorPolicy(cfg), n, seed)
            folds = assign_folds(data.n, data.horizon, seed=seed)
            learned = learn(data, fit_nuisances(data, folds, cfg), "dr", None, cfg)
            value = oracle_value(learned.policy, cfg, n_draws=200_000, seed=5)
            regrets.append(optimum - value.values[0, -1])
        medians.append(float(np.median(regrets)))
    log.info(f"Median regrets {dict(zip(sizes, medians))}")
    slope = regret_slope(sizes, medians)
    assert -0.7 <= slope <= -0.3
