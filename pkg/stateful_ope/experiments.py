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
"""Seeded replication experiments behind the command line.

Each job covers one (delta, n, replication) triple: a single dataset is
simulated under the logging policy and shared by every estimator mode.
Seeds derive from the master seed and the job coordinates only, so results
do not depend on the number of workers.
"""

import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import pandas as pd

from stateful_ope.__version__ import __version__
from stateful_ope.analysis import (
    ThresholdReport,
    concavity_check,
    delta_histogram,
    heatmap,
    persistence_condition,
    shifted_outcome,
)
from stateful_ope.env import (
    PRESETS,
    BehaviorPolicy,
    PricingConfig,
    evaluation_policy,
    monte_carlo_value,
    simulate,
    true_outcome,
)
from stateful_ope.io import config_hash
from stateful_ope.learn import (
    LearnedPolicy,
    OutcomeRatio,
    grid_from_contexts,
    learn,
    learn_with_provider,
    out_of_sample_value,
)
from stateful_ope.marginal import (
    EstimatedTransitions,
    OptimalSolution,
    OracleTransitions,
    dr_scores,
    evaluate_policy,
    oracle_optimal,
)
from stateful_ope.nuisance import NuisanceSet, assign_folds, fit_nuisances
from stateful_ope.settings import Settings

log = logging.getLogger(__name__)

MODES = ("dm", "ipw", "dr", "drnp")
SAMPLE_SIZES = (50, 108, 232, 500, 1077, 2321, 5000)
ANALYSIS_DELTA = 0.2

# Seed streams
DATA, ROLLOUT, TRUTH, ORACLE, GRID = range(5)

OPE_COLUMNS = [
    "mode",
    "n",
    "seed",
    "estimate",
    "oracle_value",
    "rel_abs_error",
    "delta",
    "replication",
    "error",
]
LEARN_COLUMNS = [
    "mode",
    "n",
    "seed",
    "oos_value",
    "oracle_gap",
    "delta",
    "replication",
    "error",
]


def replication_seed(master_seed: int, *keys: int) -> int:
    """Integer seed derived from the master seed and job coordinates."""
    sequence = np.random.SeedSequence([master_seed, *keys])
    return int(sequence.generate_state(1)[0])


def env_from_dict(data: Optional[dict], preset: str = "canonical") -> PricingConfig:
    """Environment from a preset updated with the keys of ``data``."""
    if preset not in PRESETS:
        msg = f"Unknown preset {preset}, expected one of {sorted(PRESETS)}"
        log.error(msg)
        raise ValueError(msg)
    document = PRESETS[preset]().to_dict()
    data = data or {}
    if "beta" in data and "context_spec" not in data:
        document.pop("context_spec")
    document.update(data)
    return PricingConfig.from_dict(document)


@dataclass(frozen=True)
class ExperimentConfig:
    """Replication protocol of the ``ope``, ``learn`` and ``analyze`` commands.

    Args:
        env (PricingConfig): The environment.
        sample_sizes (tuple): Numbers of logged trajectories N.
        replications (int): Replications per (delta, N).
        modes (tuple): Estimators among ``dm``, ``ipw``, ``dr`` and ``drnp``.
        master_seed (int): Root of every derived seed.
        output_dir (str): Directory receiving results.
        workers (int): Worker processes for replications.
        deltas (tuple): Misspecification weights, the environment's own
            weight when empty.
        truth_rollouts (int): Rollouts of the ground-truth policy value.
        oos_rollouts (int): Rollouts of each learned policy.
        grid_size (int): Quantiles in the threshold grid.
        clip_eps (float): Propensity clipping level.
        drop_stockout (bool): Leave zero-inventory rows out of the estimates.
        oracle_draws (int): Context draws of oracle transitions.
        n_trajectories (int): Logged trajectories for ``simulate`` and
            ``analyze``.
        outcome_shift (tuple): ``(delta1, delta0)`` bias of a constructed
            outcome model for ``analyze``; fitted models are used when empty.
        preset (str): Name of the preset ``env`` started from.
    """

    env: PricingConfig = field(default_factory=PricingConfig)
    sample_sizes: tuple = SAMPLE_SIZES
    replications: int = 48
    modes: tuple = MODES
    master_seed: int = 0
    output_dir: str = field(default_factory=lambda: Settings().OUTPUT_DIR)
    workers: int = field(default_factory=lambda: Settings().WORKERS)
    deltas: tuple = ()
    truth_rollouts: int = 10_000
    oos_rollouts: int = 10_000
    grid_size: int = 101
    clip_eps: float = 0.01
    drop_stockout: bool = False
    oracle_draws: int = 1_000_000
    n_trajectories: int = 5000
    outcome_shift: tuple = ()
    preset: str = "canonical"

    def __post_init__(self):
        """Normalise sequences and validate."""
        for name in ("sample_sizes", "modes", "deltas", "outcome_shift"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        sizes = tuple(int(n) for n in self.sample_sizes)
        object.__setattr__(self, "sample_sizes", sizes)
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))

        if self.replications < 1:
            msg = f"Need at least one replication, got {self.replications}"
            log.error(msg)
            raise ValueError(msg)
        if not self.sample_sizes or min(self.sample_sizes) < 1:
            msg = f"Sample sizes must be positive: {self.sample_sizes}"
            log.error(msg)
            raise ValueError(msg)
        unknown = set(self.modes) - set(MODES)
        if not self.modes or unknown:
            msg = f"Unknown modes {sorted(unknown)}, expected a subset of {MODES}"
            log.error(msg)
            raise ValueError(msg)
        if self.master_seed < 0:
            msg = f"Master seed must be nonnegative, got {self.master_seed}"
            log.error(msg)
            raise ValueError(msg)
        if self.workers < 1:
            msg = f"Need at least one worker, got {self.workers}"
            log.error(msg)
            raise ValueError(msg)
        if self.outcome_shift and len(self.outcome_shift) != 2:
            msg = f"Outcome shift is a (delta1, delta0) pair, got {self.outcome_shift}"
            log.error(msg)
            raise ValueError(msg)

    def delta_values(self, default: Optional[float] = None) -> tuple:
        """Misspecification weights to run."""
        if self.deltas:
            return self.deltas
        return (self.env.mixture_delta if default is None else default,)

    def to_dict(self) -> dict:
        """JSON document."""
        return {
            "env": self.env.to_dict(),
            "sample_sizes": list(self.sample_sizes),
            "replications": self.replications,
            "modes": list(self.modes),
            "master_seed": self.master_seed,
            "deltas": list(self.deltas),
            "truth_rollouts": self.truth_rollouts,
            "oos_rollouts": self.oos_rollouts,
            "grid_size": self.grid_size,
            "clip_eps": self.clip_eps,
            "drop_stockout": self.drop_stockout,
            "oracle_draws": self.oracle_draws,
            "n_trajectories": self.n_trajectories,
            "outcome_shift": list(self.outcome_shift),
            "preset": self.preset,
        }

    @classmethod
    def from_dict(cls, data: dict, **overrides) -> "ExperimentConfig":
        """Parse a JSON document; ``overrides`` that are not None win."""
        params = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        unknown = set(data) - set(params)
        if unknown:
            log.warning(f"Ignoring unknown experiment keys: {sorted(unknown)}")
        params.update({k: v for k, v in overrides.items() if v is not None})
        preset = params.get("preset", "canonical")
        env = params.get("env")
        if not isinstance(env, PricingConfig):
            params["env"] = env_from_dict(env, preset)
        return cls(**params)


def manifest(command: str, exp: ExperimentConfig) -> dict:
    """Reproducibility record written next to every result."""
    document = exp.to_dict()
    return {
        "command": command,
        "version": __version__,
        "config_hash": config_hash(document),
        "config": document,
    }


@dataclass(frozen=True)
class ReplicationJob:
    """One (delta, n, replication) cell of an experiment."""

    exp: ExperimentConfig
    delta_index: int
    n: int
    replication: int
    reference: float

    @property
    def env(self) -> PricingConfig:
        """Environment at this job's misspecification weight."""
        delta = self.exp.delta_values()[self.delta_index]
        return self.exp.env.with_delta(delta)

    @property
    def data_seed(self) -> int:
        """Seed of the logged dataset, shared by every mode."""
        return replication_seed(
            self.exp.master_seed, DATA, self.delta_index, self.n, self.replication
        )


class NuisanceCache:
    """Lazily fitted nuisances of one dataset, per outcome model kind."""

    def __init__(self, job: ReplicationJob, data):
        """Keep the dataset and its folds."""
        self.job = job
        self.data = data
        self.folds = assign_folds(data.n, data.horizon, seed=job.data_seed)
        self._fitted: dict = {}

    def get(self, mode: str) -> NuisanceSet:
        """Logistic nuisances, or flexible ones for ``drnp``."""
        outcome_mode = "flexible" if mode == "drnp" else "logistic"
        if outcome_mode not in self._fitted:
            self._fitted[outcome_mode] = fit_nuisances(
                self.data,
                self.folds,
                self.job.env,
                outcome_mode=outcome_mode,
                clip_eps=self.job.exp.clip_eps,
                drop_stockout=self.job.exp.drop_stockout,
            )
        return self._fitted[outcome_mode]


def score_mode(mode: str) -> str:
    """Score used by an estimator mode; ``drnp`` is doubly robust."""
    return "dr" if mode == "drnp" else mode


def _failure(row: dict, mode: str, job: ReplicationJob, e: Exception) -> dict:
    log.warning(
        f"Replication {job.replication} (n={job.n}, mode={mode}) failed: {e}"
    )
    return {**row, "error": f"{type(e).__name__}: {e}"}


def run_ope_replication(job: ReplicationJob) -> list[dict]:
    """Value estimates of the evaluation policy for every mode of one job."""
    cfg = job.env
    data = simulate(cfg, BehaviorPolicy(cfg), job.n, job.data_seed)
    nuisances = NuisanceCache(job, data)
    target = evaluation_policy(cfg)
    rows = []
    for mode in job.exp.modes:
        row = {
            "mode": mode,
            "n": job.n,
            "seed": job.data_seed,
            "estimate": np.nan,
            "oracle_value": job.reference,
            "rel_abs_error": np.nan,
            "delta": cfg.mixture_delta,
            "replication": job.replication,
            "error": "",
        }
        try:
            scores = dr_scores(data, nuisances.get(mode), job.exp.drop_stockout)
            provider = EstimatedTransitions(scores, score_mode(mode), clip=False)
            estimate = evaluate_policy(provider, target, cfg).values[0, -1]
            row["estimate"] = float(estimate)
            row["rel_abs_error"] = abs(estimate - job.reference) / abs(job.reference)
        except (ValueError, RuntimeError, np.linalg.LinAlgError) as e:
            row = _failure(row, mode, job, e)
        rows.append(row)
    return rows


def run_learn_replication(job: ReplicationJob) -> list[dict]:
    """Out-of-sample value of the policy learned by every mode of one job."""
    cfg = job.env
    data = simulate(cfg, BehaviorPolicy(cfg), job.n, job.data_seed)
    nuisances = NuisanceCache(job, data)
    rollout_seed = replication_seed(
        job.exp.master_seed, ROLLOUT, job.delta_index, job.n, job.replication
    )
    rows = []
    for mode in job.exp.modes:
        row = {
            "mode": mode,
            "n": job.n,
            "seed": job.data_seed,
            "oos_value": np.nan,
            "oracle_gap": np.nan,
            "delta": cfg.mixture_delta,
            "replication": job.replication,
            "error": "",
        }
        try:
            learned = learn(
                data,
                nuisances.get(mode),
                score_mode(mode),
                None,
                cfg,
                clip=True,
                drop_stockout=job.exp.drop_stockout,
                grid_size=job.exp.grid_size,
            )
            value, _ = out_of_sample_value(
                learned, cfg, job.exp.oos_rollouts, rollout_seed
            )
            row["oos_value"] = value
            row["oracle_gap"] = job.reference - value
        except (ValueError, RuntimeError, np.linalg.LinAlgError) as e:
            row = _failure(row, mode, job, e)
        rows.append(row)
    return rows


def run_jobs(
    fn: Callable[[ReplicationJob], list[dict]], jobs: list, workers: int = 1
) -> list[dict]:
    """Run jobs serially or in a process pool; rows come back in job order."""
    if workers <= 1 or len(jobs) <= 1:
        results = [fn(job) for job in jobs]
    else:
        results = [None] * len(jobs)
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = {
                executor.submit(fn, job): index for index, job in enumerate(jobs)
            }
            for future in as_completed(futures):
                results[futures[future]] = future.result()
    return [row for rows in results for row in rows]


def _sorted_frame(rows: list[dict], columns: list, modes: tuple) -> pd.DataFrame:
    order = {mode: i for i, mode in enumerate(modes)}
    rows = sorted(
        rows, key=lambda r: (order[r["mode"]], r["delta"], r["n"], r["replication"])
    )
    return pd.DataFrame(rows, columns=columns)


def _jobs(exp: ExperimentConfig, references: list) -> list:
    return [
        ReplicationJob(exp, d, n, rep, references[d])
        for d in range(len(exp.delta_values()))
        for n in exp.sample_sizes
        for rep in range(exp.replications)
    ]


def run_ope(exp: ExperimentConfig) -> pd.DataFrame:
    """Off-policy evaluation error of every mode across sizes and replications."""
    truths = []
    for d, delta in enumerate(exp.delta_values()):
        cfg = exp.env.with_delta(delta)
        seed = replication_seed(exp.master_seed, TRUTH, d)
        truth, stderr = monte_carlo_value(
            cfg, evaluation_policy(cfg), exp.truth_rollouts, seed
        )
        log.info(f"Ground truth at delta={delta}: {truth:.5f} +/- {stderr:.5f}")
        truths.append(truth)
    jobs = _jobs(exp, truths)
    log.info(f"Running {len(jobs)} OPE jobs on {exp.workers} worker(s)")
    return _sorted_frame(
        run_jobs(run_ope_replication, jobs, exp.workers), OPE_COLUMNS, exp.modes
    )


def run_learn(exp: ExperimentConfig) -> pd.DataFrame:
    """Out-of-sample value of learned policies across sizes and replications."""
    optimal = []
    for d, delta in enumerate(exp.delta_values()):
        cfg = exp.env.with_delta(delta)
        seed = replication_seed(exp.master_seed, ORACLE, d)
        solution = oracle_optimal(cfg, n_draws=exp.oracle_draws, seed=seed)
        value = solution.values.values[0, -1]
        log.info(f"Oracle optimal value at delta={delta}: {value:.5f}")
        optimal.append(float(value))
    jobs = _jobs(exp, optimal)
    log.info(f"Running {len(jobs)} learning jobs on {exp.workers} worker(s)")
    return _sorted_frame(
        run_jobs(run_learn_replication, jobs, exp.workers), LEARN_COLUMNS, exp.modes
    )


@dataclass(frozen=True, eq=False)
class AnalysisResult:
    """Outputs of the threshold analysis."""

    report: ThresholdReport
    oracle: OptimalSolution
    learned: LearnedPolicy
    concave: Optional[np.ndarray]
    delta: float

    def summary(self) -> dict:
        """JSON summary."""
        return {
            **self.report.summary(),
            "delta": self.delta,
            "oracle_value": float(self.oracle.values.values[0, -1]),
            "learned_fitted_value": self.learned.value,
            "concave": None if self.concave is None else self.concave.tolist(),
        }


def run_analysis(exp: ExperimentConfig) -> AnalysisResult:
    """Direct-method thresholds against the optimal ones.

    Thresholds are learned on the true response ratio so both tables share a
    scale; only the transition estimates carry the outcome model's bias.
    """
    delta = exp.delta_values(default=ANALYSIS_DELTA)[0]
    cfg = exp.env.with_delta(delta)
    T, s0 = cfg.horizon_T, cfg.initial_capacity_s0
    if s0 < 1:
        msg = "Threshold analysis needs a positive initial capacity"
        log.error(msg)
        raise ValueError(msg)

    oracle_seed = replication_seed(exp.master_seed, ORACLE, 0)
    oracle = oracle_optimal(cfg, n_draws=exp.oracle_draws, seed=oracle_seed)
    ratio_fn = OutcomeRatio(true_outcome(cfg), name="true")
    grid_rng = np.random.default_rng(replication_seed(exp.master_seed, GRID, 0))
    contexts = cfg.context_spec.sample(grid_rng, 100_000)
    grid = grid_from_contexts(contexts, ratio_fn, exp.grid_size)
    ratios = ratio_fn(contexts)

    if exp.outcome_shift:
        delta1, delta0 = exp.outcome_shift
        mu_hat = shifted_outcome(cfg, delta1, delta0)
        provider = OracleTransitions(cfg, mu_hat, exp.oracle_draws, oracle_seed)
        log.info(
            f"Analysing a shifted outcome model (delta1={delta1}, delta0={delta0})"
        )
    else:
        data_seed = replication_seed(exp.master_seed, DATA, 0, exp.n_trajectories)
        data = simulate(cfg, BehaviorPolicy(cfg), exp.n_trajectories, data_seed)
        folds = assign_folds(data.n, data.horizon, seed=data_seed)
        nuisances = fit_nuisances(
            data, folds, cfg, clip_eps=exp.clip_eps, drop_stockout=exp.drop_stockout
        )
        mu_hat = nuisances.outcome_mean
        provider = EstimatedTransitions(
            dr_scores(data, nuisances, exp.drop_stockout), "dm", clip=True
        )
        log.info(f"Analysing direct-method thresholds from {data.n} trajectories")

    learned = learn_with_provider(provider, ratio_fn, grid, cfg, mode="dm")
    seed = replication_seed(exp.master_seed, ROLLOUT, 0)
    hist = delta_histogram(cfg, mu_hat, seed=seed)
    persistence = persistence_condition(
        cfg, learned.theta[T - 1, s0 - 1], oracle.theta[T - 1, s0 - 1], seed=seed
    )
    report = heatmap(learned, oracle.theta, hist, persistence, ratios)
    concave = concavity_check(oracle.values) if s0 >= 2 else None
    log.info(
        f"{report.fraction_below:.0%} of cells with s > 2 have a lower learned "
        f"threshold; persistence condition {persistence:+.5f}"
    )
    return AnalysisResult(
        report=report, oracle=oracle, learned=learned, concave=concave, delta=delta
    )
