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
"""Test threshold grids and backward-recursive policy learning."""

import json
import logging

import numpy as np
import pytest

from stateful_ope.env import (
    ConstantAction,
    ContextSpec,
    PricingConfig,
    ThresholdOnRatio,
    monte_carlo_value,
    threshold_step,
    true_outcome,
)
from stateful_ope.learn import (
    LearnedPolicy,
    OutcomeRatio,
    ThresholdGrid,
    best_in_class,
    build_grid,
    grid_from_contexts,
    learn,
    learn_with_provider,
    out_of_sample_value,
    ratio,
    regret_slope,
)
from stateful_ope.marginal import (
    EstimatedTransitions,
    MarginalTransition,
    OracleTransitions,
    dr_scores,
    evaluate_policy,
    oracle_optimal,
    oracle_transition,
)
from stateful_ope.nuisance import assign_folds, fit_nuisances

log = logging.getLogger(__name__)


def _fixed_response(high, low):
    def outcome(x, a):
        return np.where(np.asarray(a) == 1, high, low) * np.ones(len(x))

    return outcome


def test_ratio_values():
    """The ratio divides the high-price response by the low-price one."""
    x = np.zeros((1, 2))
    assert ratio(_fixed_response(0.25, 0.5), x)[0] == pytest.approx(0.5)
    assert ratio(_fixed_response(0.4, 0.4), x)[0] == pytest.approx(1.0)


def test_ratio_floor():
    """A vanishing denominator is floored and counted."""
    ratio_fn = OutcomeRatio(_fixed_response(0.25, 0.0))
    assert ratio_fn(np.zeros((1, 2)))[0] == pytest.approx(0.25 / 1e-6)
    assert ratio_fn.floor_events == 1


def test_grid_construction(canonical_data, canonical_nuisances):
    """Quantile grids are sorted, bracketed and cover the observed ratios."""
    ratio_fn = OutcomeRatio(canonical_nuisances.outcome_mean)
    grid = build_grid(canonical_data, ratio_fn, 101)
    values = ratio_fn(canonical_data.x.reshape(-1, 2))
    assert grid.thresholds[0] == -np.inf and grid.thresholds[-1] == np.inf
    assert np.all(np.diff(grid.thresholds) > 0)
    assert grid.thresholds[1] == pytest.approx(values.min())
    assert grid.thresholds[-2] == pytest.approx(values.max())
    assert len(build_grid(canonical_data, ratio_fn, 2)) <= 4
    with pytest.raises(ValueError):
        build_grid(canonical_data, ratio_fn, 1)


def test_grid_constant_ratio():
    """Equal ratios collapse to a single finite threshold."""
    grid = grid_from_contexts(np.zeros((30, 2)), lambda x: np.full(len(x), 0.7), 11)
    assert grid.thresholds.tolist() == [-np.inf, 0.7, np.inf]
    assert 0.7 in grid
    with pytest.raises(ValueError):
        ThresholdGrid(np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        ThresholdGrid(np.array([-np.inf, 1.0, 1.0, np.inf]))


def test_infinite_thresholds_play_low_price(
    canonical, canonical_data, canonical_nuisances
):
    """Thresholds at +inf value the same as always offering the low price."""
    ratio_fn = OutcomeRatio(canonical_nuisances.outcome_mean)
    scores = dr_scores(canonical_data, canonical_nuisances)
    provider = EstimatedTransitions(scores, "dr")
    never = ThresholdOnRatio(ratio_fn, np.full((10, 4), np.inf))
    low = evaluate_policy(provider, ConstantAction(0), canonical)
    assert np.allclose(evaluate_policy(provider, never, canonical).values, low.values)


def test_learned_is_argmax(canonical, canonical_data, canonical_nuisances):
    """Each chosen threshold maximises the fitted Q over the grid."""
    learned = learn(canonical_data, canonical_nuisances, "dr", None, canonical)
    T, s0 = canonical.horizon_T, canonical.initial_capacity_s0
    assert learned.theta.shape == (T, s0)
    for t in range(T):
        for s in range(1, s0 + 1):
            q = learned.q_grid[t, s]
            assert learned.values.values[t, s] == q.max()
            assert learned.theta[t, s - 1] == learned.grid.thresholds[np.argmax(q)]
    # Clipped transitions keep values nondecreasing in inventory
    assert np.all(np.diff(learned.values.values, axis=1) >= -1e-12)
    assert np.all(learned.values.values[:, 0] == 0)


def test_ties_pick_smallest_threshold(canonical):
    """Equal fitted values resolve to the most aggressive threshold."""

    def flat(t, s, rule):
        return MarginalTransition(probs={0: 0.6, 1: 0.4}, revenue=0.3, mode="dm")

    grid = ThresholdGrid.from_values([0.2, 0.5, 0.9])
    learned = learn_with_provider(flat, lambda x: x[:, 0], grid, canonical)
    assert np.all(learned.theta == -np.inf)


def test_grid_refinement_never_hurts(
    canonical, canonical_data, canonical_nuisances
):
    """A superset grid reaches at least the same fitted value."""
    ratio_fn = OutcomeRatio(canonical_nuisances.outcome_mean)
    scores = dr_scores(canonical_data, canonical_nuisances)
    provider = EstimatedTransitions(scores, "dr")
    coarse = build_grid(canonical_data, ratio_fn, 11)
    fine = coarse.union(build_grid(canonical_data, ratio_fn, 51))
    v_coarse = learn_with_provider(provider, ratio_fn, coarse, canonical).value
    v_fine = learn_with_provider(provider, ratio_fn, fine, canonical).value
    assert v_fine >= v_coarse - 1e-12


def test_one_step_matches_exhaustive_search(finite_cfg):
    """With one step left the learner maximises expected revenue."""
    cfg = PricingConfig(
        horizon_T=1, initial_capacity_s0=2, context_spec=finite_cfg.context_spec
    )
    provider = OracleTransitions(cfg)
    ratio_fn = OutcomeRatio(true_outcome(cfg), name="true")
    grid = grid_from_contexts(cfg.context_spec.support_array, ratio_fn, 4)
    learned = learn_with_provider(provider, ratio_fn, grid, cfg, mode="oracle")
    revenues = [
        oracle_transition(threshold_step(ratio_fn, theta), cfg).revenue
        for theta in grid
    ]
    for s in (1, 2):
        assert learned.values.values[0, s] == pytest.approx(max(revenues))


def test_oracle_learning_recovers_threshold(canonical):
    """Thresholds learned with exact transitions sit next to the analytic optimum."""
    learned = best_in_class(canonical, grid_size=101, n_draws=200_000, seed=1)
    values, grid = learned.values.values, learned.grid.thresholds
    p0, p1 = canonical.prices
    for t in range(canonical.horizon_T):
        for s in range(1, canonical.initial_capacity_s0 + 1):
            dv = values[t + 1, s - 1] - values[t + 1, s]
            theta_star = (p0 + dv) / (p1 + dv)
            chosen = int(np.searchsorted(grid, learned.theta[t, s - 1]))
            above = int(np.searchsorted(grid, theta_star))
            assert chosen in (above - 1, above)


def test_never_selling_out_of_sample(canonical):
    """A policy that never offers the high price rolls out like ConstantAction(0)."""
    ratio_fn = OutcomeRatio(true_outcome(canonical), name="true")
    provider = OracleTransitions(canonical, n_draws=10_000)
    never = LearnedPolicy(
        theta=np.full((10, 4), np.inf),
        ratio_fn=ratio_fn,
        values=evaluate_policy(provider, ConstantAction(0), canonical),
        mode="dr",
        grid=ThresholdGrid.from_values([]),
        q_grid=np.zeros((10, 5, 2)),
    )
    mean, _ = out_of_sample_value(never, canonical, 5000, seed=8)
    reference, _ = monte_carlo_value(canonical, ConstantAction(0), 5000, seed=8)
    assert mean == pytest.approx(reference)
    document = json.loads(json.dumps(never.to_dict()))
    assert document["theta"][0][0] == "inf"


def test_learned_below_oracle(canonical, canonical_data, canonical_nuisances):
    """A learned policy cannot beat the optimal policy out of sample."""
    learned = learn(canonical_data, canonical_nuisances, "dr", None, canonical)
    mean, stderr = out_of_sample_value(learned, canonical, 20_000, seed=3)
    optimum = oracle_optimal(canonical, n_draws=200_000, seed=3).values.values[0, -1]
    assert mean <= optimum + 4 * stderr


def test_regret_slope():
    """An exact power law has its exponent as slope."""
    ns = np.array([100, 250, 500, 1000, 2500, 5000])
    assert regret_slope(ns, 3.0 * ns**-0.5) == pytest.approx(-0.5)
    with pytest.raises(ValueError):
        regret_slope([100], [0.1])
    with pytest.raises(ValueError):
        regret_slope([100, 200], [0.1, -0.1])


def test_learn_modes_on_finite_contexts(finite_cfg, finite_data):
    """Every estimator mode yields a complete threshold table."""
    folds = assign_folds(finite_data.n, finite_data.horizon, seed=0)
    nuisances = fit_nuisances(finite_data, folds, finite_cfg)
    for mode in ("dm", "ipw", "dr"):
        learned = learn(finite_data, nuisances, mode, None, finite_cfg, grid_size=21)
        assert learned.theta.shape == (4, 2)
        assert learned.mode == mode
    with pytest.raises(ValueError):
        learn(finite_data, nuisances, "fqe", None, finite_cfg)


def test_grid_from_finite_support():
    """Finite context specs can build grids from their support."""
    spec = ContextSpec.finite([(0.0, 0.0), (1.0, 1.0)], [0.5, 0.5])
    grid = grid_from_contexts(spec.support_array, lambda x: x[:, 0], 3)
    assert grid.thresholds.tolist() == [-np.inf, 0.0, 0.5, 1.0, np.inf]
