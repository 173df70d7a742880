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
"""Marginal MDP over inventory: transition estimates and backward recursion.

An action of the marginal MDP is a single-step contextual policy. Its
transition probability P(Y=1 | pi) pools every logged observation, so one
estimate serves all (t, s) pairs the rule is played at.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Protocol

import numpy as np

from stateful_ope.env import (
    PolicySpec,
    PricingConfig,
    StepPolicy,
    TabularPolicy,
    TrajectoryBatch,
    true_outcome,
)
from stateful_ope.nuisance import NuisanceSet

log = logging.getLogger(__name__)

SCORE_MODES = ("dr", "ipw", "dm")
ORACLE_DRAWS = 1_000_000


@dataclass(eq=False)
class DRScoreTable:
    """Per-observation scores, indexed ``[i, t, a, y]``.

    The doubly robust score is ``ipw - correction + direct``; inverse
    propensity weighting keeps only ``ipw`` and the direct method only
    ``direct``.
    """

    ipw: np.ndarray
    correction: np.ndarray
    direct: np.ndarray
    mask: np.ndarray
    x: np.ndarray
    prices: np.ndarray
    clip_rate: float = 0.0

    @property
    def gamma(self) -> np.ndarray:
        """Doubly robust scores Gamma(y | a) for every observation."""
        return self.ipw - self.correction + self.direct

    def scores(self, mode: str = "dr") -> np.ndarray:
        """Scores of the requested estimator."""
        if mode == "dr":
            return self.gamma
        if mode == "ipw":
            return self.ipw
        if mode == "dm":
            return self.direct
        msg = f"Unknown score mode {mode}, expected one of {SCORE_MODES}"
        log.error(msg)
        raise ValueError(msg)

    @cached_property
    def observed_x(self) -> np.ndarray:
        """Contexts of the observations entering the pooled estimate."""
        return self.x[self.mask]

    @cached_property
    def observed_traj(self) -> np.ndarray:
        """Trajectory index of each observation entering the pooled estimate."""
        return np.nonzero(self.mask)[0]

    @cached_property
    def _observed_sale_scores(self) -> dict:
        return {mode: self.scores(mode)[self.mask][..., 1] for mode in SCORE_MODES}

    def sale_scores(self, mode: str = "dr") -> np.ndarray:
        """Scores of Y=1 for each observed row and action, shape (m, 2)."""
        if mode not in SCORE_MODES:
            self.scores(mode)
        return self._observed_sale_scores[mode]


def dr_scores(
    data: TrajectoryBatch, nuisances: NuisanceSet, drop_stockout: bool = False
) -> DRScoreTable:
    """Build the score table of ``data`` from cross-fitted nuisances.

    Args:
        data (TrajectoryBatch): Logged trajectories.
        nuisances (NuisanceSet): Nuisances fitted on the folds of ``data``.
        drop_stockout (bool): Leave observations at zero inventory out of
            the pooled estimates.

    Returns:
        DRScoreTable: Scores for every observation, action and outcome.
    """
    preds = nuisances.predict_arrays(data)
    actions = np.arange(2)
    took = (data.a[..., None] == actions).astype(float)
    outcome = (data.y[..., None] == actions).astype(float)

    # mu_full[i, t, a, y] = mu(y | a, x_it)
    mu_full = np.stack([1.0 - preds.mu, preds.mu], axis=-1)
    mu_logged = np.take_along_axis(mu_full, data.a[..., None, None], axis=2)[:, :, 0, :]

    weight = took / preds.e_obs[..., None]
    mask = data.s > 0 if drop_stockout else np.ones(data.s.shape, dtype=bool)
    log.debug(f"Built scores for {int(mask.sum())} of {mask.size} observations")
    return DRScoreTable(
        ipw=weight[..., :, None] * outcome[..., None, :],
        correction=weight[..., :, None] * mu_logged[..., None, :],
        direct=mu_full,
        mask=mask,
        x=data.x,
        prices=nuisances.prices,
        clip_rate=preds.clip_rate,
    )


@dataclass(frozen=True)
class MarginalTransition:
    """P(Y = y | pi) and the expected immediate revenue of a single-step rule.

    ``probs`` may leave [0, 1] for raw estimates; ``clipped`` records whether
    clipping was applied. ``revenue`` is the expected reward when stock is
    available.
    """

    probs: dict
    revenue: float
    mode: str
    clipped: bool = False
    stderr: float = 0.0

    @property
    def p_sale(self) -> float:
        """P(Y = 1 | pi)."""
        return self.probs[1]

    def to_dict(self) -> dict:
        """JSON representation."""
        return {
            "probs": {str(y): p for y, p in self.probs.items()},
            "revenue": self.revenue,
            "mode": self.mode,
            "clipped": self.clipped,
            "stderr": self.stderr,
        }


def _transition(p_sale, revenue, prices, mode, clip, stderr=0.0) -> MarginalTransition:
    clipped = False
    if clip:
        bounded = min(max(p_sale, 0.0), 1.0)
        low, high = float(prices.min()) * bounded, float(prices.max()) * bounded
        bounded_revenue = min(max(revenue, low), high)
        clipped = bounded != p_sale or bounded_revenue != revenue
        p_sale, revenue = bounded, bounded_revenue
    return MarginalTransition(
        probs={0: 1.0 - p_sale, 1: p_sale},
        revenue=float(revenue),
        mode=mode,
        clipped=clipped,
        stderr=float(stderr),
    )


def _clustered_stderr(residuals: np.ndarray, traj: np.ndarray) -> float:
    """Standard error of a pooled mean with rows correlated within trajectories."""
    sums = np.bincount(traj, weights=residuals)
    clusters = np.count_nonzero(np.bincount(traj))
    if clusters < 2:
        return 0.0
    variance = clusters / (clusters - 1) * float(sums @ sums)
    return float(np.sqrt(variance)) / len(residuals)


def estimate_transition(
    candidate: StepPolicy, scores: DRScoreTable, mode: str = "dr", clip: bool = False
) -> MarginalTransition:
    """Pooled estimate of P(Y = y | candidate) over all observations.

    Args:
        candidate (StepPolicy): The single-step rule.
        scores (DRScoreTable): Score table of the logged data.
        mode (str): ``dr``, ``ipw`` or ``dm``.
        clip (bool): Clip P(Y=1) to [0, 1] and the revenue to the matching
            price range. P(Y=0) is always the complement.

    Returns:
        MarginalTransition: The estimate.
    """
    x = scores.observed_x
    if len(x) == 0:
        msg = "No observations left to estimate transitions from"
        log.error(msg)
        raise ValueError(msg)
    sale = scores.sale_scores(mode)
    pi = candidate.action_probs(x)
    per_row = np.einsum("ma,ma->m", pi, sale)
    revenue = float(np.einsum("ma,a,ma->", pi, scores.prices, sale) / len(x))
    p_sale = float(per_row.mean())
    stderr = _clustered_stderr(per_row - p_sale, scores.observed_traj)
    return _transition(p_sale, revenue, scores.prices, mode, clip, stderr)


class TransitionProvider(Protocol):
    """Maps the rule played at (t, s) to its marginal transition."""

    def __call__(self, t: int, s: int, rule: StepPolicy) -> MarginalTransition:
        """Transition of ``rule`` at (t, s)."""


@dataclass(eq=False)
class EstimatedTransitions:
    """Transitions estimated from logged data, cached per rule."""

    scores: DRScoreTable
    mode: str = "dr"
    clip: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    def __call__(self, t: int, s: int, rule: StepPolicy) -> MarginalTransition:
        """The pooled estimate does not depend on (t, s)."""
        if rule.key not in self._cache:
            self._cache[rule.key] = estimate_transition(
                rule, self.scores, self.mode, self.clip
            )
        return self._cache[rule.key]

    @property
    def clip_rate(self) -> float:
        """Share of cached estimates that needed clipping."""
        if not self._cache:
            return 0.0
        return float(np.mean([tr.clipped for tr in self._cache.values()]))


class OracleTransitions:
    """Transitions under a known response model.

    Finite context distributions are summed exactly; otherwise the
    expectation is a Monte Carlo average over a fixed set of context draws.

    Args:
        cfg (PricingConfig): The environment.
        outcome (callable): Response model mu(1 | a, x), defaults to the truth.
        n_draws (int): Context draws for continuous distributions.
        seed (int): Seed of the context draws.
    """

    def __init__(
        self,
        cfg: PricingConfig,
        outcome: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
        n_draws: int = ORACLE_DRAWS,
        seed: int = 0,
    ):
        """Draw or enumerate the contexts and precompute responses."""
        self.cfg = cfg
        self.outcome = outcome or true_outcome(cfg)
        spec = cfg.context_spec
        if spec.is_finite:
            self.x = spec.support_array
            self.weights = spec.probs_array
            self.exact = True
        else:
            self.x = spec.sample(np.random.default_rng(seed), n_draws)
            self.weights = np.full(n_draws, 1.0 / n_draws)
            self.exact = False
        self.mu = np.stack(
            [self.outcome(self.x, np.full(len(self.x), a)) for a in (0, 1)], axis=-1
        )
        self._cache: dict = {}

    def __call__(self, t: int, s: int, rule: StepPolicy) -> MarginalTransition:
        """Exact or Monte Carlo transition of ``rule``."""
        if rule.key not in self._cache:
            self._cache[rule.key] = self._compute(rule)
        return self._cache[rule.key]

    def _compute(self, rule: StepPolicy) -> MarginalTransition:
        pi = rule.action_probs(self.x)
        per_row = np.einsum("ma,ma->m", pi, self.mu)
        p_sale = float(self.weights @ per_row)
        revenue = float(self.weights @ (pi * self.mu) @ self.cfg.price_array)
        stderr = 0.0 if self.exact else per_row.std(ddof=1) / np.sqrt(len(per_row))
        prices = self.cfg.price_array
        return _transition(p_sale, revenue, prices, "oracle", False, stderr)


def oracle_transition(
    candidate: StepPolicy,
    cfg: PricingConfig,
    outcome: Optional[Callable] = None,
    n_draws: int = ORACLE_DRAWS,
    seed: int = 0,
) -> MarginalTransition:
    """P(Y = y | candidate) under the true (or a given) response model."""
    return OracleTransitions(cfg, outcome, n_draws, seed)(0, 0, candidate)


@dataclass(frozen=True, eq=False)
class ValueTable:
    """Values V[t, s] for t = 0..T and s = 0..s0.

    ``p_sale`` and ``revenue`` hold the transition used at each (t, s) with
    t < T; the Q value of the played rule equals ``values[t, s]``.
    """

    values: np.ndarray
    p_sale: np.ndarray
    revenue: np.ndarray

    @property
    def horizon(self) -> int:
        """Number of decision epochs T."""
        return self.values.shape[0] - 1

    @property
    def capacity(self) -> int:
        """Initial capacity s0."""
        return self.values.shape[1] - 1

    @property
    def q(self) -> np.ndarray:
        """Q values of the played rules, shape (T, s0 + 1)."""
        return self.values[:-1]

    def delta(self, t: int) -> np.ndarray:
        """DeltaV_t(s) = V_t(s - 1) - V_t(s) for s = 1..s0."""
        return self.values[t, :-1] - self.values[t, 1:]

    def to_dict(self) -> dict:
        """JSON representation."""
        return {
            "values": self.values.tolist(),
            "p_sale": self.p_sale.tolist(),
            "revenue": self.revenue.tolist(),
        }


def _backup(tr: MarginalTransition, next_values: np.ndarray, s: int) -> float:
    """Expected revenue plus the continuation after the sale outcome."""
    return tr.revenue + tr.p_sale * next_values[s - 1] + tr.probs[0] * next_values[s]


def evaluate_policy(
    provider: TransitionProvider, policy: PolicySpec, cfg: PricingConfig
) -> ValueTable:
    """Backward recursion of a (t, s)-indexed policy in the marginal MDP.

    From s > 0 a sale moves to s - 1 and collects the rule's expected
    revenue; without a sale the state stays. Zero inventory is absorbing
    and worth nothing.

    Args:
        provider (TransitionProvider): Transition of each played rule.
        policy (PolicySpec): The policy to evaluate.
        cfg (PricingConfig): The environment.

    Returns:
        ValueTable: The values.
    """
    T, s0 = cfg.horizon_T, cfg.initial_capacity_s0
    values = np.zeros((T + 1, s0 + 1))
    p_sale = np.zeros((T, s0 + 1))
    revenue = np.zeros((T, s0 + 1))
    for t in reversed(range(T)):
        for s in range(1, s0 + 1):
            tr = provider(t, s, policy.at(t, s))
            p_sale[t, s], revenue[t, s] = tr.p_sale, tr.revenue
            values[t, s] = _backup(tr, values[t + 1], s)
    return ValueTable(values=values, p_sale=p_sale, revenue=revenue)


def oracle_value(
    policy: PolicySpec,
    cfg: PricingConfig,
    outcome: Optional[Callable] = None,
    n_draws: int = ORACLE_DRAWS,
    seed: int = 0,
) -> ValueTable:
    """Exact (finite contexts) or Monte Carlo value in the marginal MDP."""
    return evaluate_policy(OracleTransitions(cfg, outcome, n_draws, seed), policy, cfg)


@dataclass(frozen=True, eq=False)
class OptimalSolution:
    """The optimal marginal-MDP policy and its threshold on the response ratio.

    ``theta`` has shape (T, s0); column ``s - 1`` holds inventory ``s``.
    """

    values: ValueTable
    policy: TabularPolicy
    theta: np.ndarray


def _optimal_rule(outcome, prices, dv, t, s, tag) -> StepPolicy:
    gain = prices + dv

    def prob_one(x):
        x = np.asarray(x)
        m = x.shape[:-1]
        sell_high = outcome(x, np.ones(m, dtype=np.int64)) * gain[1]
        sell_low = outcome(x, np.zeros(m, dtype=np.int64)) * gain[0]
        return (sell_high > sell_low).astype(float)

    return StepPolicy(key=("oracle-optimal", tag, t, s), prob_one=prob_one)


def oracle_optimal(
    cfg: PricingConfig,
    outcome: Optional[Callable] = None,
    n_draws: int = ORACLE_DRAWS,
    seed: int = 0,
) -> OptimalSolution:
    """Optimal policy of the marginal MDP under a known response model.

    At every (t, s) the best rule picks, for each context, the action
    maximising mu(1 | a, x) * (p(a) + DeltaV_{t+1}(s)).

    Args:
        cfg (PricingConfig): The environment.
        outcome (callable): Response model, defaults to the truth.
        n_draws (int): Context draws for continuous distributions.
        seed (int): Seed of the context draws.

    Returns:
        OptimalSolution: Values, the tabular policy and its thresholds.
    """
    provider = OracleTransitions(cfg, outcome, n_draws, seed)
    T, s0 = cfg.horizon_T, cfg.initial_capacity_s0
    prices = cfg.price_array
    values = np.zeros((T + 1, s0 + 1))
    p_sale = np.zeros((T, s0 + 1))
    revenue = np.zeros((T, s0 + 1))
    theta = np.zeros((T, s0))
    steps = {}
    for t in reversed(range(T)):
        for s in range(1, s0 + 1):
            dv = values[t + 1, s - 1] - values[t + 1, s]
            rule = _optimal_rule(provider.outcome, prices, dv, t, s, id(provider))
            tr = provider(t, s, rule)
            steps[(t, s)] = rule
            p_sale[t, s], revenue[t, s] = tr.p_sale, tr.revenue
            values[t, s] = _backup(tr, values[t + 1], s)
            theta[t, s - 1] = (prices[0] + dv) / (prices[1] + dv)
    log.debug(f"Oracle optimal value V_0({s0}) = {values[0, s0]:.6f}")
    return OptimalSolution(
        values=ValueTable(values=values, p_sale=p_sale, revenue=revenue),
        policy=TabularPolicy(steps),
        theta=theta,
    )


@dataclass(frozen=True, eq=False)
class Decomposition:
    """Value difference split into per-step model errors.

    ``step_errors[t, s]`` is the reward error plus the transition error
    applied to the true next-step values. ``occupancy[t, s]`` is the
    probability of being at s at time t under the estimated model.
    """

    step_errors: np.ndarray
    occupancy: np.ndarray
    true_values: ValueTable
    estimated_values: ValueTable
    start: int

    @property
    def total(self) -> float:
        """Sum of step errors weighted by the estimated occupancy."""
        return float((self.occupancy * self.step_errors).sum())

    @property
    def value_gap(self) -> float:
        """True minus estimated value at (0, start)."""
        true_value = self.true_values.values[0, self.start]
        return float(true_value - self.estimated_values.values[0, self.start])


def additive_decomposition(
    policy: PolicySpec,
    true_provider: TransitionProvider,
    estimated_provider: TransitionProvider,
    cfg: PricingConfig,
    start: Optional[int] = None,
) -> Decomposition:
    """Decompose the value error of ``policy`` into propagated step errors.

    Pass unclipped estimates; the identity ``total == value_gap`` holds for
    any estimated transitions, including ones outside [0, 1].
    """
    T, s0 = cfg.horizon_T, cfg.initial_capacity_s0
    start = s0 if start is None else start
    truth = evaluate_policy(true_provider, policy, cfg)
    estimate = evaluate_policy(estimated_provider, policy, cfg)

    step_errors = np.zeros((T, s0 + 1))
    for t in range(T):
        v_next = truth.values[t + 1]
        for s in range(1, s0 + 1):
            reward_error = truth.revenue[t, s] - estimate.revenue[t, s]
            sale_error = truth.p_sale[t, s] - estimate.p_sale[t, s]
            step_errors[t, s] = reward_error + sale_error * (v_next[s - 1] - v_next[s])

    occupancy = np.zeros((T, s0 + 1))
    occupancy[0, start] = 1.0
    for t in range(T - 1):
        occupancy[t + 1, 0] += occupancy[t, 0]
        for s in range(1, s0 + 1):
            p = estimate.p_sale[t, s]
            occupancy[t + 1, s - 1] += occupancy[t, s] * p
            occupancy[t + 1, s] += occupancy[t, s] * (1.0 - p)
    return Decomposition(
        step_errors=step_errors,
        occupancy=occupancy,
        true_values=truth,
        estimated_values=estimate,
        start=start,
    )
