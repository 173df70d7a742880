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
"""Backward-recursive learning of threshold policies on the response ratio."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from stateful_ope.env import (
    PricingConfig,
    ThresholdOnRatio,
    TrajectoryBatch,
    monte_carlo_value,
    threshold_step,
)
from stateful_ope.marginal import (
    ORACLE_DRAWS,
    EstimatedTransitions,
    OracleTransitions,
    TransitionProvider,
    ValueTable,
    dr_scores,
)
from stateful_ope.nuisance import NuisanceSet

log = logging.getLogger(__name__)

RATIO_FLOOR = 1e-6
GRID_SIZE = 101


@dataclass(eq=False)
class OutcomeRatio:
    """The response ratio mu(1 | 1, x) / mu(1 | 0, x) of an outcome model.

    The denominator is floored at ``floor``; ``floor_events`` counts the
    contexts where that happened.
    """

    outcome: Callable[[np.ndarray, np.ndarray], np.ndarray]
    floor: float = RATIO_FLOOR
    name: str = "estimated"
    floor_events: int = 0
    _last: tuple = field(default=(None, None), repr=False)

    @property
    def key(self) -> tuple:
        """Identity of the ratio, used to cache transitions."""
        return ("ratio", self.name, id(self))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Ratio at every context of ``x``."""
        last_x, last_ratio = self._last
        if x is last_x:
            return last_ratio
        x = np.asarray(x, dtype=float)
        m = x.shape[:-1]
        high = self.outcome(x, np.ones(m, dtype=np.int64))
        low = self.outcome(x, np.zeros(m, dtype=np.int64))
        floored = low < self.floor
        if floored.any():
            self.floor_events += int(floored.sum())
            log.warning(
                f"Ratio denominator floored at {self.floor} "
                f"for {int(floored.sum())} contexts"
            )
        values = high / np.maximum(low, self.floor)
        self._last = (x, values)
        return values


def ratio(
    mu_hat: Callable[[np.ndarray, np.ndarray], np.ndarray],
    x: np.ndarray,
    floor: float = RATIO_FLOOR,
) -> np.ndarray:
    """mu_hat(1 | 1, x) / max(mu_hat(1 | 0, x), floor)."""
    return OutcomeRatio(mu_hat, floor)(np.atleast_2d(x))


@dataclass(frozen=True, eq=False)
class ThresholdGrid:
    """Strictly increasing candidate thresholds bracketed by -inf and +inf."""

    thresholds: np.ndarray

    def __post_init__(self):
        """Check ordering and sentinels."""
        values = np.asarray(self.thresholds, dtype=float)
        if (
            len(values) < 2
            or values[0] != -np.inf
            or values[-1] != np.inf
            or np.any(np.diff(values) <= 0)
        ):
            msg = (
                "Threshold grid must be strictly increasing "
                "with -inf and +inf sentinels"
            )
            log.error(msg)
            raise ValueError(msg)
        object.__setattr__(self, "thresholds", values)

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "ThresholdGrid":
        """Sorted, deduplicated finite values plus sentinels."""
        values = np.asarray(values, dtype=float)
        finite = np.unique(values[np.isfinite(values)])
        return cls(np.concatenate([[-np.inf], finite, [np.inf]]))

    def __len__(self) -> int:
        """Number of candidates, sentinels included."""
        return len(self.thresholds)

    def __iter__(self):
        """Iterate over thresholds."""
        return iter(self.thresholds.tolist())

    def __contains__(self, value: float) -> bool:
        """Whether ``value`` is a grid point."""
        return bool(np.any(self.thresholds == value))

    def union(self, other: "ThresholdGrid") -> "ThresholdGrid":
        """Grid holding the candidates of both."""
        values = np.concatenate([self.thresholds, other.thresholds])
        return ThresholdGrid.from_values(values)


def grid_from_contexts(
    x: np.ndarray, ratio_fn: Callable[[np.ndarray], np.ndarray], G: int = GRID_SIZE
) -> ThresholdGrid:
    """``G`` empirical quantiles of the ratio over the contexts ``x``."""
    if G < 2:
        msg = f"Threshold grid needs at least two quantiles, got G={G}"
        log.error(msg)
        raise ValueError(msg)
    values = ratio_fn(np.asarray(x).reshape(-1, np.shape(x)[-1]))
    return ThresholdGrid.from_values(np.quantile(values, np.linspace(0.0, 1.0, G)))


def build_grid(
    data: TrajectoryBatch,
    ratio_fn: Callable[[np.ndarray], np.ndarray],
    G: int = GRID_SIZE,
) -> ThresholdGrid:
    """Quantile grid of the ratio over every logged context.

    Args:
        data (TrajectoryBatch): Logged trajectories.
        ratio_fn (callable): Ratio of the fitted outcome model.
        G (int): Number of quantiles.

    Returns:
        ThresholdGrid: Deduplicated quantiles plus sentinels.
    """
    return grid_from_contexts(data.x, ratio_fn, G)


@dataclass(frozen=True, eq=False)
class LearnedPolicy:
    """Thresholds chosen per (t, s) and the fitted values they achieve.

    ``theta`` has shape (T, s0), column ``s - 1`` for inventory ``s``;
    ``q_grid[t, s, j]`` is the fitted Q of grid threshold ``j``.
    """

    theta: np.ndarray
    ratio_fn: Callable[[np.ndarray], np.ndarray]
    values: ValueTable
    mode: str
    grid: ThresholdGrid
    q_grid: np.ndarray

    @property
    def policy(self) -> ThresholdOnRatio:
        """High price exactly when the ratio exceeds theta[t, s - 1]."""
        return ThresholdOnRatio(self.ratio_fn, self.theta)

    @property
    def value(self) -> float:
        """Fitted V_0(s0)."""
        return float(self.values.values[0, -1])

    def to_dict(self) -> dict:
        """JSON representation; infinite thresholds become strings."""
        return {
            "mode": self.mode,
            "ratio": getattr(self.ratio_fn, "name", "custom"),
            "theta": [[_json_float(v) for v in row] for row in self.theta],
            "values": self.values.to_dict(),
            "grid_size": len(self.grid),
        }


def _json_float(value: float):
    return value if np.isfinite(value) else str(value)


def learn_with_provider(
    provider: TransitionProvider,
    ratio_fn: Callable[[np.ndarray], np.ndarray],
    grid: ThresholdGrid,
    cfg: PricingConfig,
    mode: str = "dr",
) -> LearnedPolicy:
    """Pick the best grid threshold at every (t, s) by backward recursion.

    Every candidate's transition is computed once and shared by all
    (t, s). Ties go to the smallest threshold.
    """
    T, s0 = cfg.horizon_T, cfg.initial_capacity_s0
    thresholds = grid.thresholds
    transitions = [
        provider(0, 1, threshold_step(ratio_fn, theta)) for theta in thresholds
    ]
    p_sale = np.array([tr.p_sale for tr in transitions])
    revenue = np.array([tr.revenue for tr in transitions])
    log.debug(f"Computed {len(thresholds)} candidate transitions ({mode})")

    values = np.zeros((T + 1, s0 + 1))
    chosen_p = np.zeros((T, s0 + 1))
    chosen_r = np.zeros((T, s0 + 1))
    theta = np.zeros((T, s0))
    q_grid = np.full((T, s0 + 1, len(thresholds)), np.nan)
    for t in reversed(range(T)):
        for s in range(1, s0 + 1):
            q = (
                revenue
                + p_sale * values[t + 1, s - 1]
                + (1.0 - p_sale) * values[t + 1, s]
            )
            best = int(np.argmax(q))
            q_grid[t, s] = q
            theta[t, s - 1] = thresholds[best]
            values[t, s] = q[best]
            chosen_p[t, s], chosen_r[t, s] = p_sale[best], revenue[best]

    return LearnedPolicy(
        theta=theta,
        ratio_fn=ratio_fn,
        values=ValueTable(values=values, p_sale=chosen_p, revenue=chosen_r),
        mode=mode,
        grid=grid,
        q_grid=q_grid,
    )


def learn(
    data: TrajectoryBatch,
    nuisances: NuisanceSet,
    mode: str,
    grid: Optional[ThresholdGrid],
    cfg: PricingConfig,
    clip: bool = True,
    drop_stockout: bool = False,
    ratio_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    grid_size: int = GRID_SIZE,
) -> LearnedPolicy:
    """Learn per-(t, s) thresholds from logged data.

    Args:
        data (TrajectoryBatch): Logged trajectories.
        nuisances (NuisanceSet): Cross-fitted nuisances of ``data``.
        mode (str): ``dr``, ``ipw`` or ``dm``.
        grid (ThresholdGrid): Candidates; built from the ratio quantiles
            of ``data`` when None.
        cfg (PricingConfig): The environment.
        clip (bool): Clip transition estimates before the recursion.
        drop_stockout (bool): Leave zero-inventory rows out of the estimates.
        ratio_fn (callable): Ratio being thresholded, defaults to the ratio
            of the fold-averaged outcome model.
        grid_size (int): Quantiles in the default grid.

    Returns:
        LearnedPolicy: The learned thresholds.
    """
    if ratio_fn is None:
        ratio_fn = OutcomeRatio(nuisances.outcome_mean)
    if grid is None:
        grid = build_grid(data, ratio_fn, grid_size)
    scores = dr_scores(data, nuisances, drop_stockout)
    provider = EstimatedTransitions(scores, mode, clip)
    learned = learn_with_provider(provider, ratio_fn, grid, cfg, mode)
    log.debug(
        f"Learned {mode} thresholds with fitted value {learned.value:.5f}, "
        f"clip rate {provider.clip_rate:.2%}"
    )
    return learned


def best_in_class(
    cfg: PricingConfig,
    grid_size: int = GRID_SIZE,
    n_draws: int = ORACLE_DRAWS,
    seed: int = 0,
) -> LearnedPolicy:
    """Best threshold policy on the true ratio under the true transitions."""
    provider = OracleTransitions(cfg, n_draws=n_draws, seed=seed)
    ratio_fn = OutcomeRatio(provider.outcome, name="true")
    grid = grid_from_contexts(provider.x, ratio_fn, grid_size)
    return learn_with_provider(provider, ratio_fn, grid, cfg, mode="oracle")


def out_of_sample_value(
    learned: LearnedPolicy, cfg: PricingConfig, n_rollouts: int = 10_000, seed: int = 0
) -> tuple[float, float]:
    """Monte Carlo value of the learned policy on fresh trajectories."""
    return monte_carlo_value(cfg, learned.policy, n_rollouts, seed)


def regret_slope(ns: Sequence[float], regrets: Sequence[float]) -> float:
    """Least-squares slope of log(regret) against log(n)."""
    ns, regrets = np.asarray(ns, dtype=float), np.asarray(regrets, dtype=float)
    if (
        len(ns) < 2
        or len(ns) != len(regrets)
        or np.any(ns <= 0)
        or np.any(regrets <= 0)
    ):
        msg = "Regret slope needs at least two positive (n, regret) pairs"
        log.error(msg)
        raise ValueError(msg)
    return float(np.polyfit(np.log(ns), np.log(regrets), 1)[0])
