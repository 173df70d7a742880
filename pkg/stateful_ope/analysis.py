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
"""Threshold structure of the optimal policy and how outcome bias moves it."""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import pandas as pd

from stateful_ope.env import PricingConfig, true_outcome_prob
from stateful_ope.learn import LearnedPolicy
from stateful_ope.marginal import ORACLE_DRAWS, ValueTable, oracle_optimal

log = logging.getLogger(__name__)

OutcomeFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def optimal_threshold(R0: float, R1: float, dV: float) -> float:
    """Ratio above which the high price is optimal: (R0 + dV) / (R1 + dV)."""
    denominator = R1 + dV
    if denominator == 0:
        msg = f"Threshold undefined for R1 + dV = 0 (R1={R1}, dV={dV})"
        log.error(msg)
        raise ValueError(msg)
    return (R0 + dV) / denominator


def biased_threshold(
    theta_star: float, delta0: float, delta1: float, eta0: float
) -> float:
    """Threshold implied by an outcome model off by ``delta0`` and ``delta1``.

    Args:
        theta_star (float): The unbiased threshold.
        delta0 (float): Error of the estimated sale probability at the low price.
        delta1 (float): Error of the estimated sale probability at the high price.
        eta0 (float): True sale probability at the low price.

    Returns:
        float: theta_star * (1 + delta0 / eta0) - delta1.
    """
    if eta0 <= 0:
        msg = f"True low-price sale probability must be positive, got {eta0}"
        log.error(msg)
        raise ValueError(msg)
    return theta_star * (1.0 + delta0 / eta0) - delta1


def oracle_thresholds(
    cfg: PricingConfig,
    outcome: Optional[OutcomeFn] = None,
    n_draws: int = ORACLE_DRAWS,
    seed: int = 0,
) -> np.ndarray:
    """Optimal thresholds theta*[t, s - 1] from the oracle dynamic program."""
    return oracle_optimal(cfg, outcome, n_draws, seed).theta


def shifted_outcome(cfg: PricingConfig, delta1: float, delta0: float) -> OutcomeFn:
    """True response model shifted by ``delta1`` at a=1 and ``delta0`` at a=0.

    Probabilities are kept inside [1e-6, 1 - 1e-6].
    """
    shift = np.array([delta0, delta1])

    def outcome(x, a):
        a = np.asarray(a, dtype=np.int64)
        return np.clip(true_outcome_prob(x, a, cfg) + shift[a], 1e-6, 1.0 - 1e-6)

    outcome.__name__ = f"shifted_outcome({delta1:+g}, {delta0:+g})"
    return outcome


@dataclass(frozen=True, eq=False)
class BiasField:
    """Pointwise outcome-model error and true response gap.

    ``delta[:, a]`` is mu_hat(1 | a, x) - mu(1 | a, x); ``tau`` is
    mu(1 | 1, x) - mu(1 | 0, x).
    """

    x: np.ndarray
    delta: np.ndarray
    tau: np.ndarray


def bias_field(cfg: PricingConfig, mu_hat: OutcomeFn, x: np.ndarray) -> BiasField:
    """Evaluate the bias of ``mu_hat`` at the contexts ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m = len(x)
    truth = np.stack(
        [true_outcome_prob(x, np.full(m, a), cfg) for a in (0, 1)], axis=-1
    )
    estimate = np.stack([mu_hat(x, np.full(m, a)) for a in (0, 1)], axis=-1)
    return BiasField(x=x, delta=estimate - truth, tau=truth[:, 1] - truth[:, 0])


@dataclass(frozen=True, eq=False)
class DeltaHistogram:
    """Binned distribution of the high-price error delta(1, x)."""

    counts: np.ndarray
    edges: np.ndarray
    mean: float

    def to_frame(self) -> pd.DataFrame:
        """One row per bin."""
        return pd.DataFrame(
            {
                "bin_left": self.edges[:-1],
                "bin_right": self.edges[1:],
                "count": self.counts,
            }
        )


def delta_histogram(
    cfg: PricingConfig,
    mu_hat: OutcomeFn,
    bins: int = 40,
    n_draws: int = 100_000,
    seed: int = 0,
) -> DeltaHistogram:
    """Histogram of delta(1, x) over contexts drawn from the environment."""
    x = cfg.context_spec.sample(np.random.default_rng(seed), n_draws)
    delta1 = bias_field(cfg, mu_hat, x).delta[:, 1]
    center = float(delta1.mean())
    half_width = 1e-6 * max(1.0, abs(center))
    # A constant shift leaves only rounding noise in delta1
    value_range = None
    if np.ptp(delta1) < half_width:
        value_range = (center - half_width, center + half_width)
    counts, edges = np.histogram(delta1, bins=bins, range=value_range)
    log.debug(f"Mean high-price outcome error {center:+.5f}")
    return DeltaHistogram(counts=counts, edges=edges, mean=center)


def persistence_condition(
    cfg: PricingConfig,
    theta_hat_next: float,
    theta_star_next: float,
    n_draws: int = 100_000,
    seed: int = 0,
) -> float:
    """E[-tau(X) 1[lo <= ratio(X) <= hi]] with (lo, hi) the sorted thresholds.

    A nonnegative value means the single-step error carries over to the
    previous timestep. Finite context distributions are summed exactly.
    """
    lo, hi = sorted((theta_hat_next, theta_star_next))
    spec = cfg.context_spec
    if spec.is_finite:
        x, weights = spec.support_array, spec.probs_array
    else:
        x = spec.sample(np.random.default_rng(seed), n_draws)
        weights = np.full(len(x), 1.0 / len(x))
    m = len(x)
    high = true_outcome_prob(x, np.ones(m, dtype=np.int64), cfg)
    low = true_outcome_prob(x, np.zeros(m, dtype=np.int64), cfg)
    ratio = high / low
    between = (ratio >= lo) & (ratio <= hi)
    return float(weights @ (-(high - low) * between))


@dataclass(frozen=True, eq=False)
class ThresholdReport:
    """Learned against optimal thresholds, both of shape (T, s0).

    With ``ratios``, the sorted ratio values the contexts take, thresholds are
    compared by how they split those values rather than by their raw level.
    """

    theta_star: np.ndarray
    theta_hat: np.ndarray
    persistence: float = float("nan")
    delta_hist: Optional[DeltaHistogram] = None
    ratios: Optional[np.ndarray] = None

    def effective(self, theta: np.ndarray) -> np.ndarray:
        """Thresholds clamped to the ratio range, non-finite ones as NaN without it."""
        theta = np.asarray(theta, dtype=float)
        if self.ratios is None:
            return np.where(np.isfinite(theta), theta, np.nan)
        return np.clip(theta, self.ratios[0], self.ratios[-1])

    @property
    def same_partition(self) -> np.ndarray:
        """Cells where both thresholds price every context the same way."""
        if self.ratios is None:
            return self.theta_star == self.theta_hat
        below_star = np.searchsorted(self.ratios, self.theta_star, side="right")
        below_hat = np.searchsorted(self.ratios, self.theta_hat, side="right")
        return below_star == below_hat

    @property
    def gap(self) -> np.ndarray:
        """theta* - theta_hat on the effective thresholds, zero on equal splits."""
        gap = self.effective(self.theta_star) - self.effective(self.theta_hat)
        return np.where(self.same_partition, 0.0, gap)

    @property
    def fraction_below(self) -> float:
        """Share of cells with s > 2 where the learned threshold is lower."""
        cells = self.gap[:, 2:]
        if cells.size == 0:
            return float("nan")
        return float(np.mean(cells > 0))

    def to_frame(self) -> pd.DataFrame:
        """Long format, one row per (t, s), with effective thresholds."""
        T, s0 = self.theta_star.shape
        t, s = np.meshgrid(np.arange(T), np.arange(1, s0 + 1), indexing="ij")
        return pd.DataFrame(
            {
                "t": t.ravel(),
                "s": s.ravel(),
                "theta_star": self.effective(self.theta_star).ravel(),
                "theta_hat": self.effective(self.theta_hat).ravel(),
                "same_partition": self.same_partition.ravel(),
                "gap": self.gap.ravel(),
            }
        )

    def summary(self) -> dict:
        """Scalar summary for the JSON report."""
        return {
            "fraction_below": self.fraction_below,
            "same_partition": float(np.mean(self.same_partition)),
            "persistence_condition": self.persistence,
            "delta1_mean": None if self.delta_hist is None else self.delta_hist.mean,
        }


def heatmap(
    learned: Union[LearnedPolicy, np.ndarray],
    theta_star: np.ndarray,
    delta_hist: Optional[DeltaHistogram] = None,
    persistence: float = float("nan"),
    ratios: Optional[np.ndarray] = None,
) -> ThresholdReport:
    """Compare learned thresholds with the optimal ones."""
    theta_hat = np.asarray(getattr(learned, "theta", learned), dtype=float)
    theta_star = np.asarray(theta_star, dtype=float)
    if theta_hat.shape != theta_star.shape:
        msg = (
            f"Threshold tables differ in shape: {theta_hat.shape} "
            f"vs {theta_star.shape}"
        )
        log.error(msg)
        raise ValueError(msg)
    if ratios is not None:
        ratios = np.sort(np.asarray(ratios, dtype=float).ravel())
        if ratios.size == 0:
            msg = "Need at least one ratio value to compare thresholds"
            log.error(msg)
            raise ValueError(msg)
    return ThresholdReport(
        theta_star=theta_star,
        theta_hat=theta_hat,
        persistence=persistence,
        delta_hist=delta_hist,
        ratios=ratios,
    )


def concavity_check(
    values: Union[ValueTable, np.ndarray], tol: float = 1e-9
) -> np.ndarray:
    """Per timestep, whether V[t, s] - V[t, s - 1] is nonincreasing in s."""
    table = np.atleast_2d(np.asarray(getattr(values, "values", values), dtype=float))
    if table.shape[1] < 3:
        msg = (
            "Concavity needs at least two inventory levels, "
            f"got s0={table.shape[1] - 1}"
        )
        log.error(msg)
        raise ValueError(msg)
    increments = np.diff(table, axis=1)
    return np.all(np.diff(increments, axis=1) <= tol, axis=1)
