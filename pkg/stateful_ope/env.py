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
"""Capacitated single-item pricing environment and trajectory simulation.

The system state is the remaining inventory ``s``; customers arrive with an
exogenous context ``x``, are offered one of two prices and either buy
(``y = 1``) or walk away. The purchase probability is a mixture of a
logistic specification and a nonlinear term weighted by ``mixture_delta``.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

# Trajectories are simulated in fixed blocks, each with its own substream,
# so results do not depend on how blocks are scheduled.
BLOCK_SIZE = 512

ArrayLike = Union[np.ndarray, Sequence[float], float]


@dataclass(frozen=True)
class ContextSpec:
    """Distribution of the exogenous customer context.

    Either an isotropic Gaussian with unit covariance, or a finite support
    with probabilities. The finite variant allows exact expectations.
    """

    kind: str = "gaussian"
    dim: int = 2
    mean: Optional[tuple] = None
    support: Optional[tuple] = None
    probs: Optional[tuple] = None

    def __post_init__(self):
        """Validate and normalise the stored tuples."""
        if self.kind == "gaussian":
            mean = tuple(self.mean) if self.mean is not None else (0.0,) * self.dim
            if len(mean) != self.dim:
                msg = f"Gaussian mean has length {len(mean)}, expected {self.dim}"
                log.error(msg)
                raise ValueError(msg)
            object.__setattr__(self, "mean", tuple(float(m) for m in mean))
        elif self.kind == "finite":
            if not self.support or self.probs is None:
                msg = "A finite context distribution needs support and probs."
                log.error(msg)
                raise ValueError(msg)
            support = tuple(tuple(float(v) for v in point) for point in self.support)
            probs = tuple(float(p) for p in self.probs)
            if len(support) != len(probs):
                msg = f"Support has {len(support)} points but {len(probs)} probs"
                log.error(msg)
                raise ValueError(msg)
            if any(len(point) != len(support[0]) for point in support):
                msg = "All support points must have the same dimension."
                log.error(msg)
                raise ValueError(msg)
            if min(probs) < 0 or abs(math.fsum(probs) - 1.0) > 1e-12:
                msg = f"Context probabilities must be nonnegative and sum to 1: {probs}"
                log.error(msg)
                raise ValueError(msg)
            object.__setattr__(self, "support", support)
            object.__setattr__(self, "probs", probs)
            object.__setattr__(self, "dim", len(support[0]))
        else:
            msg = f"Unknown context distribution kind: {self.kind}"
            log.error(msg)
            raise ValueError(msg)

    @classmethod
    def gaussian(cls, dim: int, mean: Optional[Sequence[float]] = None):
        """Standard Gaussian contexts of dimension ``dim``."""
        return cls(kind="gaussian", dim=dim, mean=None if mean is None else tuple(mean))

    @classmethod
    def finite(cls, support: Sequence[Sequence[float]], probs: Sequence[float]):
        """Contexts drawn from a finite support."""
        return cls(kind="finite", support=tuple(support), probs=tuple(probs))

    @property
    def is_finite(self) -> bool:
        """Whether expectations can be computed by enumeration."""
        return self.kind == "finite"

    @property
    def support_array(self) -> np.ndarray:
        """Support points as a (m, d) array."""
        return np.asarray(self.support, dtype=float)

    @property
    def probs_array(self) -> np.ndarray:
        """Support probabilities as an array."""
        return np.asarray(self.probs, dtype=float)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw ``size`` contexts as a (size, d) array."""
        if self.is_finite:
            idx = rng.choice(len(self.probs), size=size, p=self.probs_array)
            return self.support_array[idx]
        return np.asarray(self.mean) + rng.standard_normal((size, self.dim))

    def to_dict(self) -> dict:
        """JSON representation."""
        if self.is_finite:
            return {
                "kind": "finite",
                "support": [list(p) for p in self.support],
                "probs": list(self.probs),
            }
        return {"kind": "gaussian", "dim": self.dim, "mean": list(self.mean)}

    @classmethod
    def from_dict(cls, data: dict) -> "ContextSpec":
        """Parse the JSON representation."""
        kind = data.get("kind", "gaussian")
        if kind == "finite":
            return cls.finite(data["support"], data["probs"])
        return cls.gaussian(int(data.get("dim", 2)), data.get("mean"))


@dataclass(frozen=True)
class PricingConfig:
    """Full specification of the pricing environment and its data process.

    Args:
        horizon_T (int): Number of decision epochs, ``t = 0..T-1``.
        initial_capacity_s0 (int): Starting inventory.
        prices (tuple): Price for action 0 and action 1.
        beta (tuple): Context coefficients of the response model.
        beta0 (float): Price coefficient of the response model.
        mixture_delta (float): Weight of the nonlinear response term.
        context_spec (ContextSpec): Context distribution, Gaussian by default.
        behavior_scale (float): Multiplier of the logging policy index.
        eval_scale (float): Multiplier of the evaluation policy index.
    """

    horizon_T: int = 10
    initial_capacity_s0: int = 4
    prices: tuple = (0.5, 1.0)
    beta: tuple = (-0.75, 0.75)
    beta0: float = -2.0
    mixture_delta: float = 0.0
    context_spec: Optional[ContextSpec] = None
    behavior_scale: float = -0.8
    eval_scale: float = 0.25

    def __post_init__(self):
        """Validate the environment."""
        object.__setattr__(self, "prices", tuple(float(p) for p in self.prices))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if self.context_spec is None:
            spec = ContextSpec.gaussian(len(self.beta))
            object.__setattr__(self, "context_spec", spec)

        if self.horizon_T < 1:
            msg = f"Horizon must be a positive integer, got {self.horizon_T}"
            log.error(msg)
            raise ValueError(msg)
        if self.initial_capacity_s0 < 0:
            msg = f"Initial capacity must be nonnegative: {self.initial_capacity_s0}"
            log.error(msg)
            raise ValueError(msg)
        if len(self.prices) != 2 or min(self.prices) < 0:
            msg = f"Expected two nonnegative prices, got {self.prices}"
            log.error(msg)
            raise ValueError(msg)
        if not 0.0 <= self.mixture_delta <= 1.0:
            msg = f"Mixture weight must lie in [0, 1], got {self.mixture_delta}"
            log.error(msg)
            raise ValueError(msg)
        if self.context_spec.dim != len(self.beta):
            msg = (
                f"Context dimension {self.context_spec.dim} does not match "
                f"len(beta) = {len(self.beta)}"
            )
            log.error(msg)
            raise ValueError(msg)
        if self.prices[1] <= self.prices[0]:
            log.warning(
                f"prices(1)={self.prices[1]} is not above prices(0)={self.prices[0]}; "
                "threshold formulas assume the high price is action 1"
            )

    @property
    def dim(self) -> int:
        """Context dimension."""
        return len(self.beta)

    @property
    def beta_array(self) -> np.ndarray:
        """Context coefficients as an array."""
        return np.asarray(self.beta)

    @property
    def price_array(self) -> np.ndarray:
        """Prices indexed by action."""
        return np.asarray(self.prices)

    def with_delta(self, delta: float) -> "PricingConfig":
        """Copy of this config with another misspecification weight."""
        return replace(self, mixture_delta=float(delta))

    def to_dict(self) -> dict:
        """JSON document mirroring the dataclass fields."""
        return {
            "horizon_T": self.horizon_T,
            "initial_capacity_s0": self.initial_capacity_s0,
            "prices": list(self.prices),
            "beta": list(self.beta),
            "beta0": self.beta0,
            "mixture_delta": self.mixture_delta,
            "context_spec": self.context_spec.to_dict(),
            "behavior_scale": self.behavior_scale,
            "eval_scale": self.eval_scale,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PricingConfig":
        """Parse a JSON config document, missing keys take defaults."""
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        unknown = set(data) - set(known)
        if unknown:
            log.warning(f"Ignoring unknown config keys: {sorted(unknown)}")
        if isinstance(known.get("context_spec"), dict):
            known["context_spec"] = ContextSpec.from_dict(known["context_spec"])
        return cls(**known)


def canonical_config(**overrides) -> PricingConfig:
    """Two-dimensional pricing environment used for the main experiments."""
    return PricingConfig(**overrides)


def favorable_config(**overrides) -> PricingConfig:
    """Five-dimensional environment used for the OPE comparison."""
    params = dict(beta=(-0.53, -0.56, -0.10, 0.40, 0.74), beta0=-2.39)
    params.update(overrides)
    return PricingConfig(**params)


def steep_config(**overrides) -> PricingConfig:
    """Canonical environment with a price coefficient of -4.

    Demand falls fast enough with price that the low price is optimal for
    part of the contexts at every misspecification weight.
    """
    params = dict(beta0=-4.0)
    params.update(overrides)
    return PricingConfig(**params)


PRESETS: dict[str, Callable[..., PricingConfig]] = {
    "canonical": canonical_config,
    "favorable": favorable_config,
    "steep": steep_config,
}


def _contexts(x: ArrayLike, cfg: PricingConfig) -> np.ndarray:
    """Validate the trailing context dimension."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != cfg.dim:
        msg = f"Context has shape {x.shape}, expected trailing dimension {cfg.dim}"
        log.error(msg)
        raise ValueError(msg)
    return x


def true_outcome_prob(x: ArrayLike, a: ArrayLike, cfg: PricingConfig) -> np.ndarray:
    """Purchase probability mu(1 | a, x) of the mixture response model.

    Args:
        x (array): Context(s), trailing dimension ``len(beta)``.
        a (array): Action(s), broadcastable against ``x.shape[:-1]``.
        cfg (PricingConfig): The environment.

    Returns:
        np.ndarray: Probability of a sale, in (0, 1).
    """
    x = _contexts(x, cfg)
    price = cfg.price_array[np.asarray(a, dtype=np.int64)]
    logistic = expit(x @ cfg.beta_array + cfg.beta0 * price)
    if cfg.mixture_delta == 0.0:
        return logistic
    nonlinear = expit(x[..., 0] ** 2 * price)
    return (1.0 - cfg.mixture_delta) * logistic + cfg.mixture_delta * nonlinear


def behavior_propensity(x: ArrayLike, cfg: PricingConfig) -> np.ndarray:
    """Logging-policy probability e(1 | x) of offering the high price."""
    x = _contexts(x, cfg)
    return expit(cfg.behavior_scale * (x @ cfg.beta_array))


def step(s, y):
    """Next inventory after outcome ``y``; a sale needs stock, zero is absorbing."""
    if np.any(np.asarray(s) < 0):
        msg = f"Inventory must be nonnegative, got {s}"
        log.error(msg)
        raise ValueError(msg)
    return s - ((np.asarray(s) > 0) & (np.asarray(y) == 1)).astype(np.int64)


def reward(s, a, y, cfg: PricingConfig):
    """Revenue p(a) when a sale happens with stock on hand, else zero."""
    sold = (np.asarray(y) == 1) & (np.asarray(s) > 0)
    return cfg.price_array[np.asarray(a, dtype=np.int64)] * sold


@dataclass(frozen=True, eq=False)
class StepPolicy:
    """A single-step contextual rule, the action of the marginal MDP.

    ``key`` identifies the rule so estimated transitions can be cached.
    """

    key: tuple
    prob_one: Callable[[np.ndarray], np.ndarray]

    def action_probs(self, x: np.ndarray) -> np.ndarray:
        """Probabilities of actions 0 and 1 as a (m, 2) array."""
        p1 = np.clip(np.broadcast_to(self.prob_one(x), np.shape(x)[:-1]), 0.0, 1.0)
        return np.stack([1.0 - p1, p1], axis=-1)


class PolicySpec:
    """A (t, s)-indexed family of single-step policies."""

    def at(self, t: int, s: int) -> StepPolicy:
        """The single-step rule played at timestep ``t`` with inventory ``s``."""
        raise NotImplementedError

    def prob_one_batch(self, t: int, s: np.ndarray, x: np.ndarray) -> np.ndarray:
        """P(A=1) for a batch of trajectories sharing the timestep ``t``."""
        s = np.asarray(s)
        out = np.empty(len(s))
        for value in np.unique(s):
            rows = s == value
            out[rows] = self.at(t, int(value)).prob_one(x[rows])
        return out


class StochasticLogistic(PolicySpec):
    """Stationary policy P(A=1|x) = sigmoid(scale * coef'x)."""

    def __init__(self, coef: Sequence[float], scale: float = 1.0):
        """Store the index coefficients."""
        self.coef = np.asarray(coef, dtype=float)
        self.scale = float(scale)
        self._step = StepPolicy(
            key=("logistic", tuple(self.coef), self.scale), prob_one=self._prob_one
        )

    def _prob_one(self, x: np.ndarray) -> np.ndarray:
        return expit(self.scale * (np.asarray(x) @ self.coef))

    def at(self, t: int, s: int) -> StepPolicy:
        """Same rule at every (t, s)."""
        return self._step

    def prob_one_batch(self, t: int, s: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Vectorised over the whole batch."""
        return self._prob_one(x)


class BehaviorPolicy(StochasticLogistic):
    """The logging policy sigmoid(behavior_scale * beta'x)."""

    def __init__(self, cfg: PricingConfig):
        """Build from the environment coefficients."""
        super().__init__(cfg.beta, cfg.behavior_scale)


def evaluation_policy(cfg: PricingConfig) -> StochasticLogistic:
    """The stationary target policy sigmoid(eval_scale * beta'x)."""
    return StochasticLogistic(cfg.beta, cfg.eval_scale)


class ConstantAction(PolicySpec):
    """Always play action ``a``."""

    def __init__(self, a: int):
        """Store the action."""
        if a not in (0, 1):
            msg = f"Action must be 0 or 1, got {a}"
            log.error(msg)
            raise ValueError(msg)
        self.a = int(a)
        self._step = StepPolicy(
            key=("constant", self.a),
            prob_one=lambda x: np.full(np.shape(x)[:-1], float(self.a)),
        )

    def at(self, t: int, s: int) -> StepPolicy:
        """Same rule at every (t, s)."""
        return self._step

    def prob_one_batch(self, t: int, s: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Vectorised over the whole batch."""
        return np.full(len(x), float(self.a))


def threshold_step(
    ratio: Callable[[np.ndarray], np.ndarray], theta: float
) -> StepPolicy:
    """Deterministic rule: high price exactly when ``ratio(x) > theta``."""
    ratio_key = getattr(ratio, "key", ("callable", id(ratio)))
    return StepPolicy(
        key=("threshold", ratio_key, float(theta)),
        prob_one=lambda x: (ratio(x) > theta).astype(float),
    )


class ThresholdOnRatio(PolicySpec):
    """Threshold policy with one threshold per (t, s).

    Args:
        ratio (callable): Maps contexts to the score being thresholded.
        theta (np.ndarray): Thresholds of shape (T, s0); column ``s - 1``
            holds inventory ``s``. Stock-out states play action 0.
    """

    def __init__(self, ratio: Callable[[np.ndarray], np.ndarray], theta: np.ndarray):
        """Store the ratio function and the threshold table."""
        self.ratio = ratio
        self.theta = np.asarray(theta, dtype=float)
        self._steps: dict = {}

    def at(self, t: int, s: int) -> StepPolicy:
        """Threshold rule for (t, s)."""
        theta = np.inf if s <= 0 else self.theta[t, s - 1]
        if (t, s) not in self._steps:
            self._steps[(t, s)] = threshold_step(self.ratio, theta)
        return self._steps[(t, s)]

    def prob_one_batch(self, t: int, s: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Evaluate the ratio once for the whole batch."""
        s = np.asarray(s)
        theta = np.full(len(s), np.inf)
        stocked = s > 0
        theta[stocked] = self.theta[t, s[stocked] - 1]
        return (self.ratio(x) > theta).astype(float)


class TabularPolicy(PolicySpec):
    """Arbitrary single-step rules looked up per (t, s).

    Args:
        steps (dict): Maps ``(t, s)`` to a ``StepPolicy``. Missing entries
            fall back to ``default``.
        default (StepPolicy): Rule for unlisted pairs.
    """

    def __init__(self, steps: dict, default: Optional[StepPolicy] = None):
        """Store the table."""
        self.steps = dict(steps)
        self.default = default or ConstantAction(0).at(0, 0)

    def at(self, t: int, s: int) -> StepPolicy:
        """Table lookup."""
        return self.steps.get((t, s), self.default)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One episode: per-timestep inventory, context, action, outcome and reward."""

    s: np.ndarray
    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    r: np.ndarray

    @property
    def ret(self) -> float:
        """Total revenue collected."""
        return float(self.r.sum())


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """A sequence of trajectories stored as arrays.

    Shapes: ``s, a, y`` are (n, T) integers, ``r`` is (n, T) float and
    ``x`` is (n, T, d).
    """

    s: np.ndarray
    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    r: np.ndarray

    @property
    def n(self) -> int:
        """Number of trajectories."""
        return self.s.shape[0]

    @property
    def horizon(self) -> int:
        """Number of recorded timesteps."""
        return self.s.shape[1]

    @property
    def dim(self) -> int:
        """Context dimension."""
        return self.x.shape[2]

    def __len__(self) -> int:
        """Number of trajectories."""
        return self.n

    def __getitem__(self, i: int) -> Trajectory:
        """The ``i``-th trajectory."""
        return Trajectory(self.s[i], self.x[i], self.a[i], self.y[i], self.r[i])

    def __iter__(self) -> Iterator[Trajectory]:
        """Iterate over trajectories."""
        return (self[i] for i in range(self.n))

    def returns(self) -> np.ndarray:
        """Total revenue of every trajectory."""
        return self.r.sum(axis=1)

    def equals(self, other: "TrajectoryBatch") -> bool:
        """Exact equality of every recorded array."""
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("s", "x", "a", "y", "r")
        )

    @classmethod
    def concatenate(cls, batches: Sequence["TrajectoryBatch"]) -> "TrajectoryBatch":
        """Stack batches along the trajectory axis."""
        return cls(
            *(
                np.concatenate([getattr(b, name) for b in batches])
                for name in ("s", "x", "a", "y", "r")
            )
        )


def _simulate_block(
    cfg: PricingConfig, policy: PolicySpec, size: int, rng: np.random.Generator
) -> TrajectoryBatch:
    T, d = cfg.horizon_T, cfg.dim
    s = np.empty((size, T), dtype=np.int64)
    x = np.empty((size, T, d))
    a = np.empty((size, T), dtype=np.int64)
    y = np.empty((size, T), dtype=np.int64)
    r = np.empty((size, T))

    state = np.full(size, cfg.initial_capacity_s0, dtype=np.int64)
    for t in range(T):
        x_t = cfg.context_spec.sample(rng, size)
        a_t = (rng.random(size) < policy.prob_one_batch(t, state, x_t)).astype(np.int64)
        # Responses are recorded after stock-out too
        y_t = (rng.random(size) < true_outcome_prob(x_t, a_t, cfg)).astype(np.int64)
        s[:, t], x[:, t], a[:, t], y[:, t] = state, x_t, a_t, y_t
        r[:, t] = reward(state, a_t, y_t, cfg)
        state = step(state, y_t)
    return TrajectoryBatch(s=s, x=x, a=a, y=y, r=r)


def simulate(
    cfg: PricingConfig, policy: PolicySpec, n: int, seed: int = 0
) -> TrajectoryBatch:
    """Simulate ``n`` independent trajectories under ``policy``.

    Each block of ``BLOCK_SIZE`` trajectories draws from its own
    ``SeedSequence`` substream, keyed by the block index.

    Args:
        cfg (PricingConfig): The environment.
        policy (PolicySpec): Policy generating the actions.
        n (int): Number of trajectories.
        seed (int): Master seed.

    Returns:
        TrajectoryBatch: The simulated data.
    """
    if n < 1:
        msg = f"Need at least one trajectory, got n={n}"
        log.error(msg)
        raise ValueError(msg)

    blocks = []
    for block, start in enumerate(range(0, n, BLOCK_SIZE)):
        size = min(BLOCK_SIZE, n - start)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block,)))
        blocks.append(_simulate_block(cfg, policy, size, rng))
    data = TrajectoryBatch.concatenate(blocks)
    log.debug(
        f"Simulated {n} trajectories (T={cfg.horizon_T}, s0={cfg.initial_capacity_s0}) "
        f"with seed {seed}"
    )
    return data


def monte_carlo_value(
    cfg: PricingConfig, policy: PolicySpec, n_rollouts: int, seed: int = 0
) -> tuple[float, float]:
    """Mean and standard error of the total revenue of ``policy``.

    Args:
        cfg (PricingConfig): The environment.
        policy (PolicySpec): The policy to roll out.
        n_rollouts (int): Number of rollouts, at least two.
        seed (int): Master seed.

    Returns:
        tuple[float, float]: Sample mean and its standard error.
    """
    if n_rollouts < 2:
        msg = f"Need at least two rollouts for a standard error, got {n_rollouts}"
        log.error(msg)
        raise ValueError(msg)
    returns = simulate(cfg, policy, n_rollouts, seed).returns()
    mean = float(returns.mean())
    stderr = float(returns.std(ddof=1) / np.sqrt(n_rollouts))
    log.debug(
        f"Monte Carlo value over {n_rollouts} rollouts: {mean:.5f} +/- {stderr:.5f}"
    )
    return mean, stderr


def true_outcome(cfg: PricingConfig) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """The true response model as a function of (x, a)."""

    def outcome(x, a):
        return true_outcome_prob(x, a, cfg)

    outcome.key = ("true-outcome", id(cfg))
    return outcome
