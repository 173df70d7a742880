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
"""Cross-fitted propensity and outcome models.

Folds split trajectories in ``K`` groups and timesteps by parity. The model
used for observation ``(i, t)`` is trained on the other trajectory folds at
timesteps of the same parity.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit, log_expit

from stateful_ope.env import PricingConfig, TrajectoryBatch

log = logging.getLogger(__name__)

MIN_FOLD_ROWS = 10
OUTCOME_MODES = ("logistic", "flexible")
KNN_EXPONENT = 0.8
QUERY_CHUNK = 2048


class LogisticConvergenceError(RuntimeError):
    """Newton iterations stopped before the gradient norm reached tolerance."""

    def __init__(self, msg: str, grad_norm: float, iterations: int):
        """Keep the final gradient norm for diagnostics."""
        super().__init__(msg)
        self.grad_norm = grad_norm
        self.iterations = iterations


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """Trajectory folds crossed with timestep parity.

    The key of observation ``(i, t)`` is ``(traj_fold[i], t % 2)``; the model
    stored under that key was trained on all other trajectory folds at the
    same parity.
    """

    traj_fold: np.ndarray
    horizon: int
    n_folds: int = 2

    @property
    def n(self) -> int:
        """Number of trajectories."""
        return len(self.traj_fold)

    def key(self, i: int, t: int) -> tuple[int, int]:
        """Fold key k(i, t)."""
        return int(self.traj_fold[i]), t % 2

    def keys(self) -> list[tuple[int, int]]:
        """All fold keys."""
        return [(k, p) for k in range(self.n_folds) for p in (0, 1)]

    def _parity(self) -> np.ndarray:
        return np.broadcast_to(np.arange(self.horizon) % 2, (self.n, self.horizon))

    def evaluation_mask(self, key: tuple[int, int]) -> np.ndarray:
        """Observations predicted by the model under ``key``."""
        fold, parity = key
        return (self.traj_fold[:, None] == fold) & (self._parity() == parity)

    def training_mask(self, key: tuple[int, int]) -> np.ndarray:
        """Observations the model under ``key`` is trained on."""
        fold, parity = key
        return (self.traj_fold[:, None] != fold) & (self._parity() == parity)

    def to_dict(self) -> dict:
        """JSON representation."""
        return {
            "n_folds": self.n_folds,
            "horizon": self.horizon,
            "traj_fold": self.traj_fold.tolist(),
        }


def assign_folds(
    n: int, T: int, K: int = 2, seed: Optional[int] = 0, shuffle: bool = True
) -> FoldAssignment:
    """Partition ``n`` trajectories into ``K`` near-equal folds.

    Args:
        n (int): Number of trajectories.
        T (int): Horizon of each trajectory.
        K (int): Number of trajectory folds.
        seed (int): Seed of the shuffle.
        shuffle (bool): If false, trajectories are assigned in index order.

    Returns:
        FoldAssignment: The fold map.
    """
    if K < 2 or n < K:
        msg = f"Cannot split {n} trajectories into {K} folds"
        log.error(msg)
        raise ValueError(msg)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    traj_fold = np.empty(n, dtype=np.int64)
    traj_fold[order] = np.arange(n) * K // n
    return FoldAssignment(traj_fold=traj_fold, horizon=T, n_folds=K)


@dataclass(frozen=True, eq=False)
class LogisticModel:
    """A fitted logistic regression."""

    weights: np.ndarray
    intercept: float
    feature_map: str = "raw"
    grad_norm: float = 0.0
    iterations: int = 0

    def decision_function(self, features: np.ndarray) -> np.ndarray:
        """Linear index."""
        return np.asarray(features) @ self.weights + self.intercept

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        """P(label = 1 | features)."""
        return expit(self.decision_function(features))

    def to_dict(self) -> dict:
        """JSON representation."""
        return {
            "kind": "logistic",
            "feature_map": self.feature_map,
            "weights": self.weights.tolist(),
            "intercept": self.intercept,
            "grad_norm": self.grad_norm,
            "iterations": self.iterations,
        }


def _logistic_objective(X1, labels, theta, l2_lambda):
    z = X1 @ theta
    penalty = 0.5 * l2_lambda * float(theta[:-1] @ theta[:-1])
    return float(np.mean(-log_expit(z) + (1 - labels) * z)) + penalty


def fit_logistic(
    features: np.ndarray,
    labels: Sequence[int],
    l2_lambda: float = 1e-4,
    tol: float = 1e-8,
    max_iter: int = 100,
    feature_map: str = "raw",
) -> LogisticModel:
    """Fit an L2-regularised logistic regression by damped Newton steps.

    The objective is the mean negative log-likelihood plus
    ``l2_lambda / 2 * ||w||^2``; the intercept is not penalised.

    Args:
        features (np.ndarray): Design matrix of shape (m, d).
        labels (sequence): Binary labels of length m.
        l2_lambda (float): Ridge penalty on the weights.
        tol (float): Stop once the gradient norm is at most ``tol``.
        max_iter (int): Maximum number of Newton iterations.
        feature_map (str): Name of the feature construction, kept on the model.

    Returns:
        LogisticModel: The fitted model.

    Raises:
        LogisticConvergenceError: The gradient norm is above ``tol`` after
            ``max_iter`` iterations.
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.asarray(labels, dtype=float)
    if X.shape[0] < 1 or X.shape[0] != len(labels):
        msg = f"Got {X.shape[0]} feature rows and {len(labels)} labels"
        log.error(msg)
        raise ValueError(msg)
    if l2_lambda < 0:
        msg = f"The L2 penalty must be nonnegative, got {l2_lambda}"
        log.error(msg)
        raise ValueError(msg)

    m, d = X.shape
    X1 = np.hstack([X, np.ones((m, 1))])
    ridge = np.full(d + 1, l2_lambda)
    ridge[-1] = 0.0
    theta = np.zeros(d + 1)

    objective = _logistic_objective(X1, labels, theta, l2_lambda)
    grad_norm = math.inf
    for iteration in range(max_iter + 1):
        p = expit(X1 @ theta)
        grad = X1.T @ (p - labels) / m + ridge * theta
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= tol:
            log.debug(f"Logistic fit converged in {iteration} iterations")
            return LogisticModel(
                weights=theta[:-1].copy(),
                intercept=float(theta[-1]),
                feature_map=feature_map,
                grad_norm=grad_norm,
                iterations=iteration,
            )
        if iteration == max_iter:
            break

        hessian = (X1.T * (p * (1 - p))) @ X1 / m + np.diag(ridge)
        direction = -np.linalg.lstsq(hessian, grad, rcond=None)[0]
        slope = float(grad @ direction)
        if slope >= 0:
            # Singular curvature, fall back to steepest descent
            direction, slope = -grad, -grad_norm**2

        # Armijo backtracking
        step_size = 1.0
        accepted = False
        while step_size > 1e-12:
            candidate = theta + step_size * direction
            value = _logistic_objective(X1, labels, candidate, l2_lambda)
            slack = 1e-15 * max(1.0, abs(objective))
            if value <= objective + 1e-4 * step_size * slope + slack:
                accepted = True
                break
            step_size *= 0.5
        if not accepted:
            log.warning(f"Line search stalled at iteration {iteration}")
            break
        theta, objective = candidate, value

    msg = (
        f"Logistic fit did not converge in {iteration} iterations "
        f"(gradient norm {grad_norm:.3e} > {tol:.1e})"
    )
    log.error(msg)
    raise LogisticConvergenceError(msg, grad_norm=grad_norm, iterations=iteration)


@dataclass(frozen=True, eq=False)
class KnnSmoother:
    """Locally weighted k-nearest-neighbour probability estimate.

    Each query fits a linear function to its ``k`` nearest training points
    with tricube weights on the distance relative to the farthest of them,
    and predicts the intercept. With no more neighbours than free
    coefficients the fit is the weighted label mean instead.
    """

    tree: cKDTree
    labels: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    k: int

    @property
    def local_linear(self) -> bool:
        """Whether ``k`` leaves room for a slope per feature."""
        return self.k > self.tree.m + 1

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        """Estimated P(Y=1) at every row of ``features``, inside [0, 1].

        Exact matches take all the weight. When ``k`` covers the whole
        training set the estimate is the plain label mean.
        """
        features = np.atleast_2d(np.asarray(features, dtype=float))
        n_train = len(self.labels)
        if self.k >= n_train:
            return np.full(len(features), float(self.labels.mean()))

        query = (features - self.center) / self.scale
        dist, idx = self.tree.query(query, k=self.k)
        if self.k == 1:
            dist, idx = dist[:, None], idx[:, None]
        out = np.empty(len(query))
        for start in range(0, len(query), QUERY_CHUNK):
            rows = slice(start, start + QUERY_CHUNK)
            out[rows] = self._local_fit(query[rows], dist[rows], idx[rows])

        exact = dist <= 1e-12
        has_exact = exact.any(axis=1)
        if has_exact.any():
            hits = exact[has_exact]
            matched = (hits * self.labels[idx[has_exact]]).sum(axis=1)
            out[has_exact] = matched / hits.sum(axis=1)
        return np.clip(out, 0.0, 1.0)

    def _local_fit(
        self, query: np.ndarray, dist: np.ndarray, idx: np.ndarray
    ) -> np.ndarray:
        bandwidth = np.maximum(dist[:, -1:] * (1.0 + 1e-3), 1e-12)
        weights = np.clip(1.0 - (dist / bandwidth) ** 3, 0.0, None) ** 3
        targets = self.labels[idx]
        if not self.local_linear:
            return (weights * targets).sum(axis=1) / weights.sum(axis=1)

        offsets = self.tree.data[idx] - query[:, None, :]
        design = np.concatenate([np.ones(idx.shape + (1,)), offsets], axis=-1)
        weighted = design.transpose(0, 2, 1) * weights[:, None, :]
        gram = weighted @ design
        # Ridge on the slopes keeps collinear neighbourhoods solvable
        ridge = np.ones(design.shape[-1])
        ridge[0] = 0.0
        gram += 1e-6 * weights.sum(axis=1)[:, None, None] * np.diag(ridge)
        rhs = weighted @ targets[..., None]
        return np.linalg.solve(gram, rhs)[:, 0, 0]

    def to_dict(self) -> dict:
        """JSON summary, training points are not stored."""
        return {
            "kind": "knn",
            "k": self.k,
            "local_linear": self.local_linear,
            "n_train": int(len(self.labels)),
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
        }


def flexible_outcome_fit(
    features: np.ndarray, labels: Sequence[int], k_neighbors: Optional[int] = None
) -> KnnSmoother:
    """Fit the k-nearest-neighbour smoother on standardised features.

    Args:
        features (np.ndarray): Training features (m, d).
        labels (sequence): Binary labels.
        k_neighbors (int): Neighbourhood size, defaults to
            ``ceil(m ** KNN_EXPONENT)``.

    Returns:
        KnnSmoother: The smoother.
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.asarray(labels, dtype=float)
    if k_neighbors is None:
        k_neighbors = math.ceil(len(labels) ** KNN_EXPONENT)
    if k_neighbors < 1:
        msg = f"Need at least one neighbour, got k={k_neighbors}"
        log.error(msg)
        raise ValueError(msg)
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    return KnnSmoother(
        tree=cKDTree((X - center) / scale),
        labels=labels,
        center=center,
        scale=scale,
        k=int(k_neighbors),
    )


class PropensityModel(Protocol):
    """Estimates e(1 | x)."""

    def prob_one(self, x: np.ndarray) -> np.ndarray:
        """P(A=1 | x)."""


class OutcomeModel(Protocol):
    """Estimates mu(1 | a, x)."""

    def prob_one(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        """P(Y=1 | a, x)."""


def outcome_features(x: np.ndarray, a: np.ndarray, prices: np.ndarray) -> np.ndarray:
    """Outcome design: the context with the offered price appended."""
    x = np.asarray(x, dtype=float)
    price = np.broadcast_to(prices[np.asarray(a, dtype=np.int64)], x.shape[:-1])
    return np.concatenate([x, price[..., None]], axis=-1)


@dataclass(frozen=True, eq=False)
class LogisticPropensity:
    """Propensity from a logistic model on the raw context."""

    model: LogisticModel

    def prob_one(self, x: np.ndarray) -> np.ndarray:
        """P(A=1 | x)."""
        return self.model.predict_proba(x)

    def to_dict(self) -> dict:
        """JSON representation."""
        return self.model.to_dict()


@dataclass(frozen=True, eq=False)
class LogisticOutcome:
    """Outcome model from a logistic fit on (x, p(a))."""

    model: LogisticModel
    prices: np.ndarray

    def prob_one(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        """P(Y=1 | a, x)."""
        return self.model.predict_proba(outcome_features(x, a, self.prices))

    def to_dict(self) -> dict:
        """JSON representation."""
        return self.model.to_dict()


@dataclass(frozen=True, eq=False)
class KnnOutcome:
    """Flexible outcome model: one smoother per action, on the context."""

    smoothers: tuple

    def prob_one(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        """P(Y=1 | a, x)."""
        x = np.asarray(x, dtype=float)
        a = np.broadcast_to(np.asarray(a, dtype=np.int64), x.shape[:-1])
        flat_x, flat_a = x.reshape(-1, x.shape[-1]), a.reshape(-1)
        out = np.empty(len(flat_a))
        for action, smoother in enumerate(self.smoothers):
            rows = flat_a == action
            if rows.any():
                out[rows] = smoother.predict_proba(flat_x[rows])
        return out.reshape(a.shape)

    def to_dict(self) -> dict:
        """JSON representation."""
        return {
            "kind": "knn-per-action",
            "smoothers": [s.to_dict() for s in self.smoothers],
        }


@dataclass(frozen=True, eq=False)
class FunctionPropensity:
    """Propensity given by a known function, e.g. the true logging policy."""

    fn: Callable[[np.ndarray], np.ndarray]

    def prob_one(self, x: np.ndarray) -> np.ndarray:
        """P(A=1 | x)."""
        return np.asarray(self.fn(x), dtype=float)

    def to_dict(self) -> dict:
        """JSON representation."""
        return {"kind": "function", "name": getattr(self.fn, "__name__", "fn")}


@dataclass(frozen=True, eq=False)
class FunctionOutcome:
    """Outcome model given by a known function of (x, a)."""

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def prob_one(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        """P(Y=1 | a, x)."""
        return np.broadcast_to(
            np.asarray(self.fn(x, a), dtype=float), np.shape(x)[:-1]
        ).copy()

    def to_dict(self) -> dict:
        """JSON representation."""
        return {"kind": "function", "name": getattr(self.fn, "__name__", "fn")}


@dataclass(frozen=True, eq=False)
class NuisancePredictions:
    """Cross-fitted predictions for every observation of a dataset.

    ``e_obs`` is the clipped propensity of the logged action, ``mu`` holds
    mu(1 | a, x) for a = 0, 1 in its last axis.
    """

    e_obs: np.ndarray
    mu: np.ndarray
    clip_rate: float


@dataclass(frozen=True, eq=False)
class NuisanceSet:
    """Cross-fitted nuisances keyed by ``(trajectory fold, parity)``."""

    folds: FoldAssignment
    propensity: dict
    outcome: dict
    prices: np.ndarray
    clip_eps: float = 0.01
    flexible: bool = False

    def _clip(self, e1: np.ndarray) -> np.ndarray:
        return np.clip(e1, self.clip_eps, 1.0 - self.clip_eps)

    def predict_propensity(self, i: int, t: int, x: np.ndarray, a: int) -> float:
        """Clipped e(a | x) from the model matched to observation (i, t)."""
        model = self.propensity[self.folds.key(i, t)]
        e1 = float(self._clip(model.prob_one(np.atleast_2d(x)))[0])
        return e1 if a == 1 else 1.0 - e1

    def predict_outcome(self, i: int, t: int, x: np.ndarray, a: int, y: int) -> float:
        """mu(y | a, x) from the model matched to observation (i, t)."""
        model = self.outcome[self.folds.key(i, t)]
        mu1 = float(model.prob_one(np.atleast_2d(x), np.array([a]))[0])
        return mu1 if y == 1 else 1.0 - mu1

    def predict_arrays(self, data: TrajectoryBatch) -> NuisancePredictions:
        """Vectorised cross-fitted predictions over the whole dataset."""
        if data.n != self.folds.n or data.horizon != self.folds.horizon:
            msg = (
                f"Folds were built for {self.folds.n} x {self.folds.horizon} "
                f"observations, got {data.n} x {data.horizon}"
            )
            log.error(msg)
            raise ValueError(msg)

        e1 = np.empty((data.n, data.horizon))
        mu = np.empty((data.n, data.horizon, 2))
        for key in self.folds.keys():
            rows = self.folds.evaluation_mask(key)
            if not rows.any():
                continue
            x = data.x[rows]
            e1[rows] = self.propensity[key].prob_one(x)
            for action in (0, 1):
                actions = np.full(len(x), action)
                mu[rows, action] = self.outcome[key].prob_one(x, actions)

        clipped = (e1 < self.clip_eps) | (e1 > 1.0 - self.clip_eps)
        clip_rate = float(clipped.mean())
        if clip_rate > 0.05:
            log.warning(
                f"Propensity clipped at {self.clip_eps} for {clip_rate:.1%} of rows"
            )
        else:
            log.debug(f"Propensity clip rate {clip_rate:.2%}")
        e1 = self._clip(e1)
        e_obs = np.where(data.a == 1, e1, 1.0 - e1)
        return NuisancePredictions(e_obs=e_obs, mu=mu, clip_rate=clip_rate)

    def outcome_mean(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        """mu(1 | a, x) averaged over all fold models, for out-of-sample use."""
        predictions = [model.prob_one(x, a) for model in self.outcome.values()]
        return np.mean(predictions, axis=0)

    def to_dict(self) -> dict:
        """JSON representation (coefficients, fold map, clipping)."""
        return {
            "clip_eps": self.clip_eps,
            "flexible": self.flexible,
            "prices": self.prices.tolist(),
            "folds": self.folds.to_dict(),
            "propensity": _models_dict(self.propensity),
            "outcome": _models_dict(self.outcome),
        }


def _models_dict(models: dict) -> dict:
    return {f"{k}-{p}": model.to_dict() for (k, p), model in models.items()}


def _observation_mask(data: TrajectoryBatch, drop_stockout: bool) -> np.ndarray:
    if drop_stockout:
        return data.s > 0
    return np.ones((data.n, data.horizon), dtype=bool)


def fit_nuisances(
    data: TrajectoryBatch,
    folds: FoldAssignment,
    cfg: PricingConfig,
    outcome_mode: str = "logistic",
    clip_eps: float = 0.01,
    l2_lambda: float = 1e-4,
    k_neighbors: Optional[int] = None,
    drop_stockout: bool = False,
) -> NuisanceSet:
    """Fit propensity and outcome models for every fold key.

    Args:
        data (TrajectoryBatch): Logged trajectories.
        folds (FoldAssignment): Fold map built for ``data``.
        cfg (PricingConfig): Environment, provides the prices.
        outcome_mode (str): ``logistic`` or ``flexible`` (k-NN per action).
        clip_eps (float): Propensity clipping level.
        l2_lambda (float): Ridge penalty of the logistic fits.
        k_neighbors (int): Neighbourhood size of the flexible model,
            defaults to ``ceil(m ** KNN_EXPONENT)`` for m training rows per
            action.
        drop_stockout (bool): Exclude observations taken at zero inventory.

    Returns:
        NuisanceSet: The fitted nuisances.
    """
    if outcome_mode not in OUTCOME_MODES:
        msg = f"Unknown outcome mode {outcome_mode}, expected one of {OUTCOME_MODES}"
        log.error(msg)
        raise ValueError(msg)
    if data.n == 0:
        msg = "Cannot fit nuisances on an empty dataset."
        log.error(msg)
        raise ValueError(msg)

    prices = cfg.price_array
    observed = _observation_mask(data, drop_stockout)
    propensity, outcome = {}, {}
    for key in folds.keys():
        rows = folds.training_mask(key) & observed
        n_rows = int(rows.sum())
        if n_rows < MIN_FOLD_ROWS:
            msg = f"Fold {key} has only {n_rows} training observations"
            log.error(msg)
            raise ValueError(msg)
        x, a, y = data.x[rows], data.a[rows], data.y[rows]
        log.debug(f"Fitting nuisances for fold {key} on {n_rows} observations")

        propensity[key] = LogisticPropensity(
            fit_logistic(x, a, l2_lambda=l2_lambda, feature_map="raw")
        )
        if outcome_mode == "logistic":
            outcome[key] = LogisticOutcome(
                fit_logistic(
                    outcome_features(x, a, prices),
                    y,
                    l2_lambda=l2_lambda,
                    feature_map="x-price",
                ),
                prices,
            )
        else:
            smoothers = []
            for action in (0, 1):
                chosen = a == action
                if chosen.sum() < 1:
                    msg = f"Fold {key} has no observations of action {action}"
                    log.error(msg)
                    raise ValueError(msg)
                smoothers.append(
                    flexible_outcome_fit(x[chosen], y[chosen], k_neighbors)
                )
            outcome[key] = KnnOutcome(tuple(smoothers))

    return NuisanceSet(
        folds=folds,
        propensity=propensity,
        outcome=outcome,
        prices=prices,
        clip_eps=clip_eps,
        flexible=outcome_mode == "flexible",
    )


def fixed_nuisances(
    folds: FoldAssignment,
    cfg: PricingConfig,
    propensity: Callable[[np.ndarray], np.ndarray],
    outcome: Callable[[np.ndarray, np.ndarray], np.ndarray],
    clip_eps: float = 0.01,
) -> NuisanceSet:
    """Nuisances given by known functions for every fold key.

    Used to plug in the true models, or deliberately corrupted ones.
    """
    return NuisanceSet(
        folds=folds,
        propensity={key: FunctionPropensity(propensity) for key in folds.keys()},
        outcome={key: FunctionOutcome(outcome) for key in folds.keys()},
        prices=cfg.price_array,
        clip_eps=clip_eps,
    )
