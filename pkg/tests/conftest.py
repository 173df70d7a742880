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
"""Configuration and fixtures for PyTest."""

import logging
import sys

import pytest

from stateful_ope.env import (
    BehaviorPolicy,
    ContextSpec,
    PricingConfig,
    canonical_config,
    simulate,
)
from stateful_ope.nuisance import assign_folds, fit_nuisances

logging.basicConfig(
    level="DEBUG",
    format=(
        "%(asctime)s.%(msecs)03d [%(levelname)s] "
        "%(name)s | %(funcName)s:%(lineno)d | %(message)s"
    ),
    datefmt="%y-%m-%d %H:%M:%S",
    stream=sys.stdout,
)

log = logging.getLogger(__name__)

FINITE_SUPPORT = ((-2.0, 2.0), (2.0, -2.0), (0.0, 0.0), (-1.0, 1.0))


@pytest.fixture(scope="session")
def canonical():
    """Two-dimensional Gaussian pricing environment, T=10 and s0=4."""
    return canonical_config()


@pytest.fixture(scope="session")
def finite_cfg():
    """Short-horizon environment with four equally likely contexts."""
    return PricingConfig(
        horizon_T=4,
        initial_capacity_s0=2,
        context_spec=ContextSpec.finite(FINITE_SUPPORT, (0.25,) * 4),
    )


@pytest.fixture(scope="session")
def single_point_cfg():
    """One-step environment whose only context sells at the high price w.p. 1/2."""
    return PricingConfig(
        horizon_T=1,
        initial_capacity_s0=1,
        context_spec=ContextSpec.finite([(-4 / 3, 4 / 3)], [1.0]),
    )


@pytest.fixture(scope="session")
def canonical_data(canonical):
    """5000 logged trajectories from the canonical environment."""
    return simulate(canonical, BehaviorPolicy(canonical), 5000, seed=11)


@pytest.fixture(scope="session")
def canonical_folds(canonical_data):
    """Two trajectory folds for the canonical dataset."""
    return assign_folds(canonical_data.n, canonical_data.horizon, seed=11)


@pytest.fixture(scope="session")
def canonical_nuisances(canonical, canonical_data, canonical_folds):
    """Cross-fitted logistic nuisances of the canonical dataset."""
    return fit_nuisances(canonical_data, canonical_folds, canonical)


@pytest.fixture(scope="session")
def finite_data(finite_cfg):
    """2000 logged trajectories from the finite-context environment."""
    return simulate(finite_cfg, BehaviorPolicy(finite_cfg), 2000, seed=5)
