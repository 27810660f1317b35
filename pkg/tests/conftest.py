"""Shared fixtures: the baseline grid instance and a few small plants."""

import numpy as np
import pytest

from dlmpc import (AdmmConfig, QuadraticCost, SystemModel, box_constraints,
                   d_sets_from_model, generate_power_grid, locality_masks)

BASELINE = dict(rows=4, cols=4, p_connect=0.4, dt=0.2, seed=7)
BASELINE_T = 5
BASELINE_D = 3


@pytest.fixture(scope="session")
def grid16():
    return generate_power_grid(**BASELINE)


@pytest.fixture(scope="session")
def grid16_sets(grid16):
    return d_sets_from_model(grid16, BASELINE_D)


@pytest.fixture(scope="session")
def grid16_masks(grid16, grid16_sets):
    return locality_masks(grid16, grid16_sets, BASELINE_T)


@pytest.fixture(scope="session")
def grid16_x0(grid16):
    rng = np.random.default_rng(3)
    return rng.uniform(-0.4, 0.4, grid16.n)


@pytest.fixture(scope="session")
def baseline_spec(grid16):
    return box_constraints(grid16, BASELINE_T, x_max=1.2, u_max=3.0)


@pytest.fixture
def cost():
    return QuadraticCost()


@pytest.fixture
def tight_config():
    return AdmmConfig(rho=1.0, eps_p=1e-5, eps_d=1e-5, max_iter=5000)


def chain_model(n_sub=3, coupled=True):
    """Directed chain of scalar subsystems: x_{i+1} feels x_i."""
    A = np.eye(n_sub) * 0.5
    if coupled:
        for i in range(n_sub - 1):
            A[i + 1, i] = 0.4
    B = np.eye(n_sub)
    return SystemModel(state_dims=(1,) * n_sub, input_dims=(1,) * n_sub, A=A, B=B)


def two_node_model():
    """Two 2-state subsystems with one-directional coupling, full actuation."""
    A = np.array([
        [0.9, 0.2, 0.0, 0.0],
        [0.0, 0.8, 0.0, 0.0],
        [0.3, 0.0, 0.7, 0.1],
        [0.0, 0.0, 0.0, 0.9],
    ])
    B = np.array([
        [1.0, 0.0],
        [0.5, 0.0],
        [0.0, 1.0],
        [0.0, 0.3],
    ])
    return SystemModel(state_dims=(2, 2), input_dims=(1, 1), A=A, B=B)
