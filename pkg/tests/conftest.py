"""Shared fixtures: a tiny scenario, its normalized geometry and random instances."""

from pathlib import Path

import numpy as np
import pytest

from risbeam.channel import gen_geometry, normalize_problem
from risbeam.config import ExperimentConfig, ExperimentSection, StopConfig, TrainingConfig
from risbeam.selftest import random_sample, random_state, tiny_system


REPO_ROOT = Path(__file__).resolve().parent.parent
CONFIG_DIR = REPO_ROOT / "config"


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def tiny_config():
    """N=4, K=N_RF=2, one 2x2 RIS, L_BU=2, P_max=1 W."""
    return tiny_system()


@pytest.fixture
def tiny_problem(tiny_config):
    """(normalized config, normalized geometry, noise scale) of a seeded tiny geometry."""
    geo = gen_geometry(tiny_config, np.random.default_rng(7))
    return normalize_problem(tiny_config, geo)


@pytest.fixture
def sample_and_state(rng):
    """Unstructured Gaussian instance with N=4, K=N_RF=2, U*M+1=5."""
    return random_sample(rng, 4, 2, 5), random_state(rng, 4, 2, 2, 5)


@pytest.fixture
def config_path():
    return CONFIG_DIR / "config.yaml"


@pytest.fixture
def tiny_experiment(tiny_config):
    """Short runs on the tiny scenario: two geometries, two blockage values."""
    return ExperimentConfig(
        system=tiny_config,
        training=TrainingConfig(n_samples=16),
        stop=StopConfig(t_max=40, window=20, tol=0.0, log_every=10),
        experiment=ExperimentSection(seed=3, n_geo=2, n_trials=200, p_grid=[0.2, 0.8]),
    )
