import numpy as np
import pytest

from dpsfk.priors import GaussianMixturePrior
from dpsfk.rewards import RewardSpec
from dpsfk.schedules import DdpmSchedule, build_time_grid


@pytest.fixture
def gmm1d():
    return GaussianMixturePrior(np.array([0.5, 0.5]), np.array([[-1.5], [1.5]]), np.array([[[0.3]], [[0.3]]]))


@pytest.fixture
def reward1d():
    return RewardSpec.quadratic(np.array([[1.0]]), np.array([0.5]), 0.5)


@pytest.fixture
def gmm2d():
    rng = np.random.default_rng(11)
    k = 3
    means = rng.normal(0, 2, (k, 2))
    covs = []
    for _ in range(k):
        a = rng.normal(0, 0.6, (2, 2))
        covs.append(a @ a.T + 0.2 * np.eye(2))
    w = rng.uniform(0.5, 1.5, k)
    return GaussianMixturePrior(w / w.sum(), means, np.array(covs))


@pytest.fixture
def reward2d():
    return RewardSpec.quadratic(np.array([[1.0, 0.5], [0.0, 1.0]]), np.array([0.3, -1.0]), 0.7)


@pytest.fixture(scope="session")
def ddpm_grid():
    return build_time_grid(DdpmSchedule())
