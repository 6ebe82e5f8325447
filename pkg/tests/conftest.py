import numpy as np
import pytest

from ndcert import AnalyticDenoiser, GaussianMixtureSpec, build_geometric_schedule


@pytest.fixture(scope="session")
def gm2():
    """2-class 2-D testbed with means 6s apart (s = 1)."""
    return GaussianMixtureSpec(means=[[-3.0, 0.0], [3.0, 0.0]], class_std=1.0)


@pytest.fixture(scope="session")
def gm_identical():
    """Two indistinguishable classes; class-conditional denoisers coincide."""
    return GaussianMixtureSpec(means=[[1.0, -1.0], [1.0, -1.0]], class_std=1.0)


@pytest.fixture(scope="session")
def oracle(gm2):
    return AnalyticDenoiser(gm2)


@pytest.fixture(scope="session")
def smoothing_schedule():
    """Grid starting exactly at the smoothing level 0.25 (tau_index = 0)."""
    return build_geometric_schedule(0.25, 80.0, 128)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
