import numpy as np
import pytest

from mftcnn.controller import MlpParams
from mftcnn.lq import LqParams, lq_problem


@pytest.fixture(scope="session")
def lq():
    p = LqParams()
    return p, lq_problem(p, divergence_threshold=1e6), p.grid


def linear_controller(k_dev=0.5, k_mean=0.9):
    """Exact linear feedback written as a one-layer network:
    u = -k_dev (x - m) - k_mean m, E[u] = -k_mean m."""
    W = np.array([[-k_dev, k_dev - k_mean, 0.0], [0.0, -k_mean, 0.0]])
    return MlpParams.initialize([3, 2], ["lin"], seed=0).with_flat(np.concatenate([W.ravel(), [0.0, 0.0]]))


def zero_controller():
    return MlpParams.initialize([3, 2], ["lin"], seed=0).with_flat(np.zeros(8))
