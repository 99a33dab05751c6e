import os

import numpy as np
import pytest

os.environ.setdefault("RANKSHIELD_LOG_DIR", os.path.join(os.path.dirname(__file__), "..", "logs"))

from src.components.data_ingestion import SynthSpec, synth_gaussians  # noqa: E402
from src.components.network import Activation, DenseNet, QuadraticScoreModel, linear_score_model  # noqa: E402


@pytest.fixture
def quadratic_model():
    """s(x) = x1^2 + 0.5 x1 + 0.5 x2^2 + 0.1 x2 on the raw-score head: H = diag(2, 1)."""
    return QuadraticScoreModel(np.diag([2.0, 1.0]), [0.5, 0.1], head="logit")


@pytest.fixture
def quadratic_point():
    return np.array([1.0, 1.0])


@pytest.fixture
def linear_model():
    return linear_score_model([3.0, 1.0, 2.0], head="logit")


def random_softplus_net(seed: int, n: int = 6, hidden=(8,), n_classes: int = 2, rho: float = 2.0) -> DenseNet:
    return DenseNet.initialize([n, *hidden, n_classes], Activation("softplus", rho), seed=seed)


@pytest.fixture
def softplus_net():
    return random_softplus_net(0)


@pytest.fixture
def synthetic_data():
    return synth_gaussians(SynthSpec(n_features=6, n_samples=200, class_separation=4.0, noise_cov=1.0, seed=3))
