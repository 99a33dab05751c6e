import numpy as np
import pytest

from src.components.explainer import ranking, simple_gradient
from src.components.thickness import (
    PerturbDistribution,
    model_thickness,
    pairwise_thickness,
    thickness_bounds,
    thickness_scan,
    topk_thickness,
)
from src.config.configuration import AttackConfig
from src.exceptions import UsageError
from src.utils.common import derive_seeds
from tests.conftest import random_softplus_net

BALL = PerturbDistribution.uniform_ball(0.1)


def test_relaxed_thickness_of_linear_gap(quadratic_model, quadratic_point):
    estimate = pairwise_thickness(quadratic_model, quadratic_point, BALL, 0, 1, m1=2000, m2=8, variant="relaxed", seed=1)
    assert abs(estimate.value - 1.4) <= 3 * estimate.std_error
    assert estimate.std_error > 0


def test_indicator_thickness_of_linear_gap(quadratic_model, quadratic_point):
    estimate = pairwise_thickness(quadratic_model, quadratic_point, BALL, 0, 1, m1=200, m2=8)
    assert estimate.value == 1.0


def test_linear_model_never_flips(linear_model):
    assert pairwise_thickness(linear_model, np.ones(3), PerturbDistribution.uniform_ball(5.0), 0, 2).value == 1.0
    assert topk_thickness(linear_model, np.ones(3), BALL, 1).value == 1.0


def test_single_pair_topk_equals_pairwise(quadratic_model, quadratic_point):
    top = topk_thickness(quadratic_model, quadratic_point, BALL, 1, variant="relaxed", seed=5)
    pair = pairwise_thickness(quadratic_model, quadratic_point, BALL, 0, 1, variant="relaxed", seed=5)
    assert top.value == pair.value


@pytest.mark.parametrize("variant", ["indicator", "relaxed"])
def test_topk_is_mean_of_pairwise(softplus_net, variant):
    x = np.linspace(-1, 1, 6)
    c = int(softplus_net.predict(x))
    pairs = ranking(simple_gradient(softplus_net, x), 2).cross_pairs()
    dist = PerturbDistribution.uniform_ball(0.5)
    top = topk_thickness(softplus_net, x, dist, 2, m1=16, m2=4, variant=variant, seed=11)
    per_pair = [pairwise_thickness(softplus_net, x, dist, i, j, 16, 4, variant, seed=11, c=c).value for i, j in pairs]
    assert top.value == pytest.approx(np.mean(per_pair), abs=1e-10)


def test_estimates_are_seed_deterministic(softplus_net):
    x = np.zeros(6)
    a = topk_thickness(softplus_net, x, BALL, 3, seed=9)
    b = topk_thickness(softplus_net, x, BALL, 3, seed=9)
    assert a.value == b.value
    np.testing.assert_array_equal(a.per_endpoint, b.per_endpoint)


def test_indicator_is_non_increasing_in_radius(quadratic_model, quadratic_point):
    values = [
        pairwise_thickness(quadratic_model, quadratic_point, PerturbDistribution.uniform_ball(eps), 0, 1, m1=256, seed=2).value
        for eps in (0.1, 1.0, 3.0)
    ]
    assert values[0] == 1.0
    assert values[0] >= values[1] >= values[2]
    assert values[2] < 1.0
    assert all(0.0 <= v <= 1.0 for v in values)


def test_gaussian_endpoints(quadratic_model, quadratic_point):
    estimate = pairwise_thickness(quadratic_model, quadratic_point, PerturbDistribution.gaussian(0.01), 0, 1, m1=64)
    assert 0.0 <= estimate.value <= 1.0


def test_adversarial_endpoints(quadratic_model, quadratic_point):
    attack = AttackConfig(step_size=1e-2, max_iters=5, k=1)
    dist = PerturbDistribution.adversarial(attack, epsilon=0.05)
    estimate = topk_thickness(quadratic_model, quadratic_point, dist, 1, m1=4, m2=4, variant="relaxed", seed=0)
    # every endpoint moved along the descent direction of the gap
    assert estimate.value < 1.4


def test_rejects_bad_arguments(quadratic_model, quadratic_point):
    with pytest.raises(UsageError):
        pairwise_thickness(quadratic_model, quadratic_point, BALL, 0, 0)
    with pytest.raises(UsageError):
        topk_thickness(quadratic_model, quadratic_point, BALL, 2)
    with pytest.raises(UsageError):
        pairwise_thickness(quadratic_model, quadratic_point, BALL, 0, 1, m1=0)
    with pytest.raises(UsageError):
        PerturbDistribution.gaussian(0.0)


def test_bounds_on_quadratic(quadratic_model, quadratic_point):
    bounds = thickness_bounds(quadratic_model, quadratic_point, 0, 1, 0.1)
    assert bounds.lower == pytest.approx(1.4 - 0.05 * np.sqrt(5.0), abs=1e-6)
    assert bounds.lipschitz_i == pytest.approx(2.0, abs=1e-6)
    assert bounds.lipschitz_j == pytest.approx(1.0, abs=1e-6)
    assert bounds.upper == pytest.approx(1.7, abs=1e-6)


def test_bounds_collapse_on_linear_model(linear_model):
    bounds = thickness_bounds(linear_model, np.ones(3), 0, 1, 0.2)
    assert bounds.lower == pytest.approx(2.0, abs=1e-6)
    assert bounds.upper == pytest.approx(2.0, abs=1e-6)


@pytest.mark.slow
def test_bounds_sandwich_relaxed_estimate():
    passed = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 9))
        net = random_softplus_net(seed, n=n, hidden=(8,))
        x = rng.standard_normal(n)
        eps = float(rng.uniform(0.02, 0.2))
        i, j = 0, 1
        bounds = thickness_bounds(net, x, i, j, eps, seed=seed)
        estimate = pairwise_thickness(net, x, PerturbDistribution.uniform_ball(eps), i, j, 64, 8, "relaxed", seed)
        slack = 3 * estimate.std_error
        if bounds.lower - slack <= estimate.value <= bounds.upper + slack:
            passed += 1
    assert passed >= 97


def test_model_thickness_of_one_sample(softplus_net):
    x = np.linspace(-1, 1, 6)
    level = model_thickness(softplus_net, x[None, :], 2, BALL, m1=8, m2=4, seed=3)
    single = topk_thickness(softplus_net, x, BALL, 2, m1=8, m2=4, seed=derive_seeds(3, 1)[0])
    assert level == single.value


def test_model_thickness_of_linear_model(linear_model):
    points = np.random.default_rng(0).uniform(0.5, 1.5, size=(5, 3))
    assert model_thickness(linear_model, points, 1, BALL, m1=8, m2=4) == 1.0


def test_scan_is_order_stable_across_jobs(softplus_net):
    points = np.random.default_rng(1).standard_normal((6, 6))
    serial = thickness_scan(softplus_net, points, 2, BALL, m1=8, m2=2, seed=4, jobs=1)
    threaded = thickness_scan(softplus_net, points, 2, BALL, m1=8, m2=2, seed=4, jobs=3)
    assert [e.value for e in serial] == [e.value for e in threaded]
