import numpy as np
import pytest

from src.components.data_ingestion import SynthSpec, normalize, synth_gaussians
from src.components.explainer import ranking
from src.components.network import DenseNet, ParamGradient
from src.config.configuration import TrainConfig
from src.exceptions import CapabilityError, TrainingDivergenceError, UsageError
import src.services.trainer as trainer_module
from src.services.trainer import (
    Adam,
    at_inner_attack,
    baseline_regularizer,
    r2et_regularizer,
    select_pairs,
    topk_gap_sums,
    train,
)
from tests.conftest import random_softplus_net


def separable_points(seed: int = 0, count: int = 80, n: int = 4):
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 2
    centers = np.where(labels[:, None] == 1, 2.0, -2.0) * np.ones(n)
    return centers + 0.5 * rng.standard_normal((count, n)), labels


TINY = dict(hidden=(6,), epochs=5, batch_size=16, lr=0.05, k=2)


def test_full_pairs():
    assert select_pairs([0, 1, 2, 3], 2) == [(0, 2), (0, 3), (1, 2), (1, 3)]


def test_anchor_pairs():
    assert select_pairs(list(range(6)), 3, "anchor", k_prime=2) == [(1, 3), (0, 4)]


def test_anchor_pairs_are_clamped():
    assert select_pairs(list(range(4)), 3, "anchor", k_prime=3) == [(1, 3)]
    with pytest.raises(UsageError):
        select_pairs(list(range(4)), 1, "anchor")


def test_minimal_gap_pairs_use_each_feature_once():
    scores = np.array([5.0, 4.0, 3.9, 1.0])
    chosen = select_pairs(ranking(scores, 2), 2, "minimal_gap", k_prime=2, scores=scores)
    assert chosen == [(1, 2), (0, 3)]


def test_minimal_gap_from_explicit_gaps():
    gaps = {(0, 2): 0.5, (0, 3): 0.2, (1, 2): 0.1, (1, 3): 0.9}
    assert select_pairs([0, 1, 2, 3], 2, "minimal_gap", k_prime=2, gaps=gaps) == [(1, 2), (0, 3)]


def test_unknown_scheme():
    with pytest.raises(UsageError):
        select_pairs([0, 1, 2], 1, "random")


def test_topk_gap_sums():
    scores = np.array([[4.0, 3.0, 1.0, 0.5]])
    # (4-1) + (4-0.5) + (3-1) + (3-0.5)
    np.testing.assert_allclose(topk_gap_sums(scores, 2), [11.0])


def test_zero_lambdas_give_zero_regularizer(softplus_net):
    x = np.random.default_rng(0).standard_normal((4, 6))
    value, grad = r2et_regularizer(softplus_net, x, 2, 0.0, 0.0)
    assert value == 0.0
    assert grad.norm() == 0.0


def test_gap_term_value(softplus_net):
    x = np.random.default_rng(1).standard_normal((3, 6))
    classes = softplus_net.predict(x)
    expected = -0.5 * np.mean(topk_gap_sums(softplus_net.input_gradient(x, classes), 2))
    value, _ = r2et_regularizer(softplus_net, x, 2, 0.5, 0.0)
    assert value == pytest.approx(expected)


def test_gap_term_gradient_matches_finite_differences(softplus_net):
    x = np.random.default_rng(2).standard_normal((3, 6))
    _, grad = r2et_regularizer(softplus_net, x, 2, 1.0, 0.0)
    params = softplus_net.parameters()
    step = 1e-5
    bump = [np.zeros_like(w) for w in params.weights]
    bump[1][0, 3] = step
    zeros = [np.zeros_like(b) for b in params.biases]
    plus = softplus_net.with_parameters(params + ParamGradient(bump, zeros))
    minus = softplus_net.with_parameters(params - ParamGradient(bump, zeros))
    numeric = (r2et_regularizer(plus, x, 2, 1.0, 0.0)[0] - r2et_regularizer(minus, x, 2, 1.0, 0.0)[0]) / (2 * step)
    assert grad.weights[1][0, 3] == pytest.approx(numeric, rel=1e-3, abs=1e-6)


def test_regularizer_rejects_bad_k(softplus_net):
    with pytest.raises(UsageError):
        r2et_regularizer(softplus_net, np.zeros((2, 6)), 6, 1.0, 0.0)


def test_weight_decay_on_zero_weights():
    net = DenseNet([(np.zeros((3, 4)), np.ones(3)), (np.zeros((2, 3)), np.zeros(2))])
    value, grad = baseline_regularizer(net, np.ones((2, 4)), TrainConfig(method="wd"))
    assert value == 0.0
    assert grad.norm() == 0.0


def test_finite_difference_curvature_is_zero_on_linear_model(linear_model):
    value, grad = baseline_regularizer(linear_model, np.ones((3, 3)), TrainConfig(method="est_h"))
    assert value == pytest.approx(0.0, abs=1e-10)
    assert grad.norm() == 0.0


def test_spectral_penalty_on_quadratic(quadratic_model, quadratic_point):
    config = TrainConfig(method="ssr", alpha=1.0, power_iters=50)
    value, grad = baseline_regularizer(quadratic_model, quadratic_point, config, with_gradient=False)
    assert value == pytest.approx(2.0, abs=1e-4)
    assert grad is None


def test_exact_hessian_penalty_on_quadratic(quadratic_model, quadratic_point):
    config = TrainConfig(method="exact_h", alpha=1.0)
    value, _ = baseline_regularizer(quadratic_model, quadratic_point, config, with_gradient=False)
    assert value == pytest.approx(np.sqrt(5.0), abs=1e-5)


def test_exact_hessian_penalty_size_cap():
    net = random_softplus_net(0, n=65, hidden=(2,))
    with pytest.raises(CapabilityError):
        baseline_regularizer(net, np.zeros(65), TrainConfig(method="exact_h"))


def test_other_methods_have_no_penalty(softplus_net):
    value, grad = baseline_regularizer(softplus_net, np.zeros((2, 6)), TrainConfig(method="vanilla"))
    assert value == 0.0 and grad.norm() == 0.0


def test_inner_attack_with_zero_radius(softplus_net):
    np.testing.assert_array_equal(at_inner_attack(softplus_net, np.ones(6), 2, 0.0), np.zeros(6))


def test_inner_attack_direction_on_quadratic(quadratic_model, quadratic_point):
    delta = at_inner_attack(quadratic_model, quadratic_point, 1, 0.1)
    np.testing.assert_allclose(delta, -0.1 * np.array([2.0, -1.0]) / np.sqrt(5.0), atol=1e-8)


def test_inner_attack_stays_in_ball(softplus_net):
    x = np.random.default_rng(3).standard_normal((5, 6))
    deltas = at_inner_attack(softplus_net, x, 2, 0.3, steps=7)
    assert np.all(np.linalg.norm(deltas, axis=1) <= 0.3 + 1e-12)


def test_vanilla_training_fits_separable_data():
    features, labels = separable_points()
    config = TrainConfig(method="vanilla", hidden=(8,), epochs=30, batch_size=16, lr=0.1)
    net, history = train(config, (features, labels))
    assert history.accuracy[-1] >= 0.95
    assert history.epochs_run == 30
    assert history.loss[-1] < history.loss[0]
    assert len(history.to_rows()) == 30


def test_training_is_deterministic():
    features, labels = separable_points(1)
    config = TrainConfig(method="r2et", lambda1=0.1, lambda2=0.01, **TINY)
    first, _ = train(config, (features, labels))
    second, _ = train(config, (features, labels))
    np.testing.assert_array_equal(first.parameters().flatten(), second.parameters().flatten())


def test_zero_lambda_r2et_is_vanilla():
    features, labels = separable_points(2)
    vanilla, _ = train(TrainConfig(method="vanilla", **TINY), (features, labels))
    r2et, _ = train(TrainConfig(method="r2et", lambda1=0.0, lambda2=0.0, **TINY), (features, labels))
    np.testing.assert_array_equal(vanilla.parameters().flatten(), r2et.parameters().flatten())


def test_hessian_free_variant_matches_zero_lambda2():
    features, labels = separable_points(3)
    noh, _ = train(TrainConfig(method="r2et_noh", lambda1=0.2, lambda2=0.5, **TINY), (features, labels))
    plain, _ = train(TrainConfig(method="r2et", lambda1=0.2, lambda2=0.0, **TINY), (features, labels))
    np.testing.assert_array_equal(noh.parameters().flatten(), plain.parameters().flatten())


def test_min_max_hessian_free_variant_matches_zero_lambda2():
    features, labels = separable_points(3)
    noh, _ = train(TrainConfig(method="r2et_mm_noh", lambda1=0.2, lambda2=0.5, **TINY), (features, labels))
    plain, _ = train(TrainConfig(method="r2et_mm", lambda1=0.2, lambda2=0.0, **TINY), (features, labels))
    np.testing.assert_array_equal(noh.parameters().flatten(), plain.parameters().flatten())


@pytest.mark.parametrize("n, expected", [(64, "full"), (65, "anchor")])
def test_auto_pairs_depend_on_input_width(monkeypatch, n, expected):
    rng = np.random.default_rng(7)
    labels = np.arange(24) % 2
    features = rng.standard_normal((24, n)) + labels[:, None]
    schemes = []

    def recording_select_pairs(ranking, k, scheme="full", *args, **kwargs):
        schemes.append(scheme)
        return select_pairs(ranking, k, scheme, *args, **kwargs)

    monkeypatch.setattr(trainer_module, "select_pairs", recording_select_pairs)
    config = TrainConfig(method="r2et", k=3, lambda1=0.1, lambda2=0.0, hidden=(4,), epochs=1, batch_size=12)
    train(config, (features, labels))
    assert config.effective_pair_scheme == "auto"
    assert set(schemes) == {expected}


@pytest.mark.parametrize("method", ["wd", "sp", "est_h", "exact_h", "ssr", "at", "r2et_mm", "r2et_mm_noh"])
def test_every_method_trains(method):
    features, labels = separable_points(4, count=32)
    config = TrainConfig(method=method, hidden=(4,), epochs=2, batch_size=16, lr=0.05, k=2, k_prime=1)
    net, history = train(config, (features, labels))
    assert history.epochs_run == 2
    assert np.all(np.isfinite(history.loss))
    assert net.input_dim == 4


def test_adam_optimizer_trains():
    features, labels = separable_points(5)
    config = TrainConfig(method="vanilla", optimizer="adam", hidden=(8,), epochs=20, batch_size=16, lr=0.01)
    _, history = train(config, (features, labels))
    assert history.accuracy[-1] >= 0.95


def test_adam_first_step_moves_by_learning_rate():
    net = DenseNet([(np.zeros((2, 2)), np.zeros(2))])
    grad = ParamGradient([np.array([[1.0, -2.0], [0.0, 3.0]])], [np.array([0.5, -0.5])])
    stepped = net.with_parameters(net.parameters() - Adam(0.1).update(grad))
    np.testing.assert_allclose(stepped.layers[0].weight, [[-0.1, 0.1], [0.0, -0.1]], atol=1e-6)


@pytest.mark.parametrize("lr", [1e100, 1e300])
def test_divergence_is_reported(lr):
    # 1e100 overflows the gradient on the second batch, 1e300 overflows the first parameter step
    rng = np.random.default_rng(0)
    features = 1e150 * rng.standard_normal((20, 3))
    labels = np.arange(20) % 2
    config = TrainConfig(method="vanilla", hidden=(4,), epochs=3, batch_size=5, lr=lr)
    with pytest.raises(TrainingDivergenceError) as info:
        train(config, (features, labels))
    assert info.value.epoch == 1


def test_training_rejects_single_class_and_bad_k():
    features, labels = separable_points()
    with pytest.raises(UsageError):
        train(TrainConfig(method="vanilla", epochs=1), (features, np.zeros_like(labels)))
    with pytest.raises(UsageError):
        train(TrainConfig(method="r2et", k=4, epochs=1), (features, labels))


def test_training_accepts_dataset(synthetic_data):
    net, history = train(TrainConfig(method="vanilla", hidden=(4,), epochs=2, k=2), synthetic_data)
    assert net.input_dim == synthetic_data.n_features
    assert history.auc[-1] is not None


@pytest.mark.slow
def test_hessian_free_r2et_widens_top_k_gaps():
    dataset = normalize(synth_gaussians(SynthSpec(n_features=16, n_samples=2000, seed=0)))
    config = TrainConfig(method="r2et_noh", hidden=(32,), epochs=30, batch_size=64, lr=0.05, k=4, lambda1=0.1)
    _, history = train(config, dataset)
    after_warmup = history.mean_topk_gap[4:]
    drops = sum(b < a for a, b in zip(after_warmup, after_warmup[1:]))
    assert drops <= 0.1 * (len(after_warmup) - 1)
