"""
Training loop for every defense: plain cross-entropy (vanilla, sp), the
curvature baselines (wd, est_h, exact_h, ssr), adversarial training (at) and
the thickness regularizer family (r2et, r2et_noh, r2et_mm, r2et_mm_noh).
"""

import sys
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.components.curvature import (
    batched_hvp,
    bilinear_param_gradient,
    directional_param_gradient,
    exact_hessian,
    power_iteration,
)
from src.components.data_ingestion import Dataset
from src.components.explainer import Ranking, pair_direction, rank_order
from src.components.network import Activation, DenseNet, ParamGradient, ScoreModel, as_batch
from src.config.configuration import TrainConfig
from src.config.constants import EXACT_HESSIAN_MAX_DIM, FULL_PAIRS_MAX_DIM
from src.exceptions import CapabilityError, TrainingDivergenceError, UsageError
from src.logger import logger
from src.services.evaluator import auc_from_scores

PAIR_SCHEMES = ("full", "anchor", "minimal_gap")


@dataclass
class TrainHistory:
    loss: List[float] = field(default_factory=list)
    accuracy: List[float] = field(default_factory=list)
    auc: List[Optional[float]] = field(default_factory=list)
    regularizer: List[float] = field(default_factory=list)
    mean_topk_gap: List[float] = field(default_factory=list)

    @property
    def epochs_run(self) -> int:
        return len(self.loss)

    def record(self, loss: float, accuracy: float, auc: Optional[float], regularizer: float, gap: float) -> None:
        self.loss.append(loss)
        self.accuracy.append(accuracy)
        self.auc.append(auc)
        self.regularizer.append(regularizer)
        self.mean_topk_gap.append(gap)

    def to_rows(self) -> List[dict]:
        return [
            {
                "epoch": epoch + 1,
                "loss": self.loss[epoch],
                "accuracy": self.accuracy[epoch],
                "auc": self.auc[epoch],
                "regularizer": self.regularizer[epoch],
                "mean_topk_gap": self.mean_topk_gap[epoch],
            }
            for epoch in range(self.epochs_run)
        ]


def build_network(config: TrainConfig, input_dim: int, n_classes: int) -> DenseNet:
    kind, rho = config.hidden_activation
    sizes = [input_dim, *config.hidden, n_classes]
    return DenseNet.initialize(sizes, Activation(kind, rho), seed=config.seed, head=config.head)


def topk_gap_sums(scores: np.ndarray, k: int, order_by: str = "signed") -> np.ndarray:
    """Sum of h over all (top-k, rest) pairs per row: (n - k) sum(top) - k sum(rest)."""
    scores = np.atleast_2d(scores)
    n = scores.shape[1]
    key = np.abs(scores) if order_by == "magnitude" else scores
    order = np.argsort(-key, axis=1, kind="stable")
    ranked = np.take_along_axis(scores, order, axis=1)
    return (n - k) * ranked[:, :k].sum(axis=1) - k * ranked[:, k:].sum(axis=1)


def select_pairs(
    ranking: Union[Ranking, Sequence[int]],
    k: int,
    scheme: str = "full",
    k_prime: Optional[int] = None,
    scores: Optional[np.ndarray] = None,
    gaps: Optional[Mapping[Tuple[int, int], float]] = None,
) -> List[Tuple[int, int]]:
    """
    Feature pairs entering the gap term.

    full: every (top-k, rest) pair. anchor: (rank k - i, rank k + i) for
    i = 1..k'. minimal_gap: the k' cross pairs with the smallest gap, using
    each salient and each non-salient feature at most once.
    """
    order = np.asarray(ranking.order if isinstance(ranking, Ranking) else ranking, dtype=np.int64)
    n = order.shape[0]
    if scheme not in PAIR_SCHEMES:
        raise UsageError(f"unknown pair scheme '{scheme}', expected one of {PAIR_SCHEMES}", sys)
    if gaps is None and not 1 <= k < n:
        raise UsageError(f"pair selection needs 1 <= k < n = {n}, got k = {k}", sys)

    if scheme == "full":
        return [(int(i), int(j)) for i in order[:k] for j in order[k:]]

    wanted = k if k_prime is None else int(k_prime)
    if scheme == "anchor":
        limit = min(k - 1, n - k)
        if limit < 1:
            raise UsageError(f"anchor pairs need k >= 2 and k < n, got k = {k}, n = {n}", sys)
        if wanted > k:
            raise UsageError(f"k_prime = {wanted} exceeds k = {k}", sys)
        if wanted > limit:
            logger.warning(f"Anchor k_prime={wanted} clamped to {limit} so that ranks k - i and k + i exist")
            wanted = limit
        return [(int(order[k - i - 1]), int(order[k + i - 1])) for i in range(1, wanted + 1)]

    if gaps is None:
        if scores is None:
            raise UsageError("minimal_gap pair selection needs scores or gaps", sys)
        scores = np.asarray(scores, dtype=np.float64)
        gaps = {(int(i), int(j)): float(scores[i] - scores[j]) for i in order[:k] for j in order[k:]}
    chosen: List[Tuple[int, int]] = []
    used_i, used_j = set(), set()
    for (i, j), _ in sorted(gaps.items(), key=lambda item: (item[1], item[0])):
        if i in used_i or j in used_j:
            continue
        chosen.append((i, j))
        used_i.add(i)
        used_j.add(j)
        if len(chosen) == wanted:
            break
    return chosen


def _pair_directions(
    scores: np.ndarray,
    k: int,
    scheme: str,
    k_prime: Optional[int],
    order_by: str,
) -> np.ndarray:
    n = scores.shape[1]
    directions = np.zeros_like(scores)
    for row in range(scores.shape[0]):
        order = rank_order(scores[row], order_by)
        pairs = select_pairs(order, k, scheme, k_prime, scores=scores[row])
        directions[row] = pair_direction(pairs, n)
    return directions


def _resolve_scheme(scheme: str, n: int, k: int) -> str:
    """auto: every cross pair up to FULL_PAIRS_MAX_DIM features, anchor pairs above (k = 1 has no anchors)."""
    if scheme == "auto":
        return "full" if n <= FULL_PAIRS_MAX_DIM or k < 2 else "anchor"
    return scheme


def _spectral_penalty(
    net: ScoreModel,
    batch: np.ndarray,
    classes: np.ndarray,
    coefficient: float,
    power_iters: int,
    seed: int,
    with_gradient: bool,
) -> Tuple[float, Optional[ParamGradient]]:
    """coefficient * mean |H(x_b)|_2, with the power-iteration vector frozen for the gradient."""
    norms, vectors = power_iteration(net, batch, classes, iters=power_iters, seed=seed)
    value = coefficient * float(np.mean(norms))
    if not with_gradient:
        return value, None
    live = norms > 0
    if not np.any(live):
        return value, ParamGradient.zeros_like(net)
    images = batched_hvp(net, batch[live], vectors[live], classes[live])
    lengths = np.linalg.norm(images, axis=1, keepdims=True)
    grad = bilinear_param_gradient(
        net,
        batch[live],
        images / np.where(lengths > 0, lengths, 1.0),
        vectors[live],
        classes[live],
        weights=np.full(int(live.sum()), coefficient / batch.shape[0]),
    )
    return value, grad


def r2et_regularizer(
    net: DenseNet,
    x,
    k: int,
    lambda1: float,
    lambda2: float,
    pair_scheme: str = "auto",
    k_prime: Optional[int] = None,
    power_iters: int = 10,
    seed: int = 0,
    order_by: str = "signed",
) -> Tuple[float, ParamGradient]:
    """
    -lambda1 * mean_b sum_pairs h(x_b, i, j) + lambda2 * mean_b |H(x_b)|_2 and its parameter gradient.
    Pairs come from the current ranking at each x_b.
    """
    batch, _ = as_batch(x, net.input_dim)
    n = net.input_dim
    if not 1 <= k < n:
        raise UsageError(f"regularizer needs 1 <= k < n = {n}, got k = {k}", sys)
    size = batch.shape[0]
    classes = np.atleast_1d(net.predict(batch))
    value = 0.0
    grad = ParamGradient.zeros_like(net)

    if lambda1 != 0.0:
        scores = net.input_gradient(batch, classes)
        directions = _pair_directions(scores, k, _resolve_scheme(pair_scheme, n, k), k_prime, order_by)
        gap_sums = np.einsum("bi,bi->b", directions, scores)
        value -= lambda1 * float(np.mean(gap_sums))
        grad = grad + directional_param_gradient(net, batch, directions, classes, weights=np.full(size, -lambda1 / size))

    if lambda2 != 0.0:
        penalty, penalty_grad = _spectral_penalty(net, batch, classes, lambda2, power_iters, seed, True)
        value += penalty
        grad = grad + penalty_grad
    return value, grad


def baseline_regularizer(
    net: ScoreModel,
    x,
    config: TrainConfig,
    seed: int = 0,
    with_gradient: bool = True,
) -> Tuple[float, Optional[ParamGradient]]:
    """Penalty of the curvature baselines: wd, est_h, exact_h and ssr. Other methods return zero."""
    method = config.method
    batch, _ = as_batch(x, net.input_dim)
    size = batch.shape[0]
    if with_gradient and not isinstance(net, DenseNet):
        raise UsageError("parameter gradients need a DenseNet", sys)

    if method == "wd":
        weights = [layer.weight for layer in net.layers]
        value = 0.5 * config.weight_decay * float(sum(np.sum(w**2) for w in weights))
        if not with_gradient:
            return value, None
        return value, ParamGradient(
            weights=[config.weight_decay * w for w in weights],
            biases=[np.zeros_like(layer.bias) for layer in net.layers],
        )

    classes = np.atleast_1d(net.predict(batch))

    if method == "est_h":
        grads = net.input_gradient(batch, classes)
        signs = np.sign(grads)
        counts = np.linalg.norm(signs, axis=1, keepdims=True)
        live = counts[:, 0] > 0
        value = 0.0
        diffs = np.zeros_like(batch)
        if np.any(live):
            directions = signs[live] / counts[live]
            shifted = net.input_gradient(batch[live] + config.kappa * directions, classes[live])
            diffs[live] = (shifted - grads[live]) / config.kappa
        lengths = np.linalg.norm(diffs, axis=1)
        value = config.alpha * float(np.mean(lengths))
        if not with_gradient:
            return value, None
        nonzero = lengths > 1e-12
        if not np.any(nonzero):
            return value, ParamGradient.zeros_like(net)
        units = diffs[nonzero] / lengths[nonzero, None]
        directions = signs[nonzero] / counts[nonzero]
        coeff = config.alpha / (size * config.kappa)
        count = int(nonzero.sum())
        grad = directional_param_gradient(
            net,
            np.vstack([batch[nonzero] + config.kappa * directions, batch[nonzero]]),
            np.vstack([units, units]),
            np.concatenate([classes[nonzero], classes[nonzero]]),
            weights=np.concatenate([np.full(count, coeff), np.full(count, -coeff)]),
        )
        return value, grad

    if method == "exact_h":
        n = net.input_dim
        if n > EXACT_HESSIAN_MAX_DIM:
            raise CapabilityError(f"exact_h is limited to n <= {EXACT_HESSIAN_MAX_DIM}, got n = {n}", sys)
        hessians = [exact_hessian(net, batch[b], int(classes[b])) for b in range(size)]
        norms = np.array([np.linalg.norm(h) for h in hessians])
        value = config.alpha * float(np.mean(norms))
        if not with_gradient:
            return value, None
        live = [b for b in range(size) if norms[b] > 1e-12]
        if not live:
            return value, ParamGradient.zeros_like(net)
        eye = np.eye(n)
        points = np.repeat(batch[live], n, axis=0)
        columns = np.vstack([hessians[b].T / norms[b] for b in live])
        grad = bilinear_param_gradient(
            net,
            points,
            columns,
            np.tile(eye, (len(live), 1)),
            np.repeat(classes[live], n),
            weights=np.full(points.shape[0], config.alpha / size),
        )
        return value, grad

    if method == "ssr":
        return _spectral_penalty(net, batch, classes, config.alpha, config.power_iters, seed, with_gradient)

    return 0.0, (ParamGradient.zeros_like(net) if with_gradient else None)


def _batched_inner_attack(
    net: ScoreModel,
    batch: np.ndarray,
    k: int,
    epsilon: float,
    steps: int,
    order_by: str,
) -> np.ndarray:
    deltas = np.zeros_like(batch)
    if epsilon == 0:
        return deltas
    classes = np.atleast_1d(net.predict(batch))
    scores = net.input_gradient(batch, classes)
    directions = _pair_directions(scores, k, "full", None, order_by)
    rate = epsilon if steps == 1 else 2.5 * epsilon / steps
    for _ in range(steps):
        # gradient of the negated gap sum
        ascent = -batched_hvp(net, batch + deltas, directions, classes)
        norms = np.linalg.norm(ascent, axis=1, keepdims=True)
        moving = norms[:, 0] > 1e-12
        deltas[moving] += rate * ascent[moving] / norms[moving]
        lengths = np.linalg.norm(deltas, axis=1, keepdims=True)
        deltas = np.where(lengths > epsilon, deltas * epsilon / np.maximum(lengths, 1e-300), deltas)
    return deltas


def at_inner_attack(
    net: ScoreModel,
    x,
    k: int,
    epsilon: float,
    steps: int = 1,
    order_by: str = "signed",
) -> np.ndarray:
    """Perturbation with |delta|_2 <= epsilon that most decreases the top-k gap sum; steps=1 is the fast variant."""
    if epsilon < 0:
        raise UsageError(f"epsilon must be >= 0, got {epsilon}", sys)
    if steps < 1:
        raise UsageError(f"steps must be >= 1, got {steps}", sys)
    batch, single = as_batch(x, net.input_dim)
    if not 1 <= k < net.input_dim:
        raise UsageError(f"inner attack needs 1 <= k < n = {net.input_dim}, got k = {k}", sys)
    deltas = _batched_inner_attack(net, batch, k, epsilon, steps, order_by)
    return deltas[0] if single else deltas


class GradientDescent:
    def __init__(self, lr: float):
        self.lr = lr

    def update(self, grad: ParamGradient) -> ParamGradient:
        return grad.scale(self.lr)


class Adam:
    def __init__(self, lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: Optional[List[np.ndarray]] = None
        self.v: Optional[List[np.ndarray]] = None

    def update(self, grad: ParamGradient) -> ParamGradient:
        flat = list(grad.weights) + list(grad.biases)
        if self.m is None:
            self.m = [np.zeros_like(g) for g in flat]
            self.v = [np.zeros_like(g) for g in flat]
        self.t += 1
        updates = []
        for index, g in enumerate(flat):
            self.m[index] = self.beta1 * self.m[index] + (1 - self.beta1) * g
            self.v[index] = self.beta2 * self.v[index] + (1 - self.beta2) * g**2
            m_hat = self.m[index] / (1 - self.beta1**self.t)
            v_hat = self.v[index] / (1 - self.beta2**self.t)
            updates.append(m_hat / (np.sqrt(v_hat) + self.eps))
        layers = len(grad.weights)
        return ParamGradient(updates[:layers], updates[layers:]).scale(self.lr)


def _unpack(dataset) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset, Dataset):
        return dataset.features, dataset.labels
    features, labels = dataset
    return np.asarray(features, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def train(config: TrainConfig, dataset, order_by: str = "signed") -> Tuple[DenseNet, TrainHistory]:
    """
    Mini-batch training with the configured loss.

    :param dataset: Dataset or (features, labels).
    :return: trained network and per-epoch history.
    """
    features, labels = _unpack(dataset)
    if features.shape[0] == 0:
        raise UsageError("cannot train on an empty dataset", sys)
    present = np.unique(labels)
    if present.size < 2:
        raise UsageError(f"training needs at least 2 classes, got {present.tolist()}", sys)
    n = features.shape[1]
    n_classes = max(2, int(labels.max()) + 1)
    uses_k = config.is_r2et or config.method == "at"
    if uses_k and not 1 <= config.k < n:
        raise UsageError(f"{config.method} needs 1 <= k < n = {n}, got k = {config.k}", sys)
    gap_k = min(config.k, n - 1)

    net = build_network(config, n, n_classes)
    optimizer = Adam(config.lr, config.adam_betas) if config.optimizer == "adam" else GradientDescent(config.lr)
    order_rng = np.random.default_rng(config.seed)
    aux_rng = np.random.default_rng([config.seed, 1])
    history = TrainHistory()
    count = features.shape[0]
    lambda2 = config.effective_lambda2
    scheme = config.effective_pair_scheme

    logger.info("=" * 80)
    logger.info(
        f"Training {config.method}: n={n}, C={n_classes}, N={count}, hidden={list(config.hidden)}, "
        f"epochs={config.epochs}, lr={config.lr}, optimizer={config.optimizer}"
    )
    if config.is_r2et and config.lambda1 != 0.0:
        logger.info(f"Gap pairs: {_resolve_scheme(scheme, n, config.k)} (k={config.k}, k_prime={config.k_prime})")

    for epoch in range(1, config.epochs + 1):
        permutation = order_rng.permutation(count)
        reg_values = []
        try:
            for start in range(0, count, config.batch_size):
                idx = permutation[start : start + config.batch_size]
                batch_x, batch_y = features[idx], labels[idx]

                if config.method == "at":
                    batch_x = batch_x + _batched_inner_attack(
                        net, batch_x, config.k, config.at_epsilon, config.at_steps, order_by
                    )
                grad = net.param_gradient(batch_x, batch_y)

                reg_x = batch_x
                if config.regularizer_subsample and config.regularizer_subsample < batch_x.shape[0]:
                    pick = np.sort(aux_rng.choice(batch_x.shape[0], config.regularizer_subsample, replace=False))
                    reg_x = batch_x[pick]

                if config.is_r2et:
                    if config.lambda1 != 0.0 or lambda2 != 0.0:
                        value, reg_grad = r2et_regularizer(
                            net,
                            reg_x,
                            config.k,
                            config.lambda1,
                            lambda2,
                            scheme,
                            config.k_prime,
                            config.power_iters,
                            seed=int(aux_rng.integers(2**31)) if lambda2 != 0.0 else 0,
                            order_by=order_by,
                        )
                        grad = grad + reg_grad
                        reg_values.append(value)
                elif config.method in ("wd", "est_h", "exact_h", "ssr"):
                    value, reg_grad = baseline_regularizer(
                        net, reg_x, config, seed=int(aux_rng.integers(2**31)) if config.method == "ssr" else 0
                    )
                    grad = grad + reg_grad
                    reg_values.append(value)

                if not grad.is_finite():
                    raise TrainingDivergenceError(f"non-finite gradient in epoch {epoch}", epoch, sys)
                with np.errstate(over="ignore", invalid="ignore"):
                    stepped = net.parameters() - optimizer.update(grad)
                if not stepped.is_finite():
                    raise TrainingDivergenceError(f"non-finite parameters after a step in epoch {epoch}", epoch, sys)
                net = net.with_parameters(stepped)
        except TrainingDivergenceError as e:
            logger.error(f"Training diverged in epoch {epoch}: {e.raw_message}")
            raise

        with np.errstate(all="ignore"):
            loss = net.loss(features, labels)
        if not np.isfinite(loss):
            logger.error(f"Training diverged in epoch {epoch}: loss is {loss}")
            raise TrainingDivergenceError(f"loss became {loss} in epoch {epoch}", epoch, sys)

        probabilities = np.atleast_2d(net.probabilities(features))
        accuracy = float(np.mean(np.argmax(probabilities, axis=1) == labels))
        epoch_auc = auc_from_scores(probabilities[:, 1], labels) if n_classes == 2 else None
        classes = np.argmax(probabilities, axis=1)
        mean_gap = float(np.mean(topk_gap_sums(net.input_gradient(features, classes), gap_k, order_by)))
        regularizer = float(np.mean(reg_values)) if reg_values else 0.0
        history.record(loss, accuracy, epoch_auc, regularizer, mean_gap)

        if epoch == 1 or epoch % 10 == 0 or epoch == config.epochs:
            auc_text = f"{epoch_auc:.4f}" if epoch_auc is not None else "n/a"
            logger.info(
                f"Epoch {epoch}/{config.epochs}: loss={loss:.6f}, accuracy={accuracy:.4f}, auc={auc_text}, "
                f"regularizer={regularizer:.6f}, mean_topk_gap={mean_gap:.6f}"
            )
    logger.info("=" * 80)
    return net, history
