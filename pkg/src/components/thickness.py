"""
Monte-Carlo ranking thickness.

For an endpoint x' drawn around x, the pair (i, j) is scored along the segment
x(t) = x + t (x' - x) at stratified midpoints t = (s + 0.5) / M2, either with
the indicator 1[h(x(t), i, j) >= 0] or with the gap itself. Top-k thickness
averages the pair scores over every (salient, non-salient) pair of the ranking
at x, reusing the same endpoints for all pairs.
"""

import sys
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.components.curvature import batched_hvp
from src.components.explainer import EXPLANATION_METHODS, explain_with, gap_input_gradient, pair_gaps, ranking
from src.components.network import ScoreModel, as_batch
from src.config.constants import LIPSCHITZ_SAMPLES, THICKNESS_M1, THICKNESS_M2
from src.exceptions import EstimationError, RankShieldException, UsageError
from src.logger import logger
from src.utils.common import derive_seeds, parallel_map

DISTRIBUTIONS = ("uniform_ball", "gaussian", "adversarial")
VARIANTS = ("indicator", "relaxed")


def sample_ball(rng: np.random.Generator, center: np.ndarray, radius: float, count: int) -> np.ndarray:
    """Uniform samples from the L2 ball of the given radius."""
    n = center.shape[0]
    directions = rng.standard_normal((count, n))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = radius * rng.uniform(size=(count, 1)) ** (1.0 / n)
    return center + radii * directions


@dataclass(frozen=True)
class PerturbDistribution:
    """
    Where thickness endpoints come from. The adversarial kind starts an
    explanation attack from a uniform sample in the epsilon ball and uses the
    attacked point as the endpoint.
    """

    kind: str = "uniform_ball"
    epsilon: float = 0.1
    sigma2: float = 0.0
    attack: Optional[object] = None

    def __post_init__(self):
        if self.kind not in DISTRIBUTIONS:
            raise UsageError(f"unknown perturbation kind '{self.kind}', expected one of {DISTRIBUTIONS}", sys)
        if self.kind == "gaussian" and not self.sigma2 > 0:
            raise UsageError(f"gaussian perturbation needs sigma2 > 0, got {self.sigma2}", sys)
        if self.kind != "gaussian" and not self.epsilon > 0:
            raise UsageError(f"{self.kind} perturbation needs epsilon > 0, got {self.epsilon}", sys)

    @classmethod
    def uniform_ball(cls, epsilon: float) -> "PerturbDistribution":
        return cls(kind="uniform_ball", epsilon=epsilon)

    @classmethod
    def gaussian(cls, sigma2: float) -> "PerturbDistribution":
        return cls(kind="gaussian", sigma2=sigma2)

    @classmethod
    def adversarial(cls, attack_config, epsilon: float = 0.1) -> "PerturbDistribution":
        return cls(kind="adversarial", epsilon=epsilon, attack=attack_config)

    def describe(self) -> Dict[str, float]:
        if self.kind == "gaussian":
            return {"kind": self.kind, "sigma2": self.sigma2}
        return {"kind": self.kind, "epsilon": self.epsilon}

    def sample(self, model: ScoreModel, x: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform_ball":
            return sample_ball(rng, x, self.epsilon, count)
        if self.kind == "gaussian":
            return x + rng.normal(0.0, np.sqrt(self.sigma2), size=(count, x.shape[0]))

        from src.config.configuration import AttackConfig
        from src.services.attacks import run_attack

        config = self.attack if self.attack is not None else AttackConfig()
        starts = sample_ball(rng, x, self.epsilon, count)
        endpoints = []
        for start in starts:
            try:
                endpoints.append(run_attack(model, x, config, start=start).x_adv)
            except RankShieldException as e:
                raise EstimationError(f"adversarial endpoint failed: {e.raw_message}", sys)
        return np.vstack(endpoints)


@dataclass
class ThicknessEstimate:
    value: float
    std_error: float
    m1: int
    m2: int
    variant: str
    per_endpoint: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "std_error": self.std_error,
            "m1": self.m1,
            "m2": self.m2,
            "variant": self.variant,
        }


@dataclass(frozen=True)
class ThicknessBounds:
    lower: float
    upper: float
    epsilon: float
    lipschitz_samples: int
    gap: float
    lipschitz_i: float
    lipschitz_j: float

    def to_dict(self) -> dict:
        return asdict(self)


def _check_counts(m1: int, m2: int, variant: str) -> None:
    if m1 < 1 or m2 < 1:
        raise UsageError(f"M1 and M2 must be >= 1, got M1={m1}, M2={m2}", sys)
    if variant not in VARIANTS:
        raise UsageError(f"unknown thickness variant '{variant}', expected one of {VARIANTS}", sys)


def _scores_at(model: ScoreModel, points: np.ndarray, c: int, explanation: str, params: dict) -> np.ndarray:
    if explanation == "simple_gradient":
        return model.input_gradient(points, c)
    return np.vstack([explain_with(model, p, explanation, c=c, **params).scores for p in points])


def _estimate(
    model: ScoreModel,
    point: np.ndarray,
    distribution: PerturbDistribution,
    pairs: Sequence[Tuple[int, int]],
    m1: int,
    m2: int,
    variant: str,
    seed: int,
    c: int,
    explanation: str = "simple_gradient",
    explanation_params: Optional[dict] = None,
) -> ThicknessEstimate:
    rng = np.random.default_rng(seed)
    endpoints = distribution.sample(model, point, m1, rng)
    t = (np.arange(m2) + 0.5) / m2
    # (M1, M2, n) segment points flattened to one batch
    path = point + t[None, :, None] * (endpoints - point)[:, None, :]
    scores = _scores_at(model, path.reshape(m1 * m2, -1), c, explanation, explanation_params or {})
    gaps = pair_gaps(scores, pairs)
    values = (gaps >= 0).astype(np.float64) if variant == "indicator" else gaps
    per_endpoint = values.reshape(m1, m2 * len(pairs)).mean(axis=1)
    std_error = float(np.std(per_endpoint, ddof=1) / np.sqrt(m1)) if m1 > 1 else 0.0
    return ThicknessEstimate(float(np.mean(per_endpoint)), std_error, m1, m2, variant, per_endpoint)


def _prepare(model: ScoreModel, x, c: Optional[int]) -> Tuple[np.ndarray, int]:
    point, single = as_batch(x, model.input_dim)
    if not single:
        raise UsageError("thickness is estimated one input at a time", sys)
    point = point[0]
    return point, int(model.predict(point)) if c is None else int(c)


def pairwise_thickness(
    model: ScoreModel,
    x,
    distribution: PerturbDistribution,
    i: int,
    j: int,
    m1: int = THICKNESS_M1,
    m2: int = THICKNESS_M2,
    variant: str = "indicator",
    seed: int = 0,
    c: Optional[int] = None,
) -> ThicknessEstimate:
    _check_counts(m1, m2, variant)
    n = model.input_dim
    if i == j or not (0 <= i < n and 0 <= j < n):
        raise UsageError(f"pairwise thickness needs distinct features in [0, {n}), got ({i}, {j})", sys)
    point, cls = _prepare(model, x, c)
    return _estimate(model, point, distribution, [(i, j)], m1, m2, variant, seed, cls)


def topk_thickness(
    model: ScoreModel,
    x,
    distribution: PerturbDistribution,
    k: int,
    m1: int = THICKNESS_M1,
    m2: int = THICKNESS_M2,
    variant: str = "indicator",
    seed: int = 0,
    c: Optional[int] = None,
    order_by: str = "signed",
    explanation: str = "simple_gradient",
    explanation_params: Optional[dict] = None,
) -> ThicknessEstimate:
    """Mean pairwise thickness over the k * (n - k) pairs of the ranking at x."""
    _check_counts(m1, m2, variant)
    n = model.input_dim
    if not 1 <= k < n:
        raise UsageError(f"top-k thickness needs 1 <= k < n = {n}, got k = {k}", sys)
    if explanation not in EXPLANATION_METHODS:
        raise UsageError(f"unknown explanation method '{explanation}'", sys)
    point, cls = _prepare(model, x, c)
    params = explanation_params or {}
    saliency = explain_with(model, point, explanation, c=cls, **params)
    pairs = ranking(saliency, k, order_by).cross_pairs()
    return _estimate(model, point, distribution, pairs, m1, m2, variant, seed, cls, explanation, params)


def thickness_bounds(
    model: ScoreModel,
    x,
    i: int,
    j: int,
    epsilon: float,
    samples: int = LIPSCHITZ_SAMPLES,
    seed: int = 0,
    c: Optional[int] = None,
) -> ThicknessBounds:
    """
    Surrogate bounds on the relaxed pairwise thickness over the epsilon ball:
    lower = h - epsilon/2 |H_i - H_j|, upper = h + epsilon (L_i + L_j).

    L_i is the largest |H(x')_i| over the center and `samples` uniform ball
    points, so it under-estimates the true local Lipschitz constant.
    """
    if not epsilon > 0:
        raise UsageError(f"epsilon must be positive, got {epsilon}", sys)
    if samples < 1:
        raise UsageError(f"need at least one Lipschitz sample, got {samples}", sys)
    point, cls = _prepare(model, x, c)
    n = model.input_dim

    scores = model.input_gradient(point, cls)
    h = float(scores[i] - scores[j])
    lower = h - 0.5 * epsilon * float(np.linalg.norm(gap_input_gradient(model, point, i, j, cls)))

    rng = np.random.default_rng(seed)
    cloud = np.vstack([point[None, :], sample_ball(rng, point, epsilon, samples)])
    size = cloud.shape[0]
    rows = batched_hvp(
        model,
        np.vstack([cloud, cloud]),
        np.vstack([np.tile(np.eye(n)[i], (size, 1)), np.tile(np.eye(n)[j], (size, 1))]),
        cls,
    )
    lipschitz_i = float(np.max(np.linalg.norm(rows[:size], axis=1)))
    lipschitz_j = float(np.max(np.linalg.norm(rows[size:], axis=1)))
    upper = h + epsilon * (lipschitz_i + lipschitz_j)
    return ThicknessBounds(lower, upper, float(epsilon), int(samples), h, lipschitz_i, lipschitz_j)


def thickness_scan(
    model: ScoreModel,
    features: np.ndarray,
    k: int,
    distribution: PerturbDistribution,
    m1: int = THICKNESS_M1,
    m2: int = THICKNESS_M2,
    variant: str = "indicator",
    seed: int = 0,
    jobs: int = 1,
    order_by: str = "signed",
    explanation: str = "simple_gradient",
    explanation_params: Optional[dict] = None,
) -> List[ThicknessEstimate]:
    """Per-sample top-k thickness with seeds derived from one master seed."""
    batch = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if batch.shape[0] == 0:
        raise UsageError("thickness scan needs a non-empty dataset", sys)
    seeds = derive_seeds(seed, batch.shape[0])

    def estimate(index: int) -> ThicknessEstimate:
        return topk_thickness(
            model,
            batch[index],
            distribution,
            k,
            m1,
            m2,
            variant,
            seeds[index],
            order_by=order_by,
            explanation=explanation,
            explanation_params=explanation_params,
        )

    logger.info(f"Estimating {variant} top-{k} thickness on {batch.shape[0]} samples (M1={m1}, M2={m2})")
    return parallel_map(estimate, list(range(batch.shape[0])), jobs)


def model_thickness(
    model: ScoreModel,
    features: np.ndarray,
    k: int,
    distribution: PerturbDistribution,
    m1: int = THICKNESS_M1,
    m2: int = THICKNESS_M2,
    seed: int = 0,
    variant: str = "indicator",
    jobs: int = 1,
) -> float:
    """Average per-sample top-k thickness over a dataset."""
    estimates = thickness_scan(model, features, k, distribution, m1, m2, variant, seed, jobs)
    return float(np.mean([e.value for e in estimates]))
