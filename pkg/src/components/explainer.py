"""
Saliency maps, feature rankings and the pairwise gap h(x, i, j) = I(x)_i - I(x)_j.
"""

import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.components.curvature import hvp
from src.components.network import ScoreModel, as_batch
from src.config.constants import IG_STEPS, SMOOTHGRAD_SAMPLES, SMOOTHGRAD_SIGMA2
from src.exceptions import IndexOutOfRangeError, ShapeError, UsageError

EXPLANATION_METHODS = ("simple_gradient", "smoothgrad", "integrated_gradients")
ORDER_MODES = ("signed", "magnitude")


@dataclass(frozen=True)
class SaliencyMap:
    scores: np.ndarray
    explained_class: int
    method: str = "simple_gradient"
    method_params: Dict[str, float] = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return self.scores.shape[0]

    def to_rows(self) -> List[dict]:
        return [{"feature_index": i, "score": float(s)} for i, s in enumerate(self.scores)]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "explained_class": int(self.explained_class),
            "method_params": dict(self.method_params),
            "scores": self.scores.tolist(),
        }


@dataclass(frozen=True)
class Ranking:
    """Features in descending order of score; ties go to the lower index."""

    order: np.ndarray
    k: int

    @property
    def top(self) -> np.ndarray:
        return self.order[: self.k]

    @property
    def rest(self) -> np.ndarray:
        return self.order[self.k :]

    def position(self, feature: int) -> int:
        return int(np.flatnonzero(self.order == feature)[0])

    def cross_pairs(self) -> List[Tuple[int, int]]:
        """All (salient, non-salient) feature pairs, k * (n - k) of them."""
        return [(int(i), int(j)) for i in self.top for j in self.rest]


def rank_order(scores: np.ndarray, order_by: str = "signed") -> np.ndarray:
    if order_by not in ORDER_MODES:
        raise UsageError(f"unknown order_by '{order_by}', expected one of {ORDER_MODES}", sys)
    key = np.asarray(scores, dtype=np.float64)
    if order_by == "magnitude":
        key = np.abs(key)
    return np.argsort(-key, kind="stable")


def _explained_class(model: ScoreModel, x: np.ndarray, c: Optional[int]) -> int:
    if c is None:
        return int(model.predict(x))
    if not 0 <= int(c) < model.n_classes:
        raise IndexOutOfRangeError(f"class index {c} out of range [0, {model.n_classes})", sys)
    return int(c)


def _single(model: ScoreModel, x) -> np.ndarray:
    point, single = as_batch(x, model.input_dim)
    if not single:
        raise ShapeError("expected a single input vector", sys)
    return point[0]


def simple_gradient(model: ScoreModel, x, c: Optional[int] = None) -> SaliencyMap:
    """I(x) = grad_x f(x)_c with c the predicted class unless given."""
    point = _single(model, x)
    cls = _explained_class(model, point, c)
    return SaliencyMap(model.input_gradient(point, cls), cls, "simple_gradient")


def smoothgrad(
    model: ScoreModel,
    x,
    samples: int = SMOOTHGRAD_SAMPLES,
    sigma2: float = SMOOTHGRAD_SIGMA2,
    seed: int = 0,
    c: Optional[int] = None,
) -> SaliencyMap:
    """Mean of simple gradients at x + N(0, sigma2 I) perturbations; the class is fixed at x."""
    if samples < 1:
        raise UsageError(f"SmoothGrad needs at least one sample, got {samples}", sys)
    if not sigma2 > 0:
        raise UsageError(f"SmoothGrad noise variance must be positive, got {sigma2}", sys)
    point = _single(model, x)
    cls = _explained_class(model, point, c)
    rng = np.random.default_rng(seed)
    noisy = point + rng.normal(0.0, np.sqrt(sigma2), size=(samples, point.shape[0]))
    scores = model.input_gradient(noisy, cls).mean(axis=0)
    return SaliencyMap(scores, cls, "smoothgrad", {"samples": samples, "sigma2": sigma2, "seed": seed})


def integrated_gradients(
    model: ScoreModel,
    x,
    baseline=None,
    steps: int = IG_STEPS,
    c: Optional[int] = None,
) -> SaliencyMap:
    """(x - x0) times the midpoint-rule average of gradients along the straight path from x0 to x."""
    if steps < 1:
        raise UsageError(f"integrated gradients needs steps >= 1, got {steps}", sys)
    point = _single(model, x)
    origin = np.zeros_like(point) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if origin.shape != point.shape:
        raise ShapeError(f"baseline shape {origin.shape} does not match input shape {point.shape}", sys)
    cls = _explained_class(model, point, c)
    alphas = (np.arange(steps) + 0.5) / steps
    path = origin + alphas[:, None] * (point - origin)
    scores = (point - origin) * model.input_gradient(path, cls).mean(axis=0)
    return SaliencyMap(scores, cls, "integrated_gradients", {"steps": steps, "baseline": origin.tolist()})


def explain_with(model: ScoreModel, x, method: str = "simple_gradient", c: Optional[int] = None, **params) -> SaliencyMap:
    if method == "simple_gradient":
        return simple_gradient(model, x, c)
    if method == "smoothgrad":
        return smoothgrad(model, x, c=c, **params)
    if method == "integrated_gradients":
        return integrated_gradients(model, x, c=c, **params)
    raise UsageError(f"unknown explanation method '{method}', expected one of {EXPLANATION_METHODS}", sys)


def ranking(saliency, k: int, order_by: str = "signed") -> Ranking:
    scores = saliency.scores if isinstance(saliency, SaliencyMap) else np.asarray(saliency, dtype=np.float64)
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise UsageError(f"k must lie in [1, {n}], got {k}", sys)
    return Ranking(rank_order(scores, order_by), int(k))


def gap(model: ScoreModel, x, i: int, j: int, c: Optional[int] = None) -> float:
    n = model.input_dim
    for index in (i, j):
        if not 0 <= index < n:
            raise IndexOutOfRangeError(f"feature index {index} out of range [0, {n})", sys)
    scores = simple_gradient(model, x, c).scores
    return float(scores[i] - scores[j])


def pair_gaps(scores: np.ndarray, pairs: Sequence[Tuple[int, int]]) -> np.ndarray:
    """Gaps for many pairs from precomputed scores; works on (n,) or (B, n) scores."""
    if len(pairs) == 0:
        return np.zeros(np.shape(scores)[:-1] + (0,))
    idx = np.asarray(pairs, dtype=np.int64)
    return scores[..., idx[:, 0]] - scores[..., idx[:, 1]]


def pair_direction(pairs: Sequence[Tuple[int, int]], n: int) -> np.ndarray:
    """u = sum over pairs of (e_i - e_j); u . grad_x f equals the gap sum."""
    u = np.zeros(n)
    for i, j in pairs:
        u[i] += 1.0
        u[j] -= 1.0
    return u


def gap_input_gradient(model: ScoreModel, x, i: int, j: int, c: Optional[int] = None) -> np.ndarray:
    """grad_x h(x, i, j) = H(x)_i - H(x)_j."""
    n = model.input_dim
    if i == j:
        raise UsageError("gap gradient needs two distinct features", sys)
    for index in (i, j):
        if not 0 <= index < n:
            raise IndexOutOfRangeError(f"feature index {index} out of range [0, {n})", sys)
    point = _single(model, x)
    cls = _explained_class(model, point, c)
    return hvp(model, point, pair_direction([(i, j)], n), cls)
