"""
Robustness and faithfulness metrics: P@k, AUC, DFFOT, COMP, SUFF and correlation.
"""

import math
import sys
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.stats import pearsonr, spearmanr
from sklearn.metrics import roc_auc_score

from src.components.explainer import SaliencyMap, rank_order
from src.components.network import ScoreModel, as_batch
from src.config.constants import FULL_REMOVAL_SET_MAX_DIM, REMOVAL_PERCENTAGES
from src.exceptions import ShapeError, UndefinedMetricError, UsageError
from src.logger import logger
from src.utils.common import write_csv


def _scores(saliency) -> np.ndarray:
    if isinstance(saliency, SaliencyMap):
        return saliency.scores
    return np.asarray(saliency, dtype=np.float64).ravel()


def precision_at_k(orig, pert, k: int, order_by: str = "signed") -> float:
    """|top-k(orig) & top-k(pert)| / k."""
    a, b = _scores(orig), _scores(pert)
    if a.shape != b.shape:
        raise ShapeError(f"saliency maps differ in length: {a.shape[0]} vs {b.shape[0]}", sys)
    if not 1 <= k <= a.shape[0]:
        raise UsageError(f"k must lie in [1, {a.shape[0]}], got {k}", sys)
    top_a = set(rank_order(a, order_by)[:k].tolist())
    top_b = set(rank_order(b, order_by)[:k].tolist())
    return len(top_a & top_b) / k


def auc_from_scores(scores: Sequence[float], labels: Sequence[int]) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    if present.size < 2:
        raise UsageError("AUC needs both classes present", sys)
    if present.size > 2 or not set(present.tolist()) <= {0, 1}:
        raise UsageError(f"AUC is defined for binary labels 0/1, got classes {present.tolist()}", sys)
    return float(roc_auc_score(labels, np.asarray(scores, dtype=np.float64)))


def auc(model: ScoreModel, features: np.ndarray, labels: Sequence[int]) -> float:
    """ROC-AUC of the class-1 probability."""
    if model.n_classes != 2:
        raise UsageError(f"AUC needs a two-class model, got {model.n_classes} classes", sys)
    batch, _ = as_batch(features, model.input_dim)
    return auc_from_scores(np.atleast_2d(model.probabilities(batch))[:, 1], labels)


def _baseline(baseline: Optional[np.ndarray], n: int) -> np.ndarray:
    return np.zeros(n) if baseline is None else np.asarray(baseline, dtype=np.float64)


@dataclass(frozen=True)
class DffotResult:
    fraction: float
    flipped: bool
    removed: int


def dffot(
    model: ScoreModel,
    x,
    saliency,
    order_by: str = "signed",
    baseline: Optional[np.ndarray] = None,
) -> DffotResult:
    """Smallest fraction of top-ranked features whose removal changes the prediction."""
    point = np.asarray(x, dtype=np.float64)
    n = point.shape[0]
    fill = _baseline(baseline, n)
    order = rank_order(_scores(saliency), order_by)
    original = int(model.predict(point))

    removed = point.copy()
    candidates = []
    for count in range(1, n + 1):
        removed[order[count - 1]] = fill[order[count - 1]]
        candidates.append(removed.copy())
    predictions = np.atleast_1d(model.predict(np.vstack(candidates)))
    flips = np.flatnonzero(predictions != original)
    if flips.size == 0:
        return DffotResult(1.0, False, n)
    count = int(flips[0]) + 1
    return DffotResult(count / n, True, count)


def default_removal_set(n: int) -> List[int]:
    if n <= FULL_REMOVAL_SET_MAX_DIM:
        return list(range(1, n + 1))
    return sorted({min(n, max(1, math.ceil(round(p * n, 9)))) for p in REMOVAL_PERCENTAGES})


def _check_removal_set(removal_set: Optional[Iterable[int]], n: int) -> List[int]:
    sizes = default_removal_set(n) if removal_set is None else [int(v) for v in removal_set]
    if not sizes or any(not 1 <= v <= n for v in sizes):
        raise UsageError(f"removal set entries must lie in [1, {n}], got {sizes}", sys)
    return sizes


def _probability_changes(model, point, saliency, removal_set, order_by, baseline, keep_top: bool) -> float:
    n = point.shape[0]
    sizes = _check_removal_set(removal_set, n)
    fill = _baseline(baseline, n)
    order = rank_order(_scores(saliency), order_by)
    c = saliency.explained_class if isinstance(saliency, SaliencyMap) else int(model.predict(point))
    variants = []
    for size in sizes:
        mask = np.zeros(n, dtype=bool)
        mask[order[:size]] = True
        if keep_top:
            mask = ~mask
        variants.append(np.where(mask, fill, point))
    reference = model.probabilities(point)[c]
    changed = np.atleast_2d(model.probabilities(np.vstack(variants)))[:, c]
    return float(np.mean(np.abs(reference - changed)))


def comp(model: ScoreModel, x, saliency, removal_set=None, order_by: str = "signed", baseline=None) -> float:
    """Mean |f(x)_c - f(x without its top-k features)_c| over the removal set."""
    point = np.asarray(x, dtype=np.float64)
    return _probability_changes(model, point, saliency, removal_set, order_by, baseline, keep_top=False)


def suff(model: ScoreModel, x, saliency, removal_set=None, order_by: str = "signed", baseline=None) -> float:
    """Mean |f(x)_c - f(x keeping only its top-k features)_c| over the removal set."""
    point = np.asarray(x, dtype=np.float64)
    return _probability_changes(model, point, saliency, removal_set, order_by, baseline, keep_top=True)


def correlation(xs: Sequence[float], ys: Sequence[float], kind: str = "spearman") -> float:
    a = np.asarray(xs, dtype=np.float64)
    b = np.asarray(ys, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"series differ in length: {a.shape[0]} vs {b.shape[0]}", sys)
    if a.shape[0] < 3:
        raise UsageError(f"correlation needs at least 3 points, got {a.shape[0]}", sys)
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise UndefinedMetricError("correlation is undefined for a constant series", sys)
    if kind == "pearson":
        return float(pearsonr(a, b)[0])
    if kind == "spearman":
        return float(spearmanr(a, b)[0])
    raise UsageError(f"unknown correlation kind '{kind}'", sys)


@dataclass
class MetricReport:
    rows: List[Dict[str, float]] = field(default_factory=list)
    metadata: Dict[str, object] = field(default_factory=dict)

    def add(self, sample_id: int, **values) -> None:
        self.rows.append({"sample_id": sample_id, **values})

    @property
    def aggregates(self) -> Dict[str, float]:
        if not self.rows:
            return {}
        names = [key for key in self.rows[0] if key != "sample_id"]
        result = {}
        for name in names:
            values = [row[name] for row in self.rows if row.get(name) is not None]
            numeric = [float(v) for v in values if isinstance(v, (int, float, np.floating, np.integer, bool))]
            if numeric:
                result[name] = float(np.mean(numeric))
        return result

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "aggregates": self.aggregates, "n_samples": len(self.rows)}

    def to_csv(self, path: str) -> str:
        logger.info(f"Writing metric report with {len(self.rows)} rows")
        return write_csv(path, self.rows)
