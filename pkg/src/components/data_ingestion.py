import math
import os
import sys
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.exceptions import IngestionError, UsageError
from src.logger import logger
from src.utils.common import write_json


@dataclass(frozen=True)
class NormalizationParams:
    kind: str
    shift: np.ndarray
    scale: np.ndarray

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.shift) / self.scale

    def invert(self, features: np.ndarray) -> np.ndarray:
        return features * self.scale + self.shift

    def to_dict(self) -> dict:
        return {"kind": self.kind, "shift": self.shift.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "NormalizationParams":
        return cls(payload["kind"], np.asarray(payload["shift"], dtype=np.float64), np.asarray(payload["scale"], dtype=np.float64))


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: List[str]
    normalization: Optional[NormalizationParams] = None
    label_mapping: Dict[str, int] = field(default_factory=dict)
    source: str = ""

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(self, features=self.features[idx], labels=self.labels[idx])

    def inverse_transform(self) -> np.ndarray:
        """Raw features recovered from normalized ones."""
        if self.normalization is None:
            return self.features.copy()
        return self.normalization.invert(self.features)

    def to_csv(self, path: str) -> str:
        try:
            directory = os.path.dirname(path)
            if directory:
                os.makedirs(directory, exist_ok=True)
            frame = pd.DataFrame(self.features, columns=self.feature_names)
            frame["label"] = self.labels
            frame.to_csv(path, index=False, float_format="%.17g")
            logger.info(f"Wrote dataset with {self.n_samples} rows to {path}")
            return path
        except Exception as e:
            logger.error(f"Error writing dataset to {path}: {e}")
            raise IngestionError(f"Error writing dataset to {path}: {e}", sys)


@dataclass(frozen=True)
class SynthSpec:
    n_features: int = 16
    n_samples: int = 2000
    class_separation: float = 3.0
    noise_cov: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_features < 2:
            raise UsageError(f"synthetic data needs at least 2 features, got {self.n_features}", sys)
        if self.n_samples < 2:
            raise UsageError(f"synthetic data needs at least 2 samples, got {self.n_samples}", sys)
        if not self.class_separation > 0:
            raise UsageError(f"class separation must be positive, got {self.class_separation}", sys)
        if self.noise_cov < 0:
            raise UsageError(f"noise variance must be >= 0, got {self.noise_cov}", sys)


def _resolve_label_column(columns: List, label_column: Union[str, int]) -> int:
    if label_column in columns:
        return columns.index(label_column)
    try:
        index = int(label_column)
    except (TypeError, ValueError):
        raise IngestionError(f"label column '{label_column}' not found", sys)
    if not -len(columns) <= index < len(columns):
        raise IngestionError(f"label column index {index} out of range for {len(columns)} columns", sys)
    return index % len(columns)


def _encode_labels(raw: pd.Series) -> Tuple[np.ndarray, Dict[str, int]]:
    values = [str(v).strip() for v in raw]
    try:
        as_int = [int(v) for v in values]
        if set(as_int) == set(range(max(as_int) + 1)):
            return np.asarray(as_int, dtype=np.int64), {str(v): v for v in sorted(set(as_int))}
    except ValueError:
        pass
    mapping: Dict[str, int] = {}
    for v in values:
        if v not in mapping:
            mapping[v] = len(mapping)
    return np.asarray([mapping[v] for v in values], dtype=np.int64), mapping


def load_csv(path: str, label_column: Union[str, int] = -1, has_header: bool = True) -> Dataset:
    """
    Read a comma-separated UTF-8 table of numeric features and one label column.

    :param path: CSV file path.
    :param label_column: column name or (possibly negative) column index.
    :param has_header: whether the first line names the columns.
    :return: Dataset with raw features and labels mapped to 0..C-1.
    """
    if not os.path.isfile(path):
        logger.error(f"Dataset file not found: {path}")
        raise IngestionError(f"dataset file not found: {path}", sys)
    try:
        frame = pd.read_csv(
            path,
            header=0 if has_header else None,
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=True,
            encoding="utf-8",
        )
    except pd.errors.EmptyDataError:
        raise IngestionError(f"{path}: no data rows", sys)
    except pd.errors.ParserError as e:
        logger.error(f"Ragged rows in {path}: {e}")
        raise IngestionError(f"{path}: ragged rows ({e})", sys)
    except Exception as e:
        logger.error(f"Error reading {path}: {e}")
        raise IngestionError(f"Error reading {path}: {e}", sys)

    if frame.shape[0] == 0:
        raise IngestionError(f"{path}: no data rows", sys)
    first_row = 2 if has_header else 1
    short = frame.isna().any(axis=1)
    if short.any():
        row = int(np.flatnonzero(short.to_numpy())[0]) + first_row
        raise IngestionError(f"{path}: ragged row at line {row} (expected {frame.shape[1]} fields)", sys)

    columns = list(frame.columns)
    label_idx = _resolve_label_column(columns, label_column)
    feature_cols = [col for i, col in enumerate(columns) if i != label_idx]
    if not feature_cols:
        raise IngestionError(f"{path}: no feature columns", sys)

    features = np.empty((frame.shape[0], len(feature_cols)))
    for col_pos, col in enumerate(feature_cols):
        values = pd.to_numeric(frame[col].str.strip(), errors="coerce").to_numpy(dtype=np.float64)
        bad = ~np.isfinite(values)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise IngestionError(
                f"{path}: non-numeric value '{frame[col].iloc[row]}' at row {row + first_row}, column '{col}'",
                sys,
            )
        features[:, col_pos] = values

    labels, mapping = _encode_labels(frame[columns[label_idx]])
    names = [str(col) for col in feature_cols] if has_header else [f"x{i}" for i in range(len(feature_cols))]
    logger.info(f"Loaded {features.shape[0]} rows, {features.shape[1]} features, {len(mapping)} classes from {path}")
    return Dataset(features, labels, names, None, mapping, source=path)


def fit_normalization(features: np.ndarray, kind: str = "zscore") -> NormalizationParams:
    n_samples = features.shape[0]
    if kind == "zscore":
        if n_samples < 2:
            raise UsageError("z-score normalization needs at least 2 samples", sys)
        shift, scale = features.mean(axis=0), features.std(axis=0)
    elif kind == "minmax":
        if n_samples < 1:
            raise UsageError("min-max normalization needs at least 1 sample", sys)
        shift = features.min(axis=0)
        scale = features.max(axis=0) - shift
    else:
        raise UsageError(f"unknown normalization '{kind}'", sys)

    constant = scale == 0
    if constant.any():
        logger.warning(f"Features {np.flatnonzero(constant).tolist()} have zero variance and are passed through")
        shift = np.where(constant, 0.0, shift)
        scale = np.where(constant, 1.0, scale)
    return NormalizationParams(kind, shift, scale)


def normalize(dataset: Dataset, kind: str = "zscore", params: Optional[NormalizationParams] = None) -> Dataset:
    """Per-feature transform; pass `params` to reuse statistics fitted on another split."""
    if kind == "none":
        return dataset
    params = params or fit_normalization(dataset.features, kind)
    return replace(dataset, features=params.apply(dataset.features), normalization=params)


def _allocate(count: int, fractions: Sequence[float]) -> List[int]:
    """Largest-remainder apportionment; ties go to the earlier split."""
    ideal = [count * f for f in fractions]
    sizes = [math.floor(v) for v in ideal]
    order = sorted(range(len(fractions)), key=lambda s: (-(ideal[s] - sizes[s]), s))
    for s in order[: count - sum(sizes)]:
        sizes[s] += 1
    return sizes


def split(dataset: Dataset, fractions: Sequence[float] = (0.8, 0.0, 0.2), seed: int = 0) -> Tuple[Dataset, Dataset, Dataset]:
    """Stratified, seeded (train, val, test) split; disjoint and exhaustive."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise UsageError(f"fractions must be three non-negative values summing to 1, got {fractions}", sys)
    active = sum(1 for f in fractions if f > 0)
    rng = np.random.default_rng(seed)
    parts: List[List[int]] = [[], [], []]
    for cls in np.unique(dataset.labels):
        members = np.flatnonzero(dataset.labels == cls)
        if members.size < active:
            raise UsageError(f"class {cls} has {members.size} samples, fewer than the {active} requested splits", sys)
        members = rng.permutation(members)
        start = 0
        for s, size in enumerate(_allocate(members.size, fractions)):
            parts[s].extend(members[start : start + size].tolist())
            start += size
    train, val, test = (dataset.subset(sorted(p)) for p in parts)
    logger.info(f"Split {dataset.n_samples} samples into {train.n_samples}/{val.n_samples}/{test.n_samples}")
    return train, val, test


def synth_gaussians(spec: SynthSpec) -> Dataset:
    """
    Two balanced Gaussian classes with means at -+separation/2 along a random
    unit direction. A quarter of the features also carry a product term with
    a neighbouring feature so the learned model has input curvature.
    """
    rng = np.random.default_rng(spec.seed)
    n, count = spec.n_features, spec.n_samples
    direction = rng.standard_normal(n)
    direction /= np.linalg.norm(direction)

    labels = np.zeros(count, dtype=np.int64)
    labels[count // 2 :] = 1
    labels = rng.permutation(labels)
    signs = np.where(labels == 1, 1.0, -1.0)
    base = rng.normal(0.0, np.sqrt(spec.noise_cov), size=(count, n)) + 0.5 * spec.class_separation * signs[:, None] * direction

    features = base.copy()
    curved = rng.choice(n, size=max(1, n // 4), replace=False)
    for a in curved:
        features[:, a] += 0.5 * base[:, a] * base[:, (a + 1) % n]

    logger.info(f"Generated synthetic dataset: N={count}, n={n}, separation={spec.class_separation}, curved={sorted(curved.tolist())}")
    return Dataset(features, labels, [f"x{i}" for i in range(n)], None, {"0": 0, "1": 1}, source=f"synthetic(seed={spec.seed})")


def write_manifest(path: str, dataset: Dataset, split_seed: Optional[int] = None, extra: Optional[dict] = None) -> str:
    manifest = {
        "source": dataset.source,
        "n_samples": dataset.n_samples,
        "n_features": dataset.n_features,
        "feature_names": dataset.feature_names,
        "label_mapping": dataset.label_mapping,
        "normalization": dataset.normalization.to_dict() if dataset.normalization else None,
        "split_seed": split_seed,
    }
    manifest.update(extra or {})
    return write_json(path, manifest)
