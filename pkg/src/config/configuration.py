"""
Run configuration: typed sections validated on construction and a loader for
JSON or YAML files. RANKSHIELD_SEED, when set, overrides every seed.
"""

import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from typing import List, Optional, Tuple

import yaml

from src.config.constants import (
    ATTACK_MAX_ITERS,
    ATTACK_PRED_EPSILON,
    ATTACK_STEP_SIZE,
    IG_STEPS,
    LAMBDA1,
    LAMBDA2,
    LEARNING_RATE,
    LIPSCHITZ_SAMPLES,
    MOO_CRIT_EPSILON,
    MOO_ETA,
    MOO_GAMMA,
    MOO_RADIUS_FLOOR,
    MOO_TARGET_FRACTION,
    MOO_TARGET_MARGIN,
    POWER_ITERATIONS,
    SEED_ENV_VAR,
    SMOOTHGRAD_SAMPLES,
    SMOOTHGRAD_SIGMA2,
    SOFTPLUS_RHO,
    THICKNESS_M1,
    THICKNESS_M2,
    TOP_K,
)
from src.exceptions import ConfigError
from src.logger import logger

TRAIN_METHODS = (
    "vanilla",
    "wd",
    "sp",
    "est_h",
    "exact_h",
    "ssr",
    "at",
    "r2et",
    "r2et_noh",
    "r2et_mm",
    "r2et_mm_noh",
)
PAIR_SCHEMES = ("auto", "full", "anchor", "minimal_gap")
ATTACK_METHODS = ("erattack", "mse", "moo")
CONSTRAINT_MODES = ("reject", "penalty")
METRICS = ("precision_at_k", "auc", "dffot", "comp", "suff")


def _require(condition: bool, message: str) -> None:
    if not condition:
        logger.error(f"Invalid configuration: {message}")
        raise ConfigError(message, sys)


@dataclass(frozen=True)
class TrainConfig:
    method: str = "vanilla"
    lr: float = LEARNING_RATE
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    hidden: Tuple[int, ...] = (32,)
    activation: str = "softplus"
    rho: float = SOFTPLUS_RHO
    sp_rho: float = 2.0
    head: str = "probability"
    optimizer: str = "sgd"
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    alpha: float = 0.01
    kappa: float = 1e-3
    power_iters: int = 10
    at_epsilon: float = 0.1
    at_steps: int = 1
    lambda1: float = LAMBDA1
    lambda2: float = LAMBDA2
    k: int = TOP_K
    k_prime: Optional[int] = None
    pair_scheme: str = "auto"
    regularizer_subsample: Optional[int] = None

    def __post_init__(self):
        _require(self.method in TRAIN_METHODS, f"unknown training method '{self.method}'")
        _require(self.lr > 0, f"lr must be positive, got {self.lr}")
        _require(self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}")
        _require(self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}")
        _require(all(int(h) >= 1 for h in self.hidden), f"hidden sizes must be positive, got {self.hidden}")
        _require(self.activation in ("relu", "softplus"), f"unknown activation '{self.activation}'")
        _require(self.rho > 0 and self.sp_rho > 0, "softplus sharpness must be positive")
        _require(self.head in ("probability", "logit"), f"unknown head '{self.head}'")
        _require(self.optimizer in ("sgd", "adam"), f"unknown optimizer '{self.optimizer}'")
        for name in ("weight_decay", "alpha", "lambda1", "lambda2", "at_epsilon"):
            _require(getattr(self, name) >= 0, f"{name} must be >= 0, got {getattr(self, name)}")
        _require(self.kappa > 0, f"kappa must be positive, got {self.kappa}")
        _require(self.power_iters >= 1 and self.at_steps >= 1, "power_iters and at_steps must be >= 1")
        _require(self.k >= 1, f"k must be >= 1, got {self.k}")
        _require(self.k_prime is None or 1 <= self.k_prime <= self.k, f"k_prime must lie in [1, k], got {self.k_prime}")
        _require(self.pair_scheme in PAIR_SCHEMES, f"unknown pair scheme '{self.pair_scheme}'")
        _require(
            self.regularizer_subsample is None or self.regularizer_subsample >= 1,
            "regularizer_subsample must be >= 1 when set",
        )

    @property
    def is_r2et(self) -> bool:
        return self.method.startswith("r2et")

    @property
    def effective_lambda2(self) -> float:
        """The \\H ablations drop the Hessian term."""
        return 0.0 if self.method.endswith("_noh") else self.lambda2

    @property
    def effective_pair_scheme(self) -> str:
        """The auto scheme stays unresolved for plain R2ET; the trainer picks full or anchor from n."""
        if self.pair_scheme == "auto" and self.method.startswith("r2et_mm"):
            return "minimal_gap"
        return self.pair_scheme

    @property
    def hidden_activation(self) -> Tuple[str, float]:
        if self.method == "sp":
            return "softplus", self.sp_rho
        return self.activation, self.rho


@dataclass(frozen=True)
class AttackConfig:
    method: str = "erattack"
    step_size: float = ATTACK_STEP_SIZE
    max_iters: int = ATTACK_MAX_ITERS
    pred_epsilon: float = ATTACK_PRED_EPSILON
    k: int = TOP_K
    seed: int = 0
    order_by: str = "signed"
    stop_at_first_flip: bool = False
    constraint_mode: str = "reject"
    penalty_rate: float = 1.0
    backtracking: bool = True
    random_direction: bool = True

    def __post_init__(self):
        _require(self.method in ATTACK_METHODS, f"unknown attack method '{self.method}'")
        _require(self.step_size > 0, f"step_size must be positive, got {self.step_size}")
        _require(self.max_iters >= 1, f"max_iters must be >= 1, got {self.max_iters}")
        _require(self.pred_epsilon >= 0, f"pred_epsilon must be >= 0, got {self.pred_epsilon}")
        _require(self.k >= 1, f"k must be >= 1, got {self.k}")
        _require(self.order_by in ("signed", "magnitude"), f"unknown order_by '{self.order_by}'")
        _require(self.constraint_mode in CONSTRAINT_MODES, f"unknown constraint mode '{self.constraint_mode}'")
        _require(self.penalty_rate > 0, f"penalty_rate must be positive, got {self.penalty_rate}")


@dataclass(frozen=True)
class MooParams:
    gamma: float = MOO_GAMMA
    eta: float = MOO_ETA
    crit_epsilon: float = MOO_CRIT_EPSILON
    radius_floor: float = MOO_RADIUS_FLOOR
    initial_radius: Optional[float] = None
    expand_ratio: float = 0.75
    target_fraction: float = MOO_TARGET_FRACTION
    target_margin: float = MOO_TARGET_MARGIN

    def __post_init__(self):
        _require(0 < self.gamma < 1, f"gamma must lie in (0, 1), got {self.gamma}")
        _require(0 < self.eta < 1, f"eta must lie in (0, 1), got {self.eta}")
        _require(self.eta <= self.expand_ratio < 1, f"expand_ratio must lie in [eta, 1), got {self.expand_ratio}")
        _require(self.crit_epsilon > 0, f"crit_epsilon must be positive, got {self.crit_epsilon}")
        _require(self.radius_floor > 0, f"radius_floor must be positive, got {self.radius_floor}")
        _require(self.initial_radius is None or self.initial_radius > 0, "initial_radius must be positive")
        _require(0 < self.target_fraction < 1, f"target_fraction must lie in (0, 1), got {self.target_fraction}")
        _require(self.target_margin >= 0, f"target_margin must be >= 0, got {self.target_margin}")


@dataclass(frozen=True)
class ThicknessConfig:
    kind: str = "uniform_ball"
    epsilon: float = 0.1
    sigma2: float = 0.0
    m1: int = THICKNESS_M1
    m2: int = THICKNESS_M2
    variant: str = "indicator"
    lipschitz_samples: int = LIPSCHITZ_SAMPLES

    def __post_init__(self):
        _require(self.kind in ("uniform_ball", "gaussian", "adversarial"), f"unknown perturbation '{self.kind}'")
        _require(self.m1 >= 1 and self.m2 >= 1, "m1 and m2 must be >= 1")
        _require(self.variant in ("indicator", "relaxed"), f"unknown variant '{self.variant}'")
        _require(self.lipschitz_samples >= 1, "lipschitz_samples must be >= 1")
        if self.kind == "gaussian":
            _require(self.sigma2 > 0, f"gaussian perturbation needs sigma2 > 0, got {self.sigma2}")
        else:
            _require(self.epsilon > 0, f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class DataConfig:
    path: Optional[str] = None
    label_column: str = "-1"
    has_header: bool = True
    normalization: str = "zscore"
    fractions: Tuple[float, float, float] = (0.8, 0.0, 0.2)
    split_seed: int = 0
    n_features: int = 16
    n_samples: int = 2000
    class_separation: float = 3.0
    noise: float = 1.0
    synth_seed: int = 0

    def __post_init__(self):
        _require(self.normalization in ("zscore", "minmax", "none"), f"unknown normalization '{self.normalization}'")
        _require(len(self.fractions) == 3, "fractions must have three entries (train, val, test)")
        _require(all(f >= 0 for f in self.fractions), "fractions must be non-negative")
        _require(abs(sum(self.fractions) - 1.0) <= 1e-9, f"fractions must sum to 1, got {sum(self.fractions)}")
        _require(self.n_features >= 2 and self.n_samples >= 2, "synthetic data needs >= 2 features and samples")
        _require(self.class_separation > 0, "class_separation must be positive")


@dataclass(frozen=True)
class ExplanationConfig:
    method: str = "simple_gradient"
    smoothgrad_samples: int = SMOOTHGRAD_SAMPLES
    smoothgrad_sigma2: float = SMOOTHGRAD_SIGMA2
    ig_steps: int = IG_STEPS

    def __post_init__(self):
        _require(
            self.method in ("simple_gradient", "smoothgrad", "integrated_gradients"),
            f"unknown explanation method '{self.method}'",
        )

    def params(self) -> dict:
        if self.method == "smoothgrad":
            return {"samples": self.smoothgrad_samples, "sigma2": self.smoothgrad_sigma2}
        if self.method == "integrated_gradients":
            return {"steps": self.ig_steps}
        return {}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    moo: MooParams = field(default_factory=MooParams)
    thickness: ThicknessConfig = field(default_factory=ThicknessConfig)
    explanation: ExplanationConfig = field(default_factory=ExplanationConfig)
    metrics: Tuple[str, ...] = ("precision_at_k", "auc")
    removal: str = "zero"
    n_eval_samples: Optional[int] = None
    jobs: int = 1
    write_trajectories: bool = False

    def __post_init__(self):
        unknown = [m for m in self.metrics if m not in METRICS]
        _require(not unknown, f"unknown metrics {unknown}")
        _require(self.removal in ("zero", "mean"), f"unknown removal baseline '{self.removal}'")
        _require(self.n_eval_samples is None or self.n_eval_samples >= 1, "n_eval_samples must be >= 1")
        _require(self.jobs >= 1, f"jobs must be >= 1, got {self.jobs}")

    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Every seed in the tree set from one value."""
        return replace(
            self,
            seed=seed,
            data=replace(self.data, split_seed=seed, synth_seed=seed),
            train=replace(self.train, seed=seed),
            attack=replace(self.attack, seed=seed),
        )


_SECTIONS = {
    "data": DataConfig,
    "train": TrainConfig,
    "attack": AttackConfig,
    "moo": MooParams,
    "thickness": ThicknessConfig,
    "explanation": ExplanationConfig,
}
_TUPLE_FIELDS = {"hidden", "adam_betas", "fractions", "metrics"}


def _build(cls, payload: dict, section: str):
    if payload is None:
        return cls()
    _require(isinstance(payload, dict), f"section '{section}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(payload) - known)
    _require(not unknown, f"unknown keys in '{section}': {unknown}")
    values = {}
    for key, value in payload.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        if key in _SECTIONS and section == "experiment":
            value = _build(_SECTIONS[key], value, key)
        values[key] = value
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{section}' section: {e}", sys)


def config_from_dict(payload: dict) -> ExperimentConfig:
    config = _build(ExperimentConfig, payload or {}, "experiment")
    override = os.getenv(SEED_ENV_VAR)
    if override not in (None, ""):
        try:
            seed = int(override)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got '{override}'", sys)
        logger.info(f"{SEED_ENV_VAR}={seed} overrides configured seeds")
        config = config.with_seed(seed)
    return config


def load_config(path: str) -> ExperimentConfig:
    """
    Reads an experiment configuration from a JSON or YAML file.

    :param path: config file path
    :return: validated ExperimentConfig
    """
    if not os.path.isfile(path):
        logger.error(f"Config file not found: {path}")
        raise ConfigError(f"config file not found: {path}", sys)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            payload = yaml.safe_load(handle)
    except yaml.YAMLError as e:
        logger.error(f"Could not parse config {path}: {e}")
        raise ConfigError(f"could not parse config {path}: {e}", sys)
    config = config_from_dict(payload)
    logger.info(f"Loaded config '{config.name}' from {path}")
    return config
