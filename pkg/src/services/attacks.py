"""
Prediction-preserving attacks on gradient explanations.

ERAttack walks down the sum of top-k gaps of the original ranking, the MSE
attack walks up |I(x') - I(x)|^2. Both take fixed-length normalized steps and
reject any step that changes the predicted class or moves the probability
vector more than pred_epsilon (L2) away from its value at x. The trust-region
multi-objective attack lives in moo_attack and is reachable through run_attack.
"""

import sys
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.components.curvature import hvp
from src.components.explainer import pair_direction, ranking
from src.components.network import ScoreModel, as_batch
from src.config.configuration import AttackConfig, MooParams
from src.config.constants import ATTACK_MIN_STEP_FRACTION
from src.exceptions import AttackError, RankShieldException, UsageError
from src.logger import logger
from src.utils.common import derive_seeds, parallel_map

VERDICTS = ("flip", "all-critical", "radius-floor", "iteration-cap", "stationary")


@dataclass
class AttackResult:
    """
    p_at_k_trajectory[0] and objective_trajectory[0] describe the starting
    point, entry t the iterate after iteration t, so both hold iters_run + 1
    values. merit_steps holds, per objective of the multi-objective attack, the
    merit before and after each accepted step under that step's targets.
    """

    x_adv: np.ndarray
    p_at_k_trajectory: List[float]
    first_flip_iter: Optional[int]
    prediction_preserved: bool
    iters_run: int
    objective_trajectory: List[float]
    verdict: str = "iteration-cap"
    method: str = "erattack"
    accepted_steps: int = 0
    rejected_steps: int = 0
    merit_trajectories: Dict[str, List[float]] = field(default_factory=dict)
    merit_steps: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)
    final_targets: Dict[str, float] = field(default_factory=dict)

    @property
    def final_p_at_k(self) -> float:
        return self.p_at_k_trajectory[-1]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "verdict": self.verdict,
            "iters_run": self.iters_run,
            "first_flip_iter": self.first_flip_iter,
            "final_p_at_k": self.final_p_at_k,
            "prediction_preserved": self.prediction_preserved,
            "accepted_steps": self.accepted_steps,
            "rejected_steps": self.rejected_steps,
            "x_adv": self.x_adv.tolist(),
            "p_at_k_trajectory": list(self.p_at_k_trajectory),
            "objective_trajectory": list(self.objective_trajectory),
        }

    def trajectory_rows(self) -> List[dict]:
        return [
            {"iteration": t, "p_at_k": p, "objective": o}
            for t, (p, o) in enumerate(zip(self.p_at_k_trajectory, self.objective_trajectory))
        ]


class AttackContext:
    """Everything fixed at the unperturbed input: class, probabilities, saliency and top-k pairs."""

    def __init__(self, model: ScoreModel, x, config: AttackConfig):
        point, single = as_batch(x, model.input_dim)
        if not single:
            raise UsageError("attacks run on one input at a time", sys)
        n = model.input_dim
        if not 1 <= config.k < n:
            raise UsageError(f"attack needs 1 <= k < n = {n}, got k = {config.k}", sys)
        self.model = model
        self.config = config
        self.x0 = point[0]
        self.c = int(model.predict(self.x0))
        self.f0 = model.probabilities(self.x0)
        self.scores0 = model.input_gradient(self.x0, self.c)
        rank0 = ranking(self.scores0, config.k, config.order_by)
        self.top0 = set(int(i) for i in rank0.top)
        self.pairs = rank0.cross_pairs()
        self.direction = pair_direction(self.pairs, n)

    def saliency(self, x: np.ndarray) -> np.ndarray:
        return self.model.input_gradient(x, self.c)

    def p_at_k(self, scores: np.ndarray) -> float:
        top = ranking(scores, self.config.k, self.config.order_by).top
        return len(self.top0.intersection(int(i) for i in top)) / self.config.k

    def prediction_change(self, x: np.ndarray) -> float:
        return float(np.linalg.norm(self.model.probabilities(x) - self.f0))

    def feasible(self, x: np.ndarray) -> bool:
        return int(self.model.predict(x)) == self.c and self.prediction_change(x) <= self.config.pred_epsilon

    def objective(self, scores: np.ndarray) -> float:
        if self.config.method == "mse":
            return float(np.sum((scores - self.scores0) ** 2))
        return float(self.direction @ scores)

    def loss(self, scores: np.ndarray) -> float:
        """Value the descent minimizes."""
        value = self.objective(scores)
        return -value if self.config.method == "mse" else value

    def loss_gradient(self, x: np.ndarray, scores: np.ndarray) -> np.ndarray:
        if self.config.method == "mse":
            residual = scores - self.scores0
            if not np.any(residual):
                return np.zeros_like(x)
            return -2.0 * hvp(self.model, x, residual, self.c)
        return hvp(self.model, x, self.direction, self.c)

    def constraint_gradient(self, x: np.ndarray) -> np.ndarray:
        """Gradient of |f(x) - f(x0)|^2 used by the penalty mode."""
        jac = self.model.probability_jacobian(x)
        return 2.0 * jac.T @ (self.model.probabilities(x) - self.f0)


def _descent(context: AttackContext, start: Optional[np.ndarray]) -> AttackResult:
    config = context.config
    rng = np.random.default_rng(config.seed)
    x = context.x0.copy()
    if start is not None:
        candidate = np.asarray(start, dtype=np.float64)
        if context.feasible(candidate):
            x = candidate
        else:
            logger.debug("Attack start violates the prediction constraint; starting from x")

    scores = context.saliency(x)
    p_traj = [context.p_at_k(scores)]
    obj_traj = [context.objective(scores)]
    first_flip = 0 if p_traj[0] < 1.0 else None
    last_feasible = x.copy()
    step = config.step_size
    floor = config.step_size * ATTACK_MIN_STEP_FRACTION
    multiplier = 0.0
    accepted = rejected = 0
    verdict = "iteration-cap"
    iters_run = 0

    for iteration in range(1, config.max_iters + 1):
        grad = context.loss_gradient(x, scores)
        if config.constraint_mode == "penalty" and multiplier > 0:
            grad = grad + multiplier * context.constraint_gradient(x)
        norm = float(np.linalg.norm(grad))
        flat = norm <= 1e-10
        if flat:
            if not config.random_direction:
                verdict = "stationary"
                break
            direction = rng.standard_normal(x.shape[0])
            direction /= np.linalg.norm(direction)
        else:
            direction = -grad / norm

        candidate = x + step * direction
        candidate_scores = context.saliency(candidate)
        if config.constraint_mode == "penalty":
            ok = int(context.model.predict(candidate)) == context.c
        else:
            ok = context.feasible(candidate)
        if flat and not (ok and context.loss(candidate_scores) < context.loss(scores)):
            verdict = "stationary"
            break

        iters_run = iteration
        if ok:
            x, scores = candidate, candidate_scores
            accepted += 1
            step = config.step_size
            if config.constraint_mode == "penalty":
                violation = context.prediction_change(x) ** 2 - config.pred_epsilon**2
                multiplier = max(0.0, multiplier + config.penalty_rate * violation)
                if violation <= 0:
                    last_feasible = x.copy()
            else:
                last_feasible = x.copy()
        else:
            rejected += 1
            if config.backtracking:
                step = max(0.5 * step, floor)

        p_traj.append(context.p_at_k(scores))
        obj_traj.append(context.objective(scores))
        if first_flip is None and p_traj[-1] < 1.0:
            first_flip = iteration
            if config.stop_at_first_flip:
                break

    if first_flip is not None:
        verdict = "flip"
    x_adv = last_feasible
    return AttackResult(
        x_adv=x_adv,
        p_at_k_trajectory=p_traj,
        first_flip_iter=first_flip,
        prediction_preserved=context.feasible(x_adv),
        iters_run=iters_run,
        objective_trajectory=obj_traj,
        verdict=verdict,
        method=config.method,
        accepted_steps=accepted,
        rejected_steps=rejected,
    )


def erattack(model: ScoreModel, x, config: AttackConfig = None, start=None) -> AttackResult:
    """Minimize the sum of gaps between the original top-k and the remaining features."""
    config = replace(config or AttackConfig(), method="erattack")
    return _descent(AttackContext(model, x, config), start)


def mse_attack(model: ScoreModel, x, config: AttackConfig = None, start=None) -> AttackResult:
    """Maximize the squared distance between the perturbed and the original saliency map."""
    config = replace(config or AttackConfig(), method="mse")
    return _descent(AttackContext(model, x, config), start)


def run_attack(
    model: ScoreModel,
    x,
    config: AttackConfig,
    moo_params: Optional[MooParams] = None,
    start=None,
) -> AttackResult:
    try:
        if config.method == "moo":
            from src.services.moo_attack import moo_tr_attack

            return moo_tr_attack(model, x, config, moo_params or MooParams())
        if config.method == "mse":
            return mse_attack(model, x, config, start)
        return erattack(model, x, config, start)
    except RankShieldException:
        raise
    except Exception as e:
        logger.error(f"{config.method} attack failed: {e}")
        raise AttackError(f"{config.method} attack failed: {e}", sys)


@dataclass
class FlipScan:
    """first-flip iterations per sample; max_iters + 1 marks no flip and None a failed sample."""

    iterations: List[Optional[int]]
    results: List[Optional[AttackResult]]
    failures: Dict[int, str]


def first_flip_scan(
    model: ScoreModel,
    features: np.ndarray,
    config: AttackConfig,
    moo_params: Optional[MooParams] = None,
    jobs: int = 1,
) -> FlipScan:
    batch = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if batch.shape[0] == 0:
        raise UsageError("first-flip scan needs a non-empty dataset", sys)
    seeds = derive_seeds(config.seed, batch.shape[0])
    sentinel = config.max_iters + 1

    def attack_one(index: int):
        try:
            return run_attack(model, batch[index], replace(config, seed=seeds[index]), moo_params), None
        except RankShieldException as e:
            logger.warning(f"Sample {index}: {config.method} attack failed: {e.raw_message}")
            return None, e.raw_message

    logger.info(f"Running {config.method} on {batch.shape[0]} samples (k={config.k}, step={config.step_size})")
    outcomes = parallel_map(attack_one, list(range(batch.shape[0])), jobs)
    iterations, results, failures = [], [], {}
    for index, (result, error) in enumerate(outcomes):
        results.append(result)
        if result is None:
            iterations.append(None)
            failures[index] = error
        else:
            iterations.append(result.first_flip_iter if result.first_flip_iter is not None else sentinel)
    return FlipScan(iterations, results, failures)
