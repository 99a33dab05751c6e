"""
Trust-region multi-objective explanation attack.

Every (salient, non-salient) pair l of the original ranking is one objective
h_l(x) to push below zero. Progress on objective l is measured with the merit

    phi_l(x, t) = |f(x) - f(x0)|_1 + |h_l(x) - t_l|

and each iteration linearizes f and h around x, then solves

    min alpha  s.t.  l_l(d) <= alpha for every active l,  |d|_inf <= radius

as a linear program, where l_l(d) is phi_l with f and h replaced by their
linearizations. A step is accepted when it keeps the prediction constraint,
no active merit increases and the realized reduction of the largest merit is
at least eta times the predicted one; otherwise the radius shrinks by gamma.
Merits before and after a step are compared under the same targets. After an
accepted step each target moves to

    t_l = h_l(x_new) - target_fraction * R_l

where R_l is the merit reduction objective l has realized over the accepted
steps so far. Targets start target_margin below zero. Objectives that are
locally critical while still positive are dropped.
"""

import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.components.curvature import batched_hvp
from src.components.lp_solver import LpProblem, solve_lp
from src.components.network import ScoreModel
from src.config.configuration import AttackConfig, MooParams
from src.exceptions import NumericError, RankShieldException
from src.logger import logger
from src.services.attacks import AttackContext, AttackResult


@dataclass
class Linearization:
    residual: np.ndarray
    jacobian: np.ndarray
    gaps: np.ndarray
    gap_gradients: np.ndarray


@dataclass
class MooState:
    x0: np.ndarray
    c: int
    pairs: List[Tuple[int, int]]
    targets: np.ndarray
    active: List[int]
    radius: float
    params: MooParams = field(default_factory=MooParams)


def _pair_directions(pairs: Sequence[Tuple[int, int]], n: int) -> np.ndarray:
    directions = np.zeros((len(pairs), n))
    for row, (i, j) in enumerate(pairs):
        directions[row, i], directions[row, j] = 1.0, -1.0
    return directions


def linearize(model: ScoreModel, x: np.ndarray, x0: np.ndarray, pairs: Sequence[Tuple[int, int]], c: int) -> Linearization:
    scores = model.input_gradient(x, c)
    idx = np.asarray(pairs, dtype=np.int64)
    gaps = scores[idx[:, 0]] - scores[idx[:, 1]]
    directions = _pair_directions(pairs, x.shape[0])
    gap_gradients = batched_hvp(model, np.repeat(x[None, :], len(pairs), axis=0), directions, c)
    return Linearization(
        residual=model.probabilities(x) - model.probabilities(x0),
        jacobian=model.probability_jacobian(x),
        gaps=gaps,
        gap_gradients=gap_gradients,
    )


def merit_value(residual: np.ndarray, gap: float, target: float) -> float:
    return float(np.sum(np.abs(residual)) + abs(gap - target))


def merit(model: ScoreModel, x, x0, pair: Tuple[int, int], target: float, c: Optional[int] = None) -> float:
    """phi_l(x, t) for the objective of one feature pair."""
    x = np.asarray(x, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    c = int(model.predict(x0)) if c is None else c
    scores = model.input_gradient(x, c)
    residual = model.probabilities(x) - model.probabilities(x0)
    return merit_value(residual, float(scores[pair[0]] - scores[pair[1]]), target)


def _merit_lp(
    residual: np.ndarray,
    jacobian: np.ndarray,
    gaps: np.ndarray,
    gap_gradients: np.ndarray,
    targets: np.ndarray,
    radius: float,
) -> Tuple[np.ndarray, float]:
    """
    Variables [d (n), s (C), r (L), alpha]. s bounds |residual + J d| and r_l
    bounds |h_l + g_l . d - t_l| componentwise; alpha >= sum(s) + r_l.
    """
    n_classes, n = jacobian.shape
    n_obj = gaps.shape[0]
    size = n + n_classes + n_obj + 1
    s0, r0, a_col = n, n + n_classes, n + n_classes + n_obj

    rows, rhs = [], []
    for cls in range(n_classes):
        for sign in (1.0, -1.0):
            row = np.zeros(size)
            row[:n] = sign * jacobian[cls]
            row[s0 + cls] = -1.0
            rows.append(row)
            rhs.append(-sign * residual[cls])
    for obj in range(n_obj):
        offset = gaps[obj] - targets[obj]
        for sign in (1.0, -1.0):
            row = np.zeros(size)
            row[:n] = sign * gap_gradients[obj]
            row[r0 + obj] = -1.0
            rows.append(row)
            rhs.append(-sign * offset)
        row = np.zeros(size)
        row[s0 : s0 + n_classes] = 1.0
        row[r0 + obj] = 1.0
        row[a_col] = -1.0
        rows.append(row)
        rhs.append(0.0)

    objective = np.zeros(size)
    objective[a_col] = 1.0
    lower = np.concatenate([np.full(n, -radius), np.zeros(n_classes + n_obj), [-np.inf]])
    upper = np.concatenate([np.full(n, radius), np.full(n_classes + n_obj + 1, np.inf)])
    result = solve_lp(LpProblem(objective, np.vstack(rows), np.asarray(rhs), lower=lower, upper=upper))
    return result.x[:n], float(result.x[a_col])


def criticality_from(lin: Linearization, index: int, target: float, radius: float) -> float:
    base = merit_value(lin.residual, lin.gaps[index], target)
    _, best = _merit_lp(
        lin.residual,
        lin.jacobian,
        lin.gaps[index : index + 1],
        lin.gap_gradients[index : index + 1],
        np.array([target]),
        radius,
    )
    return max(0.0, base - best)


def criticality(
    model: ScoreModel,
    x,
    x0,
    pair: Tuple[int, int],
    target: float,
    radius: float,
    c: Optional[int] = None,
) -> float:
    """Largest decrease of the linearized merit of one objective inside the trust region."""
    if not radius > 0:
        raise NumericError(f"trust radius must be positive, got {radius}", sys)
    x = np.asarray(x, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    c = int(model.predict(x0)) if c is None else c
    lin = linearize(model, x, x0, [tuple(pair)], c)
    return criticality_from(lin, 0, target, radius)


def tr_moo_step_from(lin: Linearization, active: Sequence[int], targets: np.ndarray, radius: float) -> Tuple[np.ndarray, float]:
    idx = np.asarray(active, dtype=np.int64)
    return _merit_lp(lin.residual, lin.jacobian, lin.gaps[idx], lin.gap_gradients[idx], targets[idx], radius)


def tr_moo_step(model: ScoreModel, x, state: MooState) -> Tuple[np.ndarray, float]:
    """Joint descent direction d and the optimal alpha of the trust-region subproblem."""
    x = np.asarray(x, dtype=np.float64)
    lin = linearize(model, x, state.x0, state.pairs, state.c)
    return tr_moo_step_from(lin, state.active, state.targets, state.radius)


def moo_tr_attack(model: ScoreModel, x, config: AttackConfig, params: Optional[MooParams] = None) -> AttackResult:
    params = params or MooParams()
    context = AttackContext(model, x, config)
    pairs = context.pairs
    labels = [f"{i}-{j}" for i, j in pairs]
    state = MooState(
        x0=context.x0,
        c=context.c,
        pairs=pairs,
        targets=np.full(len(pairs), -params.target_margin),
        active=list(range(len(pairs))),
        radius=params.initial_radius or config.step_size,
        params=params,
    )
    max_radius = state.radius
    progress = np.zeros(len(pairs))

    x_cur = context.x0.copy()
    lin = linearize(model, x_cur, state.x0, pairs, state.c)
    merits = np.array([merit_value(lin.residual, g, t) for g, t in zip(lin.gaps, state.targets)])
    merit_traj: Dict[str, List[float]] = {label: [float(m)] for label, m in zip(labels, merits)}
    merit_steps: Dict[str, List[Tuple[float, float]]] = {label: [] for label in labels}
    p_traj = [1.0]
    obj_traj = [float(np.sum(lin.gaps))]
    first_flip = None
    accepted = rejected = 0
    iters_run = 0
    verdict = "iteration-cap"

    try:
        for iteration in range(1, config.max_iters + 1):
            still_active = []
            for obj in state.active:
                chi = criticality_from(lin, obj, state.targets[obj], state.radius)
                if chi <= params.crit_epsilon and lin.gaps[obj] > 0:
                    logger.debug(f"Objective {labels[obj]} is critical (chi={chi:.2e}); removed")
                    continue
                still_active.append(obj)
            state.active = still_active
            if not state.active:
                verdict = "all-critical"
                break

            iters_run = iteration
            d, alpha = tr_moo_step_from(lin, state.active, state.targets, state.radius)
            current = merits[state.active]
            predicted = float(np.max(current) - alpha)
            candidate = x_cur + d

            step_ok = False
            if predicted > 1e-14 and context.feasible(candidate):
                cand_lin = linearize(model, candidate, state.x0, pairs, state.c)
                cand_merits = np.array(
                    [merit_value(cand_lin.residual, g, t) for g, t in zip(cand_lin.gaps, state.targets)]
                )
                realized = float(np.max(current) - np.max(cand_merits[state.active]))
                ratio = realized / predicted
                non_increasing = bool(np.all(cand_merits[state.active] <= current + 1e-12))
                step_ok = ratio >= params.eta and non_increasing

            if step_ok:
                for obj in state.active:
                    merit_steps[labels[obj]].append((float(merits[obj]), float(cand_merits[obj])))
                    progress[obj] += max(0.0, float(merits[obj] - cand_merits[obj]))
                    state.targets[obj] = cand_lin.gaps[obj] - params.target_fraction * progress[obj]
                x_cur, lin = candidate, cand_lin
                merits = np.array([merit_value(lin.residual, g, t) for g, t in zip(lin.gaps, state.targets)])
                for obj in state.active:
                    merit_traj[labels[obj]].append(float(merits[obj]))
                accepted += 1
                if ratio >= params.expand_ratio:
                    state.radius = min(max_radius, 2.0 * state.radius)
            else:
                rejected += 1
                state.radius *= params.gamma
                if state.radius < params.radius_floor:
                    logger.info(f"Trust radius {state.radius:.2e} fell below the floor {params.radius_floor:.2e}")
                    verdict = "radius-floor"
                    p_traj.append(p_traj[-1])
                    obj_traj.append(obj_traj[-1])
                    break

            scores = model.input_gradient(x_cur, state.c)
            p_traj.append(context.p_at_k(scores))
            obj_traj.append(float(np.sum(lin.gaps)))
            if p_traj[-1] < 1.0:
                first_flip = iteration
                verdict = "flip"
                break
    except RankShieldException:
        raise
    except Exception as e:
        logger.error(f"MOO attack failed at iteration {iters_run}: {e}")
        raise NumericError(f"MOO attack failed at iteration {iters_run}: {e}", sys)

    logger.info(
        f"MOO attack finished: verdict={verdict}, iterations={iters_run}, accepted={accepted}, "
        f"rejected={rejected}, active={len(state.active)}/{len(pairs)}"
    )
    return AttackResult(
        x_adv=x_cur,
        p_at_k_trajectory=p_traj,
        first_flip_iter=first_flip,
        prediction_preserved=context.feasible(x_cur),
        iters_run=iters_run,
        objective_trajectory=obj_traj,
        verdict=verdict,
        method="moo",
        accepted_steps=accepted,
        rejected_steps=rejected,
        merit_trajectories=merit_traj,
        merit_steps=merit_steps,
        final_targets={label: float(t) for label, t in zip(labels, state.targets)},
    )
