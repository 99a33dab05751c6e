"""
Hessian-free second-order primitives on the explained output f(x)_c.

Everything here is built from first-order gradients: Hessian-vector products
are central differences of input gradients, and parameter gradients of
directional derivatives are central differences of parameter gradients.
"""

import sys
from typing import Optional, Tuple

import numpy as np

from src.components.network import ClassArg, DenseNet, ParamGradient, ScoreModel, as_batch, class_vector
from src.config.constants import (
    EXACT_HESSIAN_MAX_DIM,
    GAP_FD_STEP,
    HVP_STEP_SCALE,
    POWER_ITERATIONS,
    POWER_TOLERANCE,
)
from src.exceptions import CapabilityError, IndexOutOfRangeError, UsageError
from src.logger import logger

GAP_MODES = ("finite_difference", "double_backprop")


def _finite_difference_steps(batch: np.ndarray, step: Optional[float], scale: float) -> np.ndarray:
    if step is not None:
        if not step > 0:
            raise UsageError(f"finite-difference step must be positive, got {step}", sys)
        return np.full((batch.shape[0], 1), float(step))
    return scale * np.maximum(1.0, np.linalg.norm(batch, axis=1, keepdims=True))


def _check_feature(index: int, n: int, name: str = "feature") -> int:
    if not 0 <= int(index) < n:
        raise IndexOutOfRangeError(f"{name} index {index} out of range [0, {n})", sys)
    return int(index)


def batched_hvp(model: ScoreModel, x, v, c: ClassArg, step: Optional[float] = None) -> np.ndarray:
    """
    H(x_b) v_b for every row, where H is the input Hessian of the explained output.

    Uses (grad(x + s v_hat) - grad(x - s v_hat)) / (2 s) * |v| with
    s = 1e-3 * max(1, |x|) unless a step is given.
    """
    batch, _ = as_batch(x, model.input_dim)
    directions = np.atleast_2d(np.asarray(v, dtype=np.float64))
    if directions.shape != batch.shape:
        raise UsageError(f"direction shape {directions.shape} does not match input shape {batch.shape}", sys)
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise UsageError("Hessian-vector product needs a non-zero direction", sys)
    classes = class_vector(c, batch.shape[0], model.n_classes)
    steps = _finite_difference_steps(batch, step, HVP_STEP_SCALE)
    offset = steps * directions / norms
    grads = model.input_gradient(np.vstack([batch + offset, batch - offset]), np.concatenate([classes, classes]))
    size = batch.shape[0]
    return (grads[:size] - grads[size:]) / (2.0 * steps) * norms


def hvp(model: ScoreModel, x, v, c: int, step: Optional[float] = None) -> np.ndarray:
    """Hessian-vector product at a single input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise UsageError("hvp expects a single input; use batched_hvp for batches", sys)
    return batched_hvp(model, x[None, :], np.asarray(v, dtype=np.float64)[None, :], c, step)[0]


def hessian_row(model: ScoreModel, x, i: int, c: int, step: Optional[float] = None) -> np.ndarray:
    """Row i of the input Hessian, i.e. the gradient of the saliency score I(x)_i."""
    n = model.input_dim
    i = _check_feature(i, n)
    return hvp(model, x, np.eye(n)[i], c, step)


def exact_hessian(model: ScoreModel, x, c: int, step: Optional[float] = None) -> np.ndarray:
    """Dense n x n input Hessian assembled row by row and symmetrized."""
    n = model.input_dim
    if n > EXACT_HESSIAN_MAX_DIM:
        raise CapabilityError(f"exact Hessian is limited to n <= {EXACT_HESSIAN_MAX_DIM}, got n = {n}", sys)
    point, _ = as_batch(x, n)
    if point.shape[0] != 1:
        raise UsageError("exact_hessian expects a single input", sys)
    rows = batched_hvp(model, np.repeat(point, n, axis=0), np.eye(n), c, step)
    return 0.5 * (rows + rows.T)


def power_iteration(
    model: ScoreModel,
    x,
    c: ClassArg,
    iters: int = POWER_ITERATIONS,
    tol: float = POWER_TOLERANCE,
    seed: int = 0,
    step: Optional[float] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Largest absolute eigenvalue of the input Hessian for each row of a batch.

    :return: (norms of shape (B,), unit vectors of shape (B, n) at which they were reached).
    """
    if iters < 1:
        raise UsageError(f"power iteration needs iters >= 1, got {iters}", sys)
    batch, _ = as_batch(x, model.input_dim)
    size = batch.shape[0]
    classes = class_vector(c, size, model.n_classes)

    rng = np.random.default_rng(seed)
    vectors = rng.standard_normal(batch.shape)
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    norms = np.zeros(size)
    active = np.ones(size, dtype=bool)

    for _ in range(iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        products = batched_hvp(model, batch[idx], vectors[idx], classes[idx], step)
        lengths = np.linalg.norm(products, axis=1)
        norms[idx] = lengths
        flat = lengths < 1e-12
        if np.any(flat):
            norms[idx[flat]] = 0.0
            active[idx[flat]] = False
        moving = idx[~flat]
        if moving.size == 0:
            continue
        updated = products[~flat] / lengths[~flat, None]
        # negative eigenvalues flip the sign every iteration
        change = np.minimum(
            np.linalg.norm(updated - vectors[moving], axis=1),
            np.linalg.norm(updated + vectors[moving], axis=1),
        )
        vectors[moving] = updated
        active[moving[change < tol]] = False
    return norms, vectors


def hessian_spectral_norm(
    model: ScoreModel,
    x,
    c: int,
    iters: int = POWER_ITERATIONS,
    tol: float = POWER_TOLERANCE,
    seed: int = 0,
) -> float:
    """Power-iteration estimate of the Hessian spectral norm at one input."""
    x = np.asarray(x, dtype=np.float64)
    norms, _ = power_iteration(model, x[None, :] if x.ndim == 1 else x, c, iters, tol, seed)
    if norms[0] == 0.0:
        logger.warning("Hessian-vector products vanished during power iteration; spectral norm is 0")
    return float(norms[0])


def directional_param_gradient(
    net: DenseNet,
    x,
    u,
    c: ClassArg,
    weights: Optional[np.ndarray] = None,
    step: Optional[float] = None,
) -> ParamGradient:
    """
    Parameter gradient of sum_b weights_b * u_b . grad_x f(x_b)_{c_b}.

    The directional derivative is differentiated by central differences of
    parameter gradients along u_hat, scaled by |u|. Rows with u_b = 0 contribute nothing.
    """
    batch, _ = as_batch(x, net.input_dim)
    directions = np.atleast_2d(np.asarray(u, dtype=np.float64))
    if directions.shape != batch.shape:
        raise UsageError(f"direction shape {directions.shape} does not match input shape {batch.shape}", sys)
    classes = class_vector(c, batch.shape[0], net.n_classes)
    coeffs = np.ones(batch.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64).ravel()

    norms = np.linalg.norm(directions, axis=1)
    keep = (norms > 0) & (coeffs != 0)
    if not np.any(keep):
        return ParamGradient.zeros_like(net)
    batch, directions, classes = batch[keep], directions[keep], classes[keep]
    norms, coeffs = norms[keep], coeffs[keep]

    steps = _finite_difference_steps(batch, step, GAP_FD_STEP)
    offset = steps * directions / norms[:, None]
    scale = coeffs * norms / (2.0 * steps[:, 0])
    return net.output_param_gradient(
        np.vstack([batch + offset, batch - offset]),
        np.concatenate([classes, classes]),
        weights=np.concatenate([scale, -scale]),
    )


def param_gradient_of_gap(
    net: DenseNet,
    x,
    i: int,
    j: int,
    c: int,
    mode: str = "finite_difference",
    step: Optional[float] = None,
) -> ParamGradient:
    """Gradient with respect to the network parameters of h(x, i, j) = I(x)_i - I(x)_j."""
    n = net.input_dim
    i, j = _check_feature(i, n), _check_feature(j, n)
    if i == j:
        raise UsageError("gap parameter gradient needs two distinct features", sys)
    if mode not in GAP_MODES:
        raise UsageError(f"unknown mode '{mode}', expected one of {GAP_MODES}", sys)

    direction = np.zeros(n)
    direction[i], direction[j] = 1.0, -1.0
    point = np.asarray(x, dtype=np.float64)
    if mode == "double_backprop":
        from src.components.double_backprop import directional_param_gradient as exact_directional

        return exact_directional(net, point[None, :], direction[None, :], c)
    return directional_param_gradient(net, point[None, :], direction[None, :], c, step=step)


def bilinear_param_gradient(
    net: DenseNet,
    x,
    r,
    v,
    c: ClassArg,
    weights: Optional[np.ndarray] = None,
    step: Optional[float] = None,
) -> ParamGradient:
    """
    Parameter gradient of sum_b weights_b * r_b^T H(x_b) v_b with r and v held
    fixed, from the four-point stencil of the mixed second directional derivative.
    """
    batch, _ = as_batch(x, net.input_dim)
    left = np.atleast_2d(np.asarray(r, dtype=np.float64))
    right = np.atleast_2d(np.asarray(v, dtype=np.float64))
    if left.shape != batch.shape or right.shape != batch.shape:
        raise UsageError("bilinear directions must match the input batch shape", sys)
    classes = class_vector(c, batch.shape[0], net.n_classes)
    coeffs = np.ones(batch.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64).ravel()

    left_norms = np.linalg.norm(left, axis=1)
    right_norms = np.linalg.norm(right, axis=1)
    keep = (left_norms > 0) & (right_norms > 0) & (coeffs != 0)
    if not np.any(keep):
        return ParamGradient.zeros_like(net)
    batch, classes, coeffs = batch[keep], classes[keep], coeffs[keep]
    left_unit = left[keep] / left_norms[keep, None]
    right_unit = right[keep] / right_norms[keep, None]

    steps = _finite_difference_steps(batch, step, HVP_STEP_SCALE)
    plus = steps * (left_unit + right_unit)
    minus = steps * (left_unit - right_unit)
    scale = coeffs * left_norms[keep] * right_norms[keep] / (4.0 * steps[:, 0] ** 2)
    return net.output_param_gradient(
        np.vstack([batch + plus, batch + minus, batch - minus, batch - plus]),
        np.concatenate([classes] * 4),
        weights=np.concatenate([scale, -scale, -scale, scale]),
    )
