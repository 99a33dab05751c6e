"""
Exact reverse-over-reverse parameter gradients of saliency terms, using torch
in float64. Only smooth (softplus) networks are supported: with ReLU the
second derivative is zero almost everywhere and undefined at the kinks.
"""

import sys
from typing import Optional

import numpy as np

from src.components.network import ClassArg, DenseNet, ParamGradient, as_batch, class_vector
from src.config.constants import SOFTPLUS_LINEAR_CUTOFF
from src.exceptions import CapabilityError, RankShieldException


def _import_torch():
    try:
        import torch
    except ImportError as e:
        raise CapabilityError(f"double_backprop mode needs torch: {e}", sys)
    return torch


def _torch_output(torch, net: DenseNet, params, inputs, classes):
    functional = torch.nn.functional
    a = inputs
    last = net.n_layers - 1
    for index in range(net.n_layers):
        weight, bias = params[2 * index], params[2 * index + 1]
        z = a @ weight.T + bias
        if index < last:
            a = functional.softplus(z, beta=net.activation.rho, threshold=SOFTPLUS_LINEAR_CUTOFF)
        else:
            a = z
    rows = torch.arange(inputs.shape[0])
    if net.head == "logit":
        return a[rows, classes]
    return torch.softmax(a, dim=1)[rows, classes]


def directional_param_gradient(
    net: DenseNet,
    x,
    u,
    c: ClassArg,
    weights: Optional[np.ndarray] = None,
) -> ParamGradient:
    """Exact parameter gradient of sum_b weights_b * u_b . grad_x f(x_b)_{c_b}."""
    if not net.activation.is_smooth:
        raise CapabilityError("double_backprop is only defined for softplus networks", sys)
    torch = _import_torch()
    batch, _ = as_batch(x, net.input_dim)
    classes = class_vector(c, batch.shape[0], net.n_classes)
    coeffs = np.ones(batch.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64).ravel()

    try:
        params = []
        for layer in net.layers:
            params.append(torch.tensor(np.array(layer.weight), dtype=torch.float64, requires_grad=True))
            params.append(torch.tensor(np.array(layer.bias), dtype=torch.float64, requires_grad=True))
        inputs = torch.tensor(batch, dtype=torch.float64, requires_grad=True)
        outputs = _torch_output(torch, net, params, inputs, torch.tensor(classes))
        (saliency,) = torch.autograd.grad(outputs.sum(), inputs, create_graph=True)
        directions = torch.tensor(np.atleast_2d(u), dtype=torch.float64)
        objective = (torch.tensor(coeffs, dtype=torch.float64) * (saliency * directions).sum(dim=1)).sum()
        grads = torch.autograd.grad(objective, params, allow_unused=True)
    except RankShieldException:
        raise
    except Exception as e:
        raise CapabilityError(f"double backprop failed: {e}", sys)

    weight_grads, bias_grads = [], []
    for index, layer in enumerate(net.layers):
        gw, gb = grads[2 * index], grads[2 * index + 1]
        weight_grads.append(np.zeros_like(layer.weight) if gw is None else gw.detach().numpy())
        bias_grads.append(np.zeros_like(layer.bias) if gb is None else gb.detach().numpy())
    return ParamGradient(weight_grads, bias_grads)
