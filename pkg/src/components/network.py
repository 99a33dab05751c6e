"""
Dense feedforward classifier with hand-written backpropagation.

Holds the model f(x, w) whose explanations are studied: forward pass, input and
parameter gradients through the softmax head, and the closed-form reference
models used as oracles. Every primitive accepts a single input of shape (n,)
or a batch of shape (B, n).
"""

import json
import os
import sys
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, log_softmax, softmax

from src.config.constants import MODEL_FORMAT_VERSION, SOFTPLUS_LINEAR_CUTOFF, SOFTPLUS_RHO
from src.exceptions import (
    IndexOutOfRangeError,
    IngestionError,
    RankShieldException,
    ShapeError,
    UsageError,
)
from src.logger import logger

HEADS = ("probability", "logit")
ClassArg = Union[int, Sequence[int], np.ndarray]


def as_batch(x, input_dim: int) -> Tuple[np.ndarray, bool]:
    """
    Validate an input and return it as a (B, n) float64 batch.

    :param x: vector of shape (n,) or matrix of shape (B, n).
    :param input_dim: expected feature count n.
    :return: (batch, single) where single tells whether x was a vector.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr, single = arr[None, :], True
    elif arr.ndim == 2:
        single = False
    else:
        raise ShapeError(f"expected a vector or a batch, got array with {arr.ndim} dimensions", sys)
    if arr.shape[1] != input_dim:
        raise ShapeError(f"expected {input_dim} features, got {arr.shape[1]}", sys)
    if not np.all(np.isfinite(arr)):
        raise ShapeError("input contains NaN or infinite values", sys)
    return arr, single


def class_vector(c: ClassArg, batch_size: int, n_classes: int) -> np.ndarray:
    """Broadcast a class index (or per-row indices) to an int vector of length B."""
    classes = np.asarray(c)
    if classes.ndim == 0:
        classes = np.full(batch_size, int(classes), dtype=np.int64)
    else:
        classes = classes.astype(np.int64).ravel()
        if classes.shape[0] != batch_size:
            raise ShapeError(f"got {classes.shape[0]} class indices for a batch of {batch_size}", sys)
    if np.any(classes < 0) or np.any(classes >= n_classes):
        raise IndexOutOfRangeError(f"class index out of range [0, {n_classes})", sys)
    return classes


@dataclass(frozen=True)
class Activation:
    """Hidden-layer nonlinearity: ReLU or Softplus(x; rho) = ln(1 + e^(rho x)) / rho."""

    kind: str = "softplus"
    rho: float = SOFTPLUS_RHO

    def __post_init__(self):
        if self.kind not in ("relu", "softplus"):
            raise UsageError(f"unknown activation kind '{self.kind}'", sys)
        if self.kind == "softplus" and not (np.isfinite(self.rho) and self.rho > 0):
            raise UsageError(f"softplus sharpness must be positive, got {self.rho}", sys)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        t = self.rho * z
        # above the cutoff softplus equals the identity to double precision
        safe = np.minimum(t, SOFTPLUS_LINEAR_CUTOFF)
        return np.where(t > SOFTPLUS_LINEAR_CUTOFF, z, np.log1p(np.exp(safe)) / self.rho)

    def derivative(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            return (z > 0).astype(np.float64)
        return expit(self.rho * z)

    @property
    def is_smooth(self) -> bool:
        return self.kind == "softplus"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rho": float(self.rho)}

    @classmethod
    def from_dict(cls, payload: dict) -> "Activation":
        return cls(kind=payload.get("kind", "softplus"), rho=float(payload.get("rho", SOFTPLUS_RHO)))


@dataclass(frozen=True)
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class ForwardTrace:
    """
    Everything the backward pass needs. activations[0] is the input and
    activations[l] the output of hidden layer l; pre_activations[-1] are the
    logits. Arrays are squeezed to vectors when the input was a single vector.
    """

    pre_activations: List[np.ndarray]
    activations: List[np.ndarray]
    logits: np.ndarray
    probabilities: np.ndarray
    single: bool = False


@dataclass
class ParamGradient:
    """Per-layer weight and bias gradients, shape-matched to the owning DenseNet."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @classmethod
    def zeros_like(cls, net: "DenseNet") -> "ParamGradient":
        return cls(
            weights=[np.zeros_like(layer.weight) for layer in net.layers],
            biases=[np.zeros_like(layer.bias) for layer in net.layers],
        )

    def _combine(self, other: "ParamGradient", sign: float) -> "ParamGradient":
        return ParamGradient(
            weights=[a + sign * b for a, b in zip(self.weights, other.weights)],
            biases=[a + sign * b for a, b in zip(self.biases, other.biases)],
        )

    def __add__(self, other: "ParamGradient") -> "ParamGradient":
        return self._combine(other, 1.0)

    def __sub__(self, other: "ParamGradient") -> "ParamGradient":
        return self._combine(other, -1.0)

    def scale(self, factor: float) -> "ParamGradient":
        return ParamGradient(
            weights=[factor * w for w in self.weights],
            biases=[factor * b for b in self.biases],
        )

    def __mul__(self, factor: float) -> "ParamGradient":
        return self.scale(factor)

    __rmul__ = __mul__

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def norm(self) -> float:
        return float(np.linalg.norm(self.flatten()))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flatten())))


class ScoreModel(ABC):
    """
    A differentiable classifier whose explained output is either the class
    probability f(x)_c (head="probability") or the pre-softmax logit
    (head="logit"). Subclasses provide logits and the input vector-Jacobian
    product of the logits; everything else is derived here.
    """

    head: str = "probability"

    @property
    @abstractmethod
    def input_dim(self) -> int:
        ...

    @property
    @abstractmethod
    def n_classes(self) -> int:
        ...

    @abstractmethod
    def logits(self, x) -> np.ndarray:
        ...

    @abstractmethod
    def logit_vjp(self, x, cotangent: np.ndarray) -> np.ndarray:
        """Return sum_k cotangent[:, k] * grad_x logit_k for every row of the batch, shape (B, n)."""

    @abstractmethod
    def with_head(self, head: str) -> "ScoreModel":
        ...

    def probabilities(self, x) -> np.ndarray:
        return softmax(self.logits(x), axis=-1)

    def predict(self, x) -> Union[int, np.ndarray]:
        """Argmax over probabilities; np.argmax breaks ties by the lowest class index."""
        labels = np.argmax(self.probabilities(x), axis=-1)
        return int(labels) if np.ndim(labels) == 0 else labels

    def output_cotangent(self, logits: np.ndarray, classes: np.ndarray) -> np.ndarray:
        """Gradient of the explained output with respect to the logits, shape (B, C)."""
        logits = np.atleast_2d(logits)
        onehot = np.eye(self.n_classes)[classes]
        if self.head == "logit":
            return onehot
        p = softmax(logits, axis=1)
        p_c = p[np.arange(p.shape[0]), classes]
        return p_c[:, None] * (onehot - p)

    def output(self, x, c: ClassArg) -> Union[float, np.ndarray]:
        """The explained scalar: f(x)_c or logit_c(x)."""
        batch, single = as_batch(x, self.input_dim)
        classes = class_vector(c, batch.shape[0], self.n_classes)
        logits = np.atleast_2d(self.logits(batch))
        scores = logits if self.head == "logit" else softmax(logits, axis=1)
        values = scores[np.arange(batch.shape[0]), classes]
        return float(values[0]) if single else values

    def input_gradient(self, x, c: ClassArg) -> np.ndarray:
        """Exact gradient of the explained output with respect to x."""
        batch, single = as_batch(x, self.input_dim)
        classes = class_vector(c, batch.shape[0], self.n_classes)
        cotangent = self.output_cotangent(self.logits(batch), classes)
        grads = self.logit_vjp(batch, cotangent)
        return grads[0] if single else grads

    def probability_jacobian(self, x) -> np.ndarray:
        """Jacobian of the probability vector at a single input, shape (C, n)."""
        batch, _ = as_batch(x, self.input_dim)
        if batch.shape[0] != 1:
            raise ShapeError("probability_jacobian expects a single input", sys)
        p = softmax(np.atleast_2d(self.logits(batch)), axis=1)[0]
        n_classes = self.n_classes
        cotangent = p[:, None] * (np.eye(n_classes) - p[None, :])
        repeated = np.repeat(batch, n_classes, axis=0)
        return self.logit_vjp(repeated, cotangent)


class DenseNet(ScoreModel):
    """
    Fully connected classifier: hidden layers apply the activation, the last
    layer produces logits and the probability head is a softmax.
    """

    def __init__(
        self,
        layers: Sequence[Union[DenseLayer, Tuple[np.ndarray, np.ndarray]]],
        activation: Optional[Activation] = None,
        head: str = "probability",
    ):
        if len(layers) == 0:
            raise ShapeError("a DenseNet needs at least one layer", sys)
        if head not in HEADS:
            raise UsageError(f"unknown head '{head}', expected one of {HEADS}", sys)

        built = []
        for index, layer in enumerate(layers):
            weight, bias = (layer.weight, layer.bias) if isinstance(layer, DenseLayer) else layer
            weight = np.array(weight, dtype=np.float64)
            bias = np.array(bias, dtype=np.float64).ravel()
            if weight.ndim != 2 or bias.shape[0] != weight.shape[0]:
                raise ShapeError(f"layer {index}: weight {weight.shape} and bias {bias.shape} do not match", sys)
            if built and built[-1].d_out != weight.shape[1]:
                raise ShapeError(
                    f"layer {index}: expects {weight.shape[1]} inputs but previous layer has {built[-1].d_out} outputs",
                    sys,
                )
            if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
                raise ShapeError(f"layer {index} has non-finite parameters", sys)
            weight.setflags(write=False)
            bias.setflags(write=False)
            built.append(DenseLayer(weight=weight, bias=bias))

        self.layers: Tuple[DenseLayer, ...] = tuple(built)
        self.activation = activation if activation is not None else Activation()
        self.head = head

    @classmethod
    def initialize(
        cls,
        layer_sizes: Sequence[int],
        activation: Optional[Activation] = None,
        seed: int = 0,
        head: str = "probability",
    ) -> "DenseNet":
        """
        Build a network with weights uniform in +-sqrt(6 / fan_in) and zero biases.

        :param layer_sizes: [n, hidden_1, ..., C].
        """
        if len(layer_sizes) < 2 or any(int(size) < 1 for size in layer_sizes):
            raise UsageError(f"invalid layer sizes {list(layer_sizes)}", sys)
        rng = np.random.default_rng(seed)
        layers = []
        for d_in, d_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = np.sqrt(6.0 / d_in)
            layers.append((rng.uniform(-bound, bound, size=(d_out, d_in)), np.zeros(d_out)))
        return cls(layers, activation=activation, head=head)

    @property
    def input_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def n_classes(self) -> int:
        return self.layers[-1].d_out

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def with_head(self, head: str) -> "DenseNet":
        return DenseNet(self.layers, activation=self.activation, head=head)

    def forward(self, x) -> ForwardTrace:
        batch, single = as_batch(x, self.input_dim)
        activations = [batch]
        pre_activations = []
        a = batch
        last = self.n_layers - 1
        for index, layer in enumerate(self.layers):
            z = a @ layer.weight.T + layer.bias
            pre_activations.append(z)
            if index < last:
                a = self.activation(z)
                activations.append(a)
        logits = pre_activations[-1]
        probabilities = softmax(logits, axis=1)
        if single:
            pre_activations = [z[0] for z in pre_activations]
            activations = [a[0] for a in activations]
            logits, probabilities = logits[0], probabilities[0]
        return ForwardTrace(pre_activations, activations, logits, probabilities, single)

    def logits(self, x) -> np.ndarray:
        return self.forward(x).logits

    def backward(
        self, trace: ForwardTrace, grad_logits: np.ndarray, with_params: bool = True
    ) -> Tuple[Optional[ParamGradient], np.ndarray]:
        """
        Reverse pass for a cotangent on the logits.

        :return: (parameter gradient summed over the batch or None, input gradient (B, n)).
        """
        delta = np.atleast_2d(grad_logits)
        weight_grads: List[np.ndarray] = [None] * self.n_layers
        bias_grads: List[np.ndarray] = [None] * self.n_layers
        for index in range(self.n_layers - 1, -1, -1):
            layer = self.layers[index]
            if with_params:
                a_prev = np.atleast_2d(trace.activations[index])
                weight_grads[index] = delta.T @ a_prev
                bias_grads[index] = delta.sum(axis=0)
            delta = delta @ layer.weight
            if index > 0:
                delta = delta * self.activation.derivative(np.atleast_2d(trace.pre_activations[index - 1]))
        params = ParamGradient(weight_grads, bias_grads) if with_params else None
        return params, delta

    def logit_vjp(self, x, cotangent: np.ndarray) -> np.ndarray:
        trace = self.forward(np.atleast_2d(x))
        _, grads = self.backward(trace, cotangent, with_params=False)
        return grads

    def input_gradient(self, x, c: ClassArg) -> np.ndarray:
        batch, single = as_batch(x, self.input_dim)
        classes = class_vector(c, batch.shape[0], self.n_classes)
        trace = self.forward(batch)
        _, grads = self.backward(trace, self.output_cotangent(trace.logits, classes), with_params=False)
        return grads[0] if single else grads

    def output_param_gradient(self, x, c: ClassArg, weights: Optional[np.ndarray] = None) -> ParamGradient:
        """Gradient with respect to the parameters of sum_b weights_b * f(x_b)_{c_b}."""
        batch, _ = as_batch(x, self.input_dim)
        classes = class_vector(c, batch.shape[0], self.n_classes)
        trace = self.forward(batch)
        cotangent = self.output_cotangent(trace.logits, classes)
        if weights is not None:
            cotangent = cotangent * np.asarray(weights, dtype=np.float64).reshape(-1, 1)
        params, _ = self.backward(trace, cotangent)
        return params

    def _check_labels(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        batch, _ = as_batch(x, self.input_dim)
        labels = np.atleast_1d(np.asarray(y)).astype(np.int64)
        if batch.shape[0] == 0:
            raise UsageError("empty batch", sys)
        if labels.shape[0] != batch.shape[0]:
            raise ShapeError(f"{batch.shape[0]} inputs but {labels.shape[0]} labels", sys)
        if np.any(labels < 0) or np.any(labels >= self.n_classes):
            raise IndexOutOfRangeError(f"label outside [0, {self.n_classes})", sys)
        return batch, labels

    def loss(self, x, y) -> float:
        """Mean cross-entropy."""
        batch, labels = self._check_labels(x, y)
        logits = np.atleast_2d(self.forward(batch).logits)
        return float(-np.mean(log_softmax(logits, axis=1)[np.arange(labels.shape[0]), labels]))

    def param_gradient(self, x, y) -> ParamGradient:
        """Gradient of the mean cross-entropy over the batch."""
        batch, labels = self._check_labels(x, y)
        trace = self.forward(batch)
        p = np.atleast_2d(trace.probabilities)
        grad_logits = (p - np.eye(self.n_classes)[labels]) / batch.shape[0]
        params, _ = self.backward(trace, grad_logits)
        return params

    def parameters(self) -> ParamGradient:
        """The parameters packed in the gradient container (handy for optimizer state)."""
        return ParamGradient(
            weights=[np.array(layer.weight) for layer in self.layers],
            biases=[np.array(layer.bias) for layer in self.layers],
        )

    def with_parameters(self, params: ParamGradient) -> "DenseNet":
        return DenseNet(list(zip(params.weights, params.biases)), activation=self.activation, head=self.head)

    def to_dict(self) -> dict:
        return {
            "version": MODEL_FORMAT_VERSION,
            "input_dim": self.input_dim,
            "n_classes": self.n_classes,
            "activation": self.activation.to_dict(),
            "head": self.head,
            "layers": [{"w": layer.weight.tolist(), "b": layer.bias.tolist()} for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DenseNet":
        version = payload.get("version")
        if version != MODEL_FORMAT_VERSION:
            raise IngestionError(f"unsupported model format version {version}", sys)
        net = cls(
            [(np.array(layer["w"], dtype=np.float64), np.array(layer["b"], dtype=np.float64)) for layer in payload["layers"]],
            activation=Activation.from_dict(payload.get("activation", {})),
            head=payload.get("head", "probability"),
        )
        if net.input_dim != payload.get("input_dim", net.input_dim) or net.n_classes != payload.get("n_classes", net.n_classes):
            raise IngestionError("declared input_dim/n_classes do not match the layers", sys)
        return net

    def save(self, path: str) -> str:
        try:
            directory = os.path.dirname(path)
            if directory:
                os.makedirs(directory, exist_ok=True)
            with open(path, "w", encoding="utf-8") as handle:
                json.dump(self.to_dict(), handle)
            logger.info(f"Saved model ({self.n_layers} layers, n={self.input_dim}, C={self.n_classes}) to {path}")
            return path
        except Exception as e:
            logger.error(f"Error saving model to {path}: {e}")
            raise IngestionError(f"Error saving model to {path}: {e}", sys)

    @classmethod
    def load(cls, path: str) -> "DenseNet":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                payload = json.load(handle)
            net = cls.from_dict(payload)
            logger.info(f"Loaded model from {path}")
            return net
        except RankShieldException:
            raise
        except Exception as e:
            logger.error(f"Error loading model from {path}: {e}")
            raise IngestionError(f"Error loading model from {path}: {e}", sys)


class QuadraticScoreModel(ScoreModel):
    """
    Two-class reference model with logits (s(x), 0) and
    s(x) = 0.5 x^T Q x + b^T x + c0. Its input Hessian is constant, which
    makes it the closed-form oracle for every second-order routine.
    """

    def __init__(self, quadratic, linear, offset: float = 0.0, head: str = "logit"):
        q = np.array(quadratic, dtype=np.float64)
        b = np.array(linear, dtype=np.float64).ravel()
        if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] != b.shape[0]:
            raise ShapeError(f"quadratic {q.shape} and linear {b.shape} terms do not match", sys)
        if head not in HEADS:
            raise UsageError(f"unknown head '{head}', expected one of {HEADS}", sys)
        self.quadratic = q
        self.linear = b
        self.offset = float(offset)
        self.head = head
        self._sym = 0.5 * (q + q.T)

    @property
    def input_dim(self) -> int:
        return self.linear.shape[0]

    @property
    def n_classes(self) -> int:
        return 2

    def with_head(self, head: str) -> "QuadraticScoreModel":
        return QuadraticScoreModel(self.quadratic, self.linear, self.offset, head=head)

    def score(self, x) -> np.ndarray:
        batch, _ = as_batch(x, self.input_dim)
        return 0.5 * np.einsum("bi,ij,bj->b", batch, self.quadratic, batch) + batch @ self.linear + self.offset

    def logits(self, x) -> np.ndarray:
        batch, single = as_batch(x, self.input_dim)
        s = self.score(batch)
        out = np.stack([s, np.zeros_like(s)], axis=1)
        return out[0] if single else out

    def logit_vjp(self, x, cotangent: np.ndarray) -> np.ndarray:
        batch, _ = as_batch(np.atleast_2d(x), self.input_dim)
        cotangent = np.atleast_2d(cotangent)
        return cotangent[:, :1] * (batch @ self._sym + self.linear)


def linear_score_model(weights: Sequence[float], bias: float = 0.0, head: str = "logit") -> DenseNet:
    """Two-class linear model with logits (w.x + bias, 0), built as a one-layer DenseNet."""
    w = np.array(weights, dtype=np.float64).ravel()
    layer = (np.vstack([w, np.zeros_like(w)]), np.array([bias, 0.0]))
    return DenseNet([layer], head=head)
