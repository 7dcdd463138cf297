"""Small dense-network engine with hand-written backpropagation.

A model is split into a feature extractor (every layer but the last, each
followed by ReLU) and a linear classifier whose row ``k`` is the neuron for
class ``k``.  Everything runs in float64.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, NumericalError

Layer = tuple[np.ndarray, np.ndarray]
PrototypeSet = dict[int, np.ndarray]


class Mask(enum.Enum):
    """Which parameter blocks a training step may touch."""

    FULL = "full"
    CLASSIFIER = "classifier"
    EXTRACTOR = "extractor"

    @property
    def trains_classifier(self) -> bool:
        return self is not Mask.EXTRACTOR

    @property
    def trains_extractor(self) -> bool:
        return self is not Mask.CLASSIFIER


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=np.float64)
    out.flags.writeable = False
    return out


def _layer(W, b) -> Layer:
    W, b = _frozen(W), _frozen(b)
    if W.ndim != 2 or b.ndim != 1 or b.shape[0] != W.shape[0]:
        raise ConfigurationError(f"bad layer shapes W{W.shape} b{b.shape}")
    return W, b


@dataclass(frozen=True)
class ModelParams:
    extractor: tuple[Layer, ...]
    classifier: Layer
    activation: str = "relu"

    def __post_init__(self):
        if self.activation != "relu":
            raise ConfigurationError(f"unsupported activation {self.activation!r}")
        ext = tuple(_layer(W, b) for W, b in self.extractor)
        clf = _layer(*self.classifier)
        if not ext:
            raise ConfigurationError("model needs at least one extractor layer")
        for (W_prev, _), (W_next, _) in zip(ext, ext[1:]):
            if W_prev.shape[0] != W_next.shape[1]:
                raise ConfigurationError(
                    f"extractor layers do not chain: {W_prev.shape} -> {W_next.shape}"
                )
        if ext[-1][0].shape[0] != clf[0].shape[1]:
            raise ConfigurationError(
                f"feature dim {ext[-1][0].shape[0]} != classifier input {clf[0].shape[1]}"
            )
        for a in _flatten(ext, clf):
            if not np.isfinite(a).all():
                raise NumericalError("model parameters contain non-finite values")
        object.__setattr__(self, "extractor", ext)
        object.__setattr__(self, "classifier", clf)

    @classmethod
    def trusted(cls, extractor, classifier) -> "ModelParams":
        """Build without validation or copying, for hot loops whose inputs
        came out of checked arithmetic on an existing model."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "extractor", tuple(extractor))
        object.__setattr__(obj, "classifier", classifier)
        object.__setattr__(obj, "activation", "relu")
        return obj

    @property
    def input_dim(self) -> int:
        return self.extractor[0][0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.classifier[0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.classifier[0].shape[0]

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays, extractor first, W before b."""
        return _flatten(self.extractor, self.classifier)

    def with_extractor(self, extractor) -> "ModelParams":
        return ModelParams(tuple(extractor), self.classifier)

    def with_classifier(self, classifier) -> "ModelParams":
        return ModelParams(self.extractor, classifier)

    def neuron(self, k: int) -> np.ndarray:
        """Row ``k`` of the classifier weights with its bias appended."""
        W, b = self.classifier
        return np.append(W[k], b[k])


# Gradients share the parameter tree layout.
Gradients = ModelParams


def _flatten(extractor, classifier) -> list[np.ndarray]:
    out = []
    for W, b in extractor:
        out += [W, b]
    out += [classifier[0], classifier[1]]
    return out


def glorot_layer(fan_in: int, fan_out: int, rng: np.random.Generator) -> Layer:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in)), np.zeros(fan_out)


def init_dense(sizes: Sequence[int], rng: np.random.Generator) -> list[Layer]:
    return [glorot_layer(i, o, rng) for i, o in zip(sizes[:-1], sizes[1:])]


def init_model(input_dim, hidden_dims, feature_dim, num_classes, rng) -> ModelParams:
    sizes = [input_dim, *hidden_dims, feature_dim]
    extractor = init_dense(sizes, rng)
    classifier = glorot_layer(feature_dim, num_classes, rng)
    return ModelParams(tuple(extractor), classifier)


def dense_forward(layers, X: np.ndarray, relu_last: bool):
    """Batched forward pass; returns output and the cache for ``dense_backward``.

    Every layer except possibly the last is followed by ReLU.
    """
    acts = [X]
    pre = []
    a = X
    n = len(layers)
    for j, (W, b) in enumerate(layers):
        z = a @ W.T + b
        pre.append(z)
        a = np.maximum(z, 0.0) if (j < n - 1 or relu_last) else z
        acts.append(a)
    return a, (acts, pre)


def dense_backward(layers, cache, dout: np.ndarray, relu_last: bool, need_input_grad=False):
    acts, pre = cache
    grads: list[Layer] = [None] * len(layers)  # type: ignore[list-item]
    d = dout
    n = len(layers)
    for j in range(n - 1, -1, -1):
        W, _ = layers[j]
        if j < n - 1 or relu_last:
            d = d * (pre[j] > 0.0)
        grads[j] = (d.T @ acts[j], d.sum(axis=0))
        if j > 0 or need_input_grad:
            d = d @ W
    return grads, (d if need_input_grad else None)


def _check_dim(got: int, want: int, what: str):
    if got != want:
        raise ConfigurationError(f"{what}: expected length {want}, got {got}")


def forward_features(extractor, x: np.ndarray) -> np.ndarray:
    """Feature vector(s) for a single input or a batch of inputs."""
    x = np.asarray(x, dtype=np.float64)
    _check_dim(x.shape[-1], extractor[0][0].shape[1], "input")
    single = x.ndim == 1
    out, _ = dense_forward(extractor, np.atleast_2d(x), relu_last=True)
    return out[0] if single else out


def forward_logits(classifier: Layer, h: np.ndarray) -> np.ndarray:
    W, b = classifier
    h = np.asarray(h, dtype=np.float64)
    _check_dim(h.shape[-1], W.shape[1], "feature")
    return h @ W.T + b


def predict(model: ModelParams, X: np.ndarray) -> np.ndarray:
    return forward_logits(model.classifier, forward_features(model.extractor, X))


def zeros_like(model: ModelParams) -> Gradients:
    return ModelParams(
        tuple((np.zeros_like(W), np.zeros_like(b)) for W, b in model.extractor),
        (np.zeros_like(model.classifier[0]), np.zeros_like(model.classifier[1])),
    )


def sgd_step(model: ModelParams, grads: Gradients, lr: float, mask: Mask = Mask.FULL) -> ModelParams:
    """p <- p - lr * g on the blocks selected by ``mask``; others are reused as-is."""
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    extractor = model.extractor
    classifier = model.classifier
    if mask.trains_extractor:
        extractor = tuple(
            (W - lr * gW, b - lr * gb)
            for (W, b), (gW, gb) in zip(model.extractor, grads.extractor)
        )
    if mask.trains_classifier:
        (W, b), (gW, gb) = model.classifier, grads.classifier
        classifier = (W - lr * gW, b - lr * gb)
    touched = []
    if mask.trains_extractor:
        touched += [a for layer in extractor for a in layer]
    if mask.trains_classifier:
        touched += list(classifier)
    # one reduction per array; a sum is non-finite iff some entry is
    if not all(np.isfinite(np.add.reduce(a, axis=None)) for a in touched):
        if not all(np.isfinite(a).all() for a in touched):
            raise NumericalError("SGD update produced non-finite parameters")
    return ModelParams.trusted(extractor, classifier)


def param_count(block) -> int:
    """Number of scalar parameters (biases included) in a model, layer list,
    single layer, prototype set or plain array."""
    if isinstance(block, ModelParams):
        return sum(a.size for a in block.arrays())
    if isinstance(block, np.ndarray):
        return int(block.size)
    if isinstance(block, Mapping):
        return sum(int(np.asarray(v).size) for v in block.values())
    if isinstance(block, tuple) and len(block) == 2 and isinstance(block[0], np.ndarray):
        return int(block[0].size + block[1].size)
    return sum(param_count(b) for b in block)


def dense_param_count(sizes: Sequence[int]) -> int:
    return sum(i * o + o for i, o in zip(sizes[:-1], sizes[1:]))
