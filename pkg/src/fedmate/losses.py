"""Loss functions for local training, each with an analytic gradient.

Adversarial terms use the non-saturating GAN form: discriminators minimise
binary cross-entropy toward "global = 1, local = 0", and the local classifier,
acting as generator, minimises BCE toward 1 on its own outputs.  All BCE terms
are evaluated from the discriminator's pre-sigmoid score through softplus so
they stay finite for any input.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, NumericalError
from .nn import (
    Gradients,
    Layer,
    Mask,
    ModelParams,
    PrototypeSet,
    dense_backward,
    dense_forward,
    init_dense,
)

logger = logging.getLogger(__name__)

# Number of times a term was dropped because its class set was empty.
skip_notices: Counter = Counter()


def _notice(key: str, msg: str):
    skip_notices[key] += 1
    logger.debug(msg)


_colsum = np.add.reduce  # skips the ndarray.sum wrapper in hot loops


def _all_finite(*arrays) -> bool:
    # cheap test on the sums first; only an overflowing sum needs the full scan
    if all(np.isfinite(_colsum(a, axis=None)) for a in arrays):
        return True
    return all(np.isfinite(a).all() for a in arrays)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    # tanh form is overflow-free for any input
    return 0.5 * np.tanh(0.5 * np.asarray(x, dtype=np.float64)) + 0.5


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.maximum.reduce(z, axis=-1, keepdims=True)
    return z - np.log(_colsum(np.exp(z), axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


# --------------------------------------------------------------------------
# cross-entropy and center loss

def cross_entropy(logits, y: int) -> float:
    """-log softmax(logits)[y] with log-sum-exp stabilisation."""
    return float(-log_softmax(np.asarray(logits, dtype=np.float64))[y])


def cross_entropy_grad(Z: np.ndarray, y: np.ndarray, reduce: str = "mean"):
    """Batched cross-entropy.  Returns (loss, dL/dZ) for ``reduce`` in {mean, sum}."""
    y = np.asarray(y)
    n = Z.shape[0]
    logp = log_softmax(Z)
    rows = np.arange(n)
    loss = -logp[rows, y].sum()
    dZ = np.exp(logp)
    dZ[rows, y] -= 1.0
    if reduce == "mean":
        loss, dZ = loss / n, dZ / n
    return float(loss), dZ


def prototype_table(global_P: PrototypeSet):
    """Dense (presence mask, C x K matrix) view of a prototype set."""
    if not global_P:
        return np.zeros(0, dtype=bool), np.zeros((0, 0))
    rows = max(global_P) + 1
    have = np.zeros(rows, dtype=bool)
    have[list(global_P)] = True
    table = np.zeros((rows, len(next(iter(global_P.values())))))
    for k, p in global_P.items():
        table[k] = p
    return have, table


def center_loss_grad(H: np.ndarray, y: np.ndarray, global_P: PrototypeSet, table=None):
    """Mean squared distance from each feature to its class's global prototype.

    Samples whose class has no global prototype are left out.  ``table`` is
    an optional precomputed ``prototype_table(global_P)``.  Returns
    (loss, dL/dH).
    """
    y = np.asarray(y, dtype=np.int64)
    dH = np.zeros_like(H)
    have, P = table if table is not None else prototype_table(global_P)
    keep = np.zeros(len(y), dtype=bool)
    inside = y < have.size
    keep[inside] = have[y[inside]]
    m = int(np.count_nonzero(keep))
    if m == 0:
        _notice("center_empty", "center loss: no sample has a global prototype")
        return 0.0, dH
    if m == len(y):
        diff = H - P[y]
        loss = float(np.vdot(diff, diff) / m)
        dH = (2.0 / m) * diff
        return loss, dH
    diff = H[keep] - P[y[keep]]
    loss = float(np.vdot(diff, diff) / m)
    dH[keep] = (2.0 / m) * diff
    return loss, dH


def center_loss(features, global_P: PrototypeSet) -> float:
    """``features`` is a sequence of (feature vector, label) pairs."""
    features = list(features)
    if not features:
        return 0.0
    H = np.stack([np.asarray(f, dtype=np.float64) for f, _ in features])
    y = np.array([c for _, c in features])
    return center_loss_grad(H, y, global_P)[0]


def kappa(t: float, t_max: float) -> float:
    """Adversarial weight 1 - t/t_max, clamped to [0, 1]."""
    if t_max <= 0:
        raise ConfigurationError(f"t_max must be positive, got {t_max}")
    return min(1.0, max(0.0, 1.0 - t / t_max))


# --------------------------------------------------------------------------
# discriminators

@dataclass(frozen=True)
class Discriminator:
    """|C| -> 2|C| -> 1 MLP with ReLU hidden layer; ``prob`` applies the sigmoid."""

    layers: tuple[Layer, ...]
    role: str = "prototype"

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    def score(self, Z: np.ndarray) -> np.ndarray:
        s, _ = dense_forward(self.layers, np.atleast_2d(Z), relu_last=False)
        return s[:, 0]

    def prob(self, Z: np.ndarray) -> np.ndarray:
        return sigmoid(self.score(Z))

    def step(self, grads, lr: float) -> "Discriminator":
        layers = tuple((W - lr * gW, b - lr * gb) for (W, b), (gW, gb) in zip(self.layers, grads))
        if not _all_finite(*(a for layer in layers for a in layer)):
            raise NumericalError(f"{self.role} discriminator update is non-finite")
        return Discriminator(layers, self.role)


def init_discriminator(num_classes: int, rng: np.random.Generator, role: str = "prototype") -> Discriminator:
    layers = init_dense([num_classes, 2 * num_classes, 1], rng)
    return Discriminator(tuple(layers), role)


def _bce_sum(D: Discriminator, Z: np.ndarray, target, need_input_grad: bool):
    """Sum of BCE(D(z), target) over rows of Z, plus gradients.

    ``target`` is a scalar or one 0/1 label per row.  Returns
    (loss, grads wrt D layers, dL/dZ or None).
    """
    if len(D.layers) == 2:
        return _bce_sum_2layer(D.layers, Z, target, need_input_grad)
    s, cache = dense_forward(D.layers, Z, relu_last=False)
    s = s[:, 0]
    loss = softplus((1.0 - 2.0 * np.asarray(target)) * s).sum()
    ds = sigmoid(s) - target
    grads, dZ = dense_backward(D.layers, cache, ds[:, None], relu_last=False, need_input_grad=need_input_grad)
    return float(loss), grads, dZ


def _bce_sum_2layer(layers, Z, target, need_input_grad):
    # unrolled version of the generic path for the hidden-layer discriminator
    (W1, b1), (W2, b2) = layers
    pre = Z @ W1.T + b1
    h = np.maximum(pre, 0.0)
    s = h @ W2[0] + b2[0]
    loss = np.logaddexp(0.0, (1.0 - 2.0 * np.asarray(target)) * s).sum()
    ds = sigmoid(s) - target
    dh = np.multiply.outer(ds, W2[0])
    dh *= pre > 0.0
    grads = [(dh.T @ Z, _colsum(dh)), ((ds @ h)[None, :], _colsum(ds)[None])]
    dZ = dh @ W1 if need_input_grad else None
    return float(loss), grads, dZ


def _zero_disc_grads(D: Discriminator):
    return [(np.zeros_like(W), np.zeros_like(b)) for W, b in D.layers]


def _stack(P: PrototypeSet, keys) -> np.ndarray:
    if not keys:
        return np.zeros((0, 0))
    return np.stack([np.asarray(P[k], dtype=np.float64) for k in keys])


def _logits(classifier: Layer, H: np.ndarray) -> np.ndarray:
    W, b = classifier
    return H @ W.T + b


def _classifier_grad_from_logits(dZ: np.ndarray, H: np.ndarray):
    return dZ.T @ H, _colsum(dZ)


class AdversarialTerms:
    """Prototype matrices for one client round, stacked once.

    Within a classifier phase the prototypes and the global classifier are
    fixed, so the discriminator and CCF terms only differ in the local
    classifier and the discriminator weights.  Real and fake rows go through
    each discriminator in a single pass.
    """

    def __init__(self, global_P: PrototypeSet, local_P: PrototypeSet,
                 global_classifier: Optional[Layer] = None):
        self.keys_g = sorted(global_P)
        self.keys_l = sorted(local_P)
        self.keys_shared = sorted(set(local_P) & set(global_P))
        self.Pg = _stack(global_P, self.keys_g)
        self.Pl = _stack(local_P, self.keys_l)
        self.y_l = np.array(self.keys_l, dtype=np.int64)
        n = len(self.keys_shared)
        # real rows first, then fake rows
        self.pr_input = np.concatenate([_stack(global_P, self.keys_shared),
                                        _stack(local_P, self.keys_shared)]) if n else None
        self.pr_target = np.concatenate([np.ones(n), np.zeros(n)])
        self.Zg_real = _logits(global_classifier, self.Pg) if (global_classifier is not None and self.keys_g) else None

    def disc_pr(self, D: Discriminator, classifier: Layer):
        if self.pr_input is None:
            _notice("disc_pr_empty", "prototype discriminator: no shared classes")
            return 0.0, _zero_disc_grads(D)
        loss, g, _ = _bce_sum(D, _logits(classifier, self.pr_input), self.pr_target, False)
        return loss, g

    def disc_cl(self, D: Discriminator, classifier: Layer):
        if not self.keys_g:
            _notice("disc_cl_empty", "classification discriminator: no global prototypes")
            return 0.0, _zero_disc_grads(D)
        if self.Zg_real is None:
            raise ConfigurationError("classification discriminator needs the global classifier")
        n = len(self.keys_g)
        Z = np.concatenate([self.Zg_real, _logits(classifier, self.Pg)])
        loss, g, _ = _bce_sum(D, Z, np.concatenate([np.ones(n), np.zeros(n)]), False)
        return loss, g

    def generator(self, D_pr: Discriminator, D_cl: Discriminator, classifier: Layer, Zl=None):
        """Generator loss of the classifier: local prototypes scored by D_pr,
        global prototypes scored by D_cl, both toward "global"."""
        W, _ = classifier
        dW = np.zeros_like(W)
        db = np.zeros(W.shape[0])
        loss = 0.0
        if self.keys_l:
            Zl = _logits(classifier, self.Pl) if Zl is None else Zl
            l, _, dZ = _bce_sum(D_pr, Zl, 1.0, True)
            gW, gb = _classifier_grad_from_logits(dZ, self.Pl)
            loss, dW, db = loss + l, dW + gW, db + gb
        if self.keys_g:
            l, _, dZ = _bce_sum(D_cl, _logits(classifier, self.Pg), 1.0, True)
            gW, gb = _classifier_grad_from_logits(dZ, self.Pg)
            loss, dW, db = loss + l, dW + gW, db + gb
        return loss, (dW, db)

    def ccf(self, classifier: Layer, D_pr: Discriminator, D_cl: Discriminator, k: float):
        """Prototype cross-entropy over local classes plus ``k`` times the
        generator loss.  Returns (loss, (dW, db))."""
        W, _ = classifier
        dW = np.zeros_like(W)
        db = np.zeros(W.shape[0])
        loss = 0.0
        Zl = None
        if self.keys_l:
            Zl = _logits(classifier, self.Pl)
            loss, dZ = cross_entropy_grad(Zl, self.y_l, reduce="sum")
            dW, db = _classifier_grad_from_logits(dZ, self.Pl)
        if k > 0.0:
            adv, (aW, ab) = self.generator(D_pr, D_cl, classifier, Zl)
            loss += k * adv
            dW = dW + k * aW
            db = db + k * ab
        return loss, (dW, db)


def disc_pr_loss_grad(D: Discriminator, classifier: Layer, global_P: PrototypeSet, local_P: PrototypeSet):
    """Prototype discriminator loss over the local classes that also have a
    global prototype.  The classifier is held fixed; gradients are for D."""
    return AdversarialTerms(global_P, local_P).disc_pr(D, classifier)


def disc_pr_loss(D, classifier, global_P, local_P) -> float:
    return disc_pr_loss_grad(D, classifier, global_P, local_P)[0]


def disc_cl_loss_grad(D: Discriminator, classifier: Layer, global_classifier: Layer, global_P: PrototypeSet):
    """Classification discriminator loss: global prototypes through the global
    classifier are "real", through the local classifier "fake"."""
    return AdversarialTerms(global_P, {}, global_classifier).disc_cl(D, classifier)


def disc_cl_loss(D, classifier, global_classifier, global_P) -> float:
    return disc_cl_loss_grad(D, classifier, global_classifier, global_P)[0]


def generator_adv_loss_grad(D_pr: Discriminator, D_cl: Discriminator, classifier: Layer,
                            local_P: PrototypeSet, global_P: PrototypeSet):
    """Generator loss of the local classifier against both discriminators.
    Returns (loss, (dW, db))."""
    return AdversarialTerms(global_P, local_P).generator(D_pr, D_cl, classifier)


def generator_adv_loss(D_pr, D_cl, classifier, local_P, global_P) -> float:
    return generator_adv_loss_grad(D_pr, D_cl, classifier, local_P, global_P)[0]


def ccf_loss_grad(classifier: Layer, local_P: PrototypeSet, global_P: PrototypeSet,
                  D_pr: Discriminator, D_cl: Discriminator, t: float, t_max: float):
    """Prototype cross-entropy over local classes plus kappa(t) times the
    generator loss.  Returns (loss, (dW, db))."""
    return AdversarialTerms(global_P, local_P).ccf(classifier, D_pr, D_cl, kappa(t, t_max))


def ccf_loss(classifier, local_P, global_P, D_pr, D_cl, t, t_max) -> float:
    return ccf_loss_grad(classifier, local_P, global_P, D_pr, D_cl, t, t_max)[0]


# --------------------------------------------------------------------------
# phase objectives

@dataclass
class LossSpec:
    """Selects a loss composition and the parameters it trains.

    ``kind`` is one of ``plain_ce``, ``classifier_phase`` or ``extractor_phase``.
    ``lam`` is lambda_c for the classifier phase and lambda_e for the extractor
    phase.  The CCF / center terms are only added when global prototypes are
    present, which reproduces the round-0 bootstrap.
    """

    kind: str = "plain_ce"
    lam: float = 0.0
    t: int = 0
    t_max: int = 1
    global_classifier: Optional[Layer] = None
    global_prototypes: Optional[PrototypeSet] = None
    local_prototypes: Optional[PrototypeSet] = None
    disc_pr: Optional[Discriminator] = None
    disc_cl: Optional[Discriminator] = None
    mask: Optional[Mask] = None

    def __post_init__(self):
        if self.kind not in ("plain_ce", "classifier_phase", "extractor_phase"):
            raise ConfigurationError(f"unknown loss composition {self.kind!r}")
        if self.lam < 0:
            raise ConfigurationError("loss weight must be nonnegative")
        if self.mask is None:
            self.mask = {
                "plain_ce": Mask.FULL,
                "classifier_phase": Mask.CLASSIFIER,
                "extractor_phase": Mask.EXTRACTOR,
            }[self.kind]

    @property
    def has_globals(self) -> bool:
        return bool(self.global_prototypes)

    def prototype_table(self):
        # cached: the prototypes are fixed for the lifetime of a spec
        cached = self.__dict__.get("_table")
        if cached is None or cached[0] is not self.global_prototypes:
            cached = (self.global_prototypes, prototype_table(self.global_prototypes or {}))
            self.__dict__["_table"] = cached
        return cached[1]


def classifier_phase_grad(classifier: Layer, H: np.ndarray, y: np.ndarray, spec: LossSpec,
                          terms: Optional[AdversarialTerms] = None, need_feature_grad: bool = True):
    """Batch-mean cross-entropy plus lambda_c * CCF, on precomputed features.

    Returns (loss, (dW, db), dL/dH) where dL/dH covers the cross-entropy term
    only (the CCF term does not depend on the batch).  ``terms`` may carry
    prototype stacks prepared once for the phase.
    """
    Z = _logits(classifier, H)
    loss, dZ = cross_entropy_grad(Z, y)
    dW, db = _classifier_grad_from_logits(dZ, H)
    if spec.kind == "classifier_phase" and spec.lam > 0.0 and spec.has_globals:
        if spec.disc_pr is None or spec.disc_cl is None:
            raise ConfigurationError("classifier phase needs both discriminators")
        if terms is None:
            terms = AdversarialTerms(spec.global_prototypes, spec.local_prototypes or {})
        c, (cW, cb) = terms.ccf(classifier, spec.disc_pr, spec.disc_cl, kappa(spec.t, spec.t_max))
        loss += spec.lam * c
        dW = dW + spec.lam * cW
        db = db + spec.lam * cb
    dH = dZ @ classifier[0] if need_feature_grad else None
    return loss, (dW, db), dH


def compute_gradients(model: ModelParams, batch, loss_spec: LossSpec):
    """Loss and analytic gradients of the selected composition.

    ``batch`` is ``(X, y)``.  Blocks excluded by ``loss_spec.mask`` get exact
    zero gradients.
    """
    X, y = batch
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    mask = loss_spec.mask
    H, cache = dense_forward(model.extractor, X, relu_last=True)
    if mask.trains_classifier:
        loss, (dW, db), dH = classifier_phase_grad(
            model.classifier, H, y, loss_spec, need_feature_grad=mask.trains_extractor)
    else:
        loss, dZ = cross_entropy_grad(_logits(model.classifier, H), y)
        dH = dZ @ model.classifier[0]
    if loss_spec.kind == "extractor_phase" and loss_spec.lam > 0.0 and loss_spec.has_globals:
        c, dHc = center_loss_grad(H, y, loss_spec.global_prototypes, loss_spec.prototype_table())
        loss += loss_spec.lam * c
        dH = dH + loss_spec.lam * dHc
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite {loss_spec.kind} loss")
    if mask.trains_extractor:
        extractor, _ = dense_backward(model.extractor, cache, dH, relu_last=True)
    else:
        extractor = [(np.zeros_like(W), np.zeros_like(b)) for W, b in model.extractor]
    if mask.trains_classifier:
        classifier = (dW, db)
    else:
        W, b = model.classifier
        classifier = (np.zeros_like(W), np.zeros_like(b))
    return loss, Gradients.trusted(tuple(extractor), classifier)


def classifier_phase_loss(model: ModelParams, batch, context: LossSpec) -> float:
    spec = LossSpec(**{**context.__dict__, "kind": "classifier_phase", "mask": Mask.CLASSIFIER})
    return compute_gradients(model, batch, spec)[0]


def extractor_phase_loss(model: ModelParams, batch, context: LossSpec) -> float:
    spec = LossSpec(**{**context.__dict__, "kind": "extractor_phase", "mask": Mask.EXTRACTOR})
    return compute_gradients(model, batch, spec)[0]


def plain_ce_loss(model: ModelParams, batch) -> float:
    return compute_gradients(model, batch, LossSpec())[0]
