"""Server-side aggregation.

Prototypes are fused with per-class weights blended from three views
(sample counts, agreement with the class centroid, and how confidently the
previous global classifier recognises each prototype).  Views that disagree
with the other two, as measured by Jensen-Shannon divergence, get less say.
The classifier is merged neuron by neuron with per-class sample weights and
then nudged toward the new prototypes.  Extractors are averaged only on
rounds where clients sent them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .client import Broadcast, ClientUpdate
from .errors import ConfigurationError
from .losses import cross_entropy_grad, softmax
from .nn import Layer, PrototypeSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AggregationWeights:
    clients: tuple[int, ...]
    alpha: np.ndarray
    l: np.ndarray
    beta: np.ndarray
    view_weights: np.ndarray
    final: np.ndarray


@dataclass(frozen=True)
class CftSchedule:
    q: float
    x: float
    skip_stride: int
    upload_rounds: frozenset

    def uploads_at(self, t: int) -> bool:
        return t in self.upload_rounds


@dataclass(frozen=True)
class GlobalState:
    round: int
    extractor: tuple[Layer, ...]
    classifier: Layer
    prev_classifier: Optional[Layer] = None
    prototypes: Optional[PrototypeSet] = None
    # whether ``extractor`` was (re)built this round and must be broadcast
    extractor_fresh: bool = True
    weights: dict = field(default_factory=dict)


def weighted_sum(weights: Sequence[float], arrays: Sequence[np.ndarray]) -> np.ndarray:
    """sum_i w_i * a_i accumulated in the given order.

    Both class-wise and whole-model averaging go through here so that equal
    weights give bit-identical results.
    """
    acc = np.zeros_like(np.asarray(arrays[0], dtype=np.float64))
    for w, a in zip(weights, arrays):
        acc = acc + w * a
    return acc


def sample_weights(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0:
        raise ConfigurationError("no clients for this class")
    if (counts <= 0).any():
        raise ConfigurationError("sample counts must be positive")
    return counts / counts.sum()


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        logger.debug("zero-norm prototype or centroid; similarity set to 0")
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def centroid_weights(prototypes: Sequence[np.ndarray]) -> np.ndarray:
    """(1 + cos(P_i, centroid)) / 2, normalised over clients."""
    P = np.stack([np.asarray(p, dtype=np.float64) for p in prototypes])
    anchor = P.mean(axis=0)
    score = np.array([(1.0 + _cosine(p, anchor)) / 2.0 for p in P])
    total = score.sum()
    if total == 0.0:
        return np.full(len(P), 1.0 / len(P))
    return score / total


def prediction_weights(prototypes: Sequence[np.ndarray], prev_classifier: Layer, k: int) -> np.ndarray:
    """Softmax probability of class ``k`` under the previous global
    classifier, normalised over clients."""
    W, b = prev_classifier
    P = np.stack([np.asarray(p, dtype=np.float64) for p in prototypes])
    score = softmax(P @ W.T + b)[:, k]
    total = score.sum()
    if total == 0.0:
        return np.full(len(P), 1.0 / len(P))
    return score / total


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    if (p < 0).any() or (q < 0).any():
        raise ValueError("distributions must be nonnegative")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("distributions must sum to 1")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def mps_view_weights(alpha, l, beta) -> np.ndarray:
    """softmax(-d) where d_s is the summed JS divergence of view s to the
    other two views."""
    views = [alpha, l, beta]
    js = {}
    for a in range(3):
        for b in range(a + 1, 3):
            js[a, b] = js[b, a] = js_divergence(views[a], views[b])
    d = np.array([sum(js[s, o] for o in range(3) if o != s) for s in range(3)])
    return softmax(-d)


def class_weights(counts, prototypes, prev_classifier: Optional[Layer], k: int,
                  clients: Sequence[int]) -> AggregationWeights:
    alpha = sample_weights(counts)
    l = centroid_weights(prototypes)
    beta = alpha.copy() if prev_classifier is None else prediction_weights(prototypes, prev_classifier, k)
    w = mps_view_weights(alpha, l, beta)
    final = w[0] * alpha + w[1] * l + w[2] * beta
    return AggregationWeights(tuple(clients), alpha, l, beta, w, final)


def aggregate_prototypes(updates: Sequence[ClientUpdate], prev_classifier: Optional[Layer]):
    """Global prototype per class as a weighted mean of the client prototypes.

    With ``prev_classifier=None`` (first aggregation) the prediction view is
    replaced by the sample-count view.  Returns (prototypes, weights per class).
    """
    classes = sorted({k for u in updates for k in u.prototypes})
    out: PrototypeSet = {}
    weights = {}
    for k in classes:
        holders = [u for u in updates if k in u.prototypes]
        aw = class_weights(
            [u.per_class_counts[k] for u in holders],
            [u.prototypes[k] for u in holders],
            prev_classifier, k, [u.client_id for u in holders],
        )
        out[k] = weighted_sum(aw.final, [u.prototypes[k] for u in holders])
        weights[k] = aw
    return out, weights


def aggregate_classifier_classwise(updates: Sequence[ClientUpdate], prev_classifier: Layer) -> Layer:
    """Neuron k is the per-class-sample-weighted mean of the clients' neuron k
    over clients holding class k; classes nobody holds keep the old neuron."""
    W_prev, b_prev = prev_classifier
    W = np.array(W_prev, dtype=np.float64)
    b = np.array(b_prev, dtype=np.float64)
    for k in range(W.shape[0]):
        holders = [u for u in updates if u.per_class_counts[k] > 0]
        if not holders:
            continue
        a = sample_weights([u.per_class_counts[k] for u in holders])
        W[k] = weighted_sum(a, [u.classifier[0][k] for u in holders])
        b[k] = weighted_sum(a, [u.classifier[1][k] for u in holders])
    return W, b


def finetune_classifier(classifier: Layer, prototypes: PrototypeSet, lr: float, steps: int) -> Layer:
    """``steps`` gradient steps of mean cross-entropy on {(P_k, k)}."""
    W, b = (np.array(a, dtype=np.float64) for a in classifier)
    if lr == 0.0 or steps <= 0 or not prototypes:
        return W, b
    keys = sorted(prototypes)
    P = np.stack([prototypes[k] for k in keys])
    y = np.array(keys)
    for _ in range(steps):
        _, dZ = cross_entropy_grad(P @ W.T + b, y)
        W = W - lr * (dZ.T @ P)
        b = b - lr * dZ.sum(axis=0)
    return W, b


def aggregate_extractors(updates: Sequence[ClientUpdate], current=None):
    """Total-sample-weighted mean of the uploaded extractors; ``current`` if none."""
    carriers = [u for u in updates if u.extractor is not None]
    if not carriers:
        return current
    a = sample_weights([u.total_count for u in carriers])
    out = []
    for j in range(len(carriers[0].extractor)):
        W = weighted_sum(a, [u.extractor[j][0] for u in carriers])
        b = weighted_sum(a, [u.extractor[j][1] for u in carriers])
        out.append((W, b))
    return tuple(out)


def cft_schedule(par_extractor: int, par_prototypes: int, x: float, T: int) -> CftSchedule:
    """Extractor upload rounds: every t in 1..T that is not a multiple of ceil(x*q)."""
    if par_prototypes <= 0:
        raise ConfigurationError("prototype parameter count must be positive")
    if x <= 0:
        raise ConfigurationError("CFT multiplier must be positive")
    q = par_extractor / par_prototypes
    stride = math.ceil(x * q)
    if stride < 2:
        raise ConfigurationError(f"CFT stride {stride} < 2 would never upload the extractor")
    rounds = frozenset(t for t in range(1, T + 1) if t % stride != 0)
    return CftSchedule(q=q, x=x, skip_stride=stride, upload_rounds=rounds)


def initial_state(extractor, classifier) -> GlobalState:
    return GlobalState(round=0, extractor=tuple(extractor), classifier=classifier)


def make_broadcast(state: GlobalState) -> Broadcast:
    return Broadcast(
        round=state.round,
        global_classifier=state.classifier,
        global_prototypes=state.prototypes,
        global_extractor=state.extractor if state.extractor_fresh else None,
    )


def server_round(state: GlobalState, updates: Sequence[ClientUpdate], lr: float = 0.01,
                 steps: int = 5) -> GlobalState:
    """Aggregate one round of uploads into the next global state.

    ``updates`` should be in ascending client-id order.
    """
    if not updates:
        logger.warning("round %d: no client updates, carrying state forward", state.round)
        return GlobalState(
            round=state.round + 1, extractor=state.extractor, classifier=state.classifier,
            prev_classifier=state.prev_classifier, prototypes=state.prototypes,
            extractor_fresh=False,
        )
    # the classifier that produced this round's broadcast is the "previous"
    # one for the prediction view; the very first aggregation has none worth trusting
    prev = state.classifier if state.round > 0 else None
    prototypes, weights = aggregate_prototypes(updates, prev)
    classifier = aggregate_classifier_classwise(updates, state.classifier)
    classifier = finetune_classifier(classifier, prototypes, lr, steps)
    extractor = aggregate_extractors(updates)
    fresh = extractor is not None
    return GlobalState(
        round=state.round + 1,
        extractor=extractor if fresh else state.extractor,
        classifier=classifier,
        prev_classifier=state.classifier,
        prototypes=prototypes,
        extractor_fresh=fresh,
        weights=weights,
    )
