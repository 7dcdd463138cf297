"""Client side of a round: adopt the broadcast, train classifier and
extractor in alternation, recompute prototypes, assemble the upload."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .data import LabeledDataset
from .errors import ConfigurationError, NumericalError
from .losses import (
    AdversarialTerms,
    Discriminator,
    LossSpec,
    classifier_phase_grad,
    compute_gradients,
    cross_entropy_grad,
    init_discriminator,
)
from .nn import Layer, Mask, ModelParams, PrototypeSet, dense_forward, forward_features, sgd_step
from .seeding import child_int, child_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClientState:
    id: int
    model: ModelParams
    disc_pr: Discriminator
    disc_cl: Discriminator
    train_data: LabeledDataset
    rng_seed: int

    def __post_init__(self):
        if self.disc_pr.input_dim != self.model.num_classes or self.disc_cl.input_dim != self.model.num_classes:
            raise ConfigurationError("discriminator input must equal the number of classes")


@dataclass(frozen=True)
class Broadcast:
    round: int
    global_classifier: Layer
    global_prototypes: Optional[PrototypeSet] = None
    global_extractor: Optional[tuple[Layer, ...]] = None


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    round: int
    classifier: Layer
    prototypes: PrototypeSet
    total_count: int
    per_class_counts: np.ndarray
    extractor: Optional[tuple[Layer, ...]] = None
    # diagnostics, not part of the upload
    loss_before: float = float("nan")
    loss_after: float = float("nan")
    phases: tuple[str, ...] = ()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 0.05
    lambda_c: float = 0.6
    lambda_e: float = 0.8
    t_max: int = 150
    upload_rounds: frozenset = field(default_factory=frozenset)


@dataclass(frozen=True)
class RoundContext:
    t: int
    t_max: int
    lambda_c: float
    lambda_e: float
    lr: float
    batch_size: int
    global_classifier: Layer
    global_prototypes: Optional[PrototypeSet]
    local_prototypes: PrototypeSet


def new_client(client_id: int, model: ModelParams, data: LabeledDataset, master_seed: int) -> ClientState:
    """Client starting from the shared initial model with its own seeded discriminators."""
    rng = child_rng(master_seed, "discriminator", client_id)
    C = model.num_classes
    return ClientState(
        id=client_id,
        model=model,
        disc_pr=init_discriminator(C, rng, "prototype"),
        disc_cl=init_discriminator(C, rng, "classification"),
        train_data=data,
        rng_seed=child_int(master_seed, "client", client_id),
    )


def round_rng(state: ClientState, t: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(state.rng_seed, spawn_key=(int(t),)))


def compute_prototypes(extractor, data: LabeledDataset) -> PrototypeSet:
    """Per-class mean feature over the classes present in ``data``."""
    if len(data) == 0:
        return {}
    H = forward_features(extractor, data.X)
    return {k: H[data.y == k].mean(axis=0) for k in data.classes}


def adopt_broadcast(state: ClientState, b: Broadcast) -> ClientState:
    """Overwrite the local extractor if one was broadcast; never the classifier."""
    if b.global_extractor is None:
        return state
    ours = [(W.shape, bb.shape) for W, bb in state.model.extractor]
    theirs = [(np.shape(W), np.shape(bb)) for W, bb in b.global_extractor]
    if ours != theirs:
        raise ConfigurationError(f"client {state.id}: broadcast extractor shapes {theirs} != {ours}")
    return replace(state, model=state.model.with_extractor(b.global_extractor))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _spec(ctx: RoundContext, kind: str, state: ClientState) -> LossSpec:
    return LossSpec(
        kind=kind,
        lam=ctx.lambda_c if kind == "classifier_phase" else ctx.lambda_e,
        t=ctx.t,
        t_max=ctx.t_max,
        global_classifier=ctx.global_classifier,
        global_prototypes=ctx.global_prototypes,
        local_prototypes=ctx.local_prototypes,
        disc_pr=state.disc_pr,
        disc_cl=state.disc_cl,
    )


def train_classifier_phase(state: ClientState, ctx: RoundContext, epochs: int,
                           rng: np.random.Generator) -> ClientState:
    """Extractor frozen.  Per mini-batch: one step for each discriminator, then
    one classifier step on batch cross-entropy + lambda_c * CCF.  Without
    global prototypes (round 0) or with lambda_c = 0 the adversarial part is
    skipped and this is plain cross-entropy SGD on the classifier."""
    data = state.train_data
    if epochs <= 0 or len(data) == 0:
        return state
    H, _ = dense_forward(state.model.extractor, data.X, relu_last=True)
    adversarial = bool(ctx.global_prototypes) and ctx.lambda_c > 0.0
    terms = AdversarialTerms(ctx.global_prototypes or {}, ctx.local_prototypes,
                             ctx.global_classifier) if adversarial else None
    clf = state.model.classifier
    d_pr, d_cl = state.disc_pr, state.disc_cl
    spec = LossSpec(
        kind="classifier_phase", lam=ctx.lambda_c, t=ctx.t, t_max=ctx.t_max,
        global_classifier=ctx.global_classifier, global_prototypes=ctx.global_prototypes,
        local_prototypes=ctx.local_prototypes,
    )
    for _ in range(epochs):
        for idx in _batches(len(data), ctx.batch_size, rng):
            if adversarial:
                _, g = terms.disc_pr(d_pr, clf)
                d_pr = d_pr.step(g, ctx.lr)
                _, g = terms.disc_cl(d_cl, clf)
                d_cl = d_cl.step(g, ctx.lr)
            spec.disc_pr, spec.disc_cl = d_pr, d_cl
            loss, (dW, db), _ = classifier_phase_grad(clf, H[idx], data.y[idx], spec, terms,
                                                      need_feature_grad=False)
            if not np.isfinite(loss):
                raise NumericalError("non-finite classifier-phase loss", round=ctx.t, client=state.id)
            W, b = clf
            clf = (W - ctx.lr * dW, b - ctx.lr * db)
    return replace(state, model=state.model.with_classifier(clf), disc_pr=d_pr, disc_cl=d_cl)


def train_extractor_phase(state: ClientState, ctx: RoundContext, epochs: int,
                          rng: np.random.Generator) -> ClientState:
    """Classifier frozen; SGD on batch cross-entropy + lambda_e * center loss.
    Skipped entirely (no RNG draws) when no global prototypes were received."""
    if not ctx.global_prototypes or epochs <= 0 or len(state.train_data) == 0:
        return state
    data = state.train_data
    spec = _spec(ctx, "extractor_phase", state)
    model = state.model
    for _ in range(epochs):
        for idx in _batches(len(data), ctx.batch_size, rng):
            try:
                _, g = compute_gradients(model, (data.X[idx], data.y[idx]), spec)
                model = sgd_step(model, g, ctx.lr, Mask.EXTRACTOR)
            except NumericalError as exc:
                raise NumericalError(str(exc), round=ctx.t, client=state.id) from exc
    return replace(state, model=model)


def train_loss(model: ModelParams, data: LabeledDataset) -> float:
    if len(data) == 0:
        return 0.0
    H = forward_features(model.extractor, data.X)
    W, b = model.classifier
    return cross_entropy_grad(H @ W.T + b, data.y)[0]


def local_round(state: ClientState, b: Broadcast, cfg: TrainConfig):
    """One client round.  Returns the new state and the upload.

    Order: adopt broadcast, local prototypes, then for each epoch a classifier
    epoch followed by an extractor epoch, then fresh prototypes.  The
    extractor is attached to the upload iff round t + 1 is in the upload
    schedule.
    """
    t = b.round
    rng = round_rng(state, t)
    state = adopt_broadcast(state, b)
    loss_before = train_loss(state.model, state.train_data)
    local_P = compute_prototypes(state.model.extractor, state.train_data)
    ctx = RoundContext(
        t=t, t_max=cfg.t_max, lambda_c=cfg.lambda_c, lambda_e=cfg.lambda_e,
        lr=cfg.lr, batch_size=cfg.batch_size, global_classifier=b.global_classifier,
        global_prototypes=b.global_prototypes, local_prototypes=local_P,
    )
    phases = []
    for _ in range(cfg.epochs):
        state = train_classifier_phase(state, ctx, 1, rng)
        phases.append("classifier")
        if ctx.global_prototypes:
            state = train_extractor_phase(state, ctx, 1, rng)
            phases.append("extractor")
    new_P = compute_prototypes(state.model.extractor, state.train_data)
    counts = state.train_data.class_counts
    update = ClientUpdate(
        client_id=state.id,
        round=t,
        classifier=state.model.classifier,
        prototypes=new_P,
        total_count=int(counts.sum()),
        per_class_counts=counts,
        extractor=state.model.extractor if (t + 1) in cfg.upload_rounds else None,
        loss_before=loss_before,
        loss_after=train_loss(state.model, state.train_data),
        phases=tuple(phases),
    )
    return state, update
