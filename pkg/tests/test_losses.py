import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmate.errors import ConfigurationError
from fedmate.losses import (
    AdversarialTerms,
    Discriminator,
    LossSpec,
    ccf_loss,
    center_loss,
    center_loss_grad,
    classifier_phase_loss,
    compute_gradients,
    cross_entropy,
    cross_entropy_grad,
    disc_cl_loss,
    disc_pr_loss,
    extractor_phase_loss,
    generator_adv_loss,
    init_discriminator,
    kappa,
    plain_ce_loss,
    sigmoid,
    skip_notices,
)
from fedmate.nn import Mask, forward_features, init_model

from .gradcheck import COMPOSITIONS, composition_error

LN2 = math.log(2.0)


def constant_disc(C: int, p: float) -> Discriminator:
    """Discriminator whose output is ``p`` for every input."""
    logit = math.log(p / (1 - p))
    return Discriminator(((np.zeros((2 * C, C)), np.zeros(2 * C)), (np.zeros((1, 2 * C)), np.array([logit]))))


def bce(p, target):
    return -math.log(p) if target == 1 else -math.log(1 - p)


def naive_disc_prob(D, z):
    (W1, b1), (W2, b2) = D.layers
    h = [max(0.0, sum(W1[r, c] * z[c] for c in range(len(z))) + b1[r]) for r in range(W1.shape[0])]
    s = sum(W2[0, r] * h[r] for r in range(len(h))) + b2[0]
    return 1.0 / (1.0 + math.exp(-s))


def logits(clf, p):
    W, b = clf
    return W @ p + b


@pytest.fixture
def world():
    rng = np.random.default_rng(11)
    C, K = 4, 3
    return dict(
        rng=rng, C=C, K=K,
        clf=(rng.normal(size=(C, K)), rng.normal(size=C)),
        gclf=(rng.normal(size=(C, K)), rng.normal(size=C)),
        gP={k: np.abs(rng.normal(size=K)) for k in range(C)},
        lP={k: np.abs(rng.normal(size=K)) for k in (0, 2, 3)},
        D_pr=init_discriminator(C, rng, "prototype"),
        D_cl=init_discriminator(C, rng, "classification"),
    )


# --- cross-entropy ----------------------------------------------------------

def test_cross_entropy_examples():
    assert cross_entropy(np.zeros(10), 3) == pytest.approx(math.log(10), abs=1e-12)
    z = np.zeros(10)
    z[4] = 40.0
    assert cross_entropy(z, 4) < 1e-15
    rng = np.random.default_rng(0)
    for _ in range(20):
        z = rng.normal(scale=3, size=6)
        y = int(rng.integers(6))
        e = np.exp(z)
        assert cross_entropy(z, y) == pytest.approx(-math.log(e[y] / e.sum()), abs=1e-12)


def test_cross_entropy_is_stable_for_huge_logits():
    z = np.array([1e4, -1e4, 0.0])
    assert cross_entropy(z, 0) == 0.0
    assert math.isfinite(cross_entropy(z, 1))


# --- center loss ---------------------------------------------------------------

def test_center_loss_examples():
    P = {0: np.array([1.0, 2.0]), 1: np.array([0.0, 0.0])}
    assert center_loss([(np.array([1.0, 2.0]), 0), (np.zeros(2), 1)], P) == 0.0
    assert center_loss([(np.array([1.0, 0.0]), 1)], P) == 1.0
    rng = np.random.default_rng(1)
    H = rng.normal(size=(3, 2))
    y = [0, 1, 0]
    want = sum(float(np.sum((H[i] - P[y[i]]) ** 2)) for i in range(3)) / 3
    assert center_loss(zip(H, y), P) == pytest.approx(want, rel=1e-13)


def test_center_loss_skips_missing_classes():
    before = skip_notices["center_empty"]
    assert center_loss([(np.ones(2), 5)], {0: np.zeros(2)}) == 0.0
    assert skip_notices["center_empty"] == before + 1
    # class 5 dropped, class 0 kept
    loss, dH = center_loss_grad(np.array([[1.0, 1.0], [3.0, 0.0]]), np.array([5, 0]), {0: np.zeros(2)})
    assert loss == 9.0
    assert not dH[0].any()


# --- kappa -------------------------------------------------------------------

def test_kappa_examples():
    assert kappa(0, 150) == 1.0
    assert kappa(150, 150) == 0.0
    assert kappa(75, 150) == 0.5
    assert kappa(200, 150) == 0.0
    with pytest.raises(ConfigurationError):
        kappa(0, 0)


@given(st.integers(0, 500), st.integers(0, 500), st.integers(1, 500))
def test_kappa_bounded_and_nonincreasing(a, b, t_max):
    lo, hi = min(a, b), max(a, b)
    assert 0.0 <= kappa(hi, t_max) <= kappa(lo, t_max) <= 1.0


# --- discriminators ------------------------------------------------------------

def test_disc_pr_examples(world):
    C = world["C"]
    D = constant_disc(C, 0.5)
    shared = len(set(world["lP"]) & set(world["gP"]))
    assert disc_pr_loss(D, world["clf"], world["gP"], world["lP"]) == pytest.approx(2 * shared * LN2, rel=1e-12)
    # random D, two classes: direct BCE sum
    gP = {k: world["gP"][k] for k in (0, 2)}
    lP = {k: world["lP"][k] for k in (0, 2)}
    Dr = world["D_pr"]
    want = sum(bce(naive_disc_prob(Dr, logits(world["clf"], gP[k])), 1)
               + bce(naive_disc_prob(Dr, logits(world["clf"], lP[k])), 0) for k in (0, 2))
    assert disc_pr_loss(Dr, world["clf"], gP, lP) == pytest.approx(want, rel=1e-12)


def test_disc_pr_limit_for_separating_discriminator(world):
    C = world["C"]
    # D(z) = sigmoid(M * (z_0 - c)) with local logits made to sit well below c
    clf = (np.zeros((C, world["K"])), np.zeros(C))
    clf[0][0, 0] = 1.0
    gP = {0: np.array([5.0, 0, 0]), 1: np.array([5.0, 0, 0])}
    lP = {0: np.array([1.0, 0, 0]), 1: np.array([1.0, 0, 0])}
    M = 200.0
    W1 = np.zeros((2 * C, C))
    W1[0, 0] = 1.0
    D = Discriminator(((W1, np.zeros(2 * C)), (np.eye(1, 2 * C) * M, np.array([-3.0 * M]))))
    assert disc_pr_loss(D, clf, gP, lP) < 1e-100


def test_disc_pr_no_shared_classes_returns_zero(world):
    before = skip_notices["disc_pr_empty"]
    assert disc_pr_loss(world["D_pr"], world["clf"], {1: world["gP"][1]}, {0: world["lP"][0]}) == 0.0
    assert skip_notices["disc_pr_empty"] == before + 1


def test_disc_cl_examples(world):
    C = world["C"]
    assert disc_cl_loss(constant_disc(C, 0.5), world["gclf"], world["gclf"], world["gP"]) == pytest.approx(2 * C * LN2, rel=1e-12)
    D = world["D_cl"]
    want = sum(bce(naive_disc_prob(D, logits(world["gclf"], p)), 1)
               + bce(naive_disc_prob(D, logits(world["clf"], p)), 0) for p in world["gP"].values())
    assert disc_cl_loss(D, world["clf"], world["gclf"], world["gP"]) == pytest.approx(want, rel=1e-12)


def test_disc_cl_perfect_discriminator_limit(world):
    C, K = world["C"], world["K"]
    g = (np.zeros((C, K)), np.full(C, 5.0))
    loc = (np.zeros((C, K)), np.full(C, 1.0))
    M = 200.0
    W1 = np.zeros((2 * C, C))
    W1[0, 0] = 1.0
    D = Discriminator(((W1, np.zeros(2 * C)), (np.eye(1, 2 * C) * M, np.array([-3.0 * M]))))
    assert disc_cl_loss(D, loc, g, world["gP"]) < 1e-100


def test_generator_examples(world):
    C = world["C"]
    n = len(world["lP"]) + len(world["gP"])
    half = constant_disc(C, 0.5)
    assert generator_adv_loss(half, half, world["clf"], world["lP"], world["gP"]) == pytest.approx(n * LN2, rel=1e-12)
    fooled = constant_disc(C, 1 - 1e-15)
    assert generator_adv_loss(fooled, fooled, world["clf"], world["lP"], world["gP"]) < 1e-12
    want = sum(bce(naive_disc_prob(world["D_pr"], logits(world["clf"], p)), 1) for p in world["lP"].values())
    want += sum(bce(naive_disc_prob(world["D_cl"], logits(world["clf"], p)), 1) for p in world["gP"].values())
    got = generator_adv_loss(world["D_pr"], world["D_cl"], world["clf"], world["lP"], world["gP"])
    assert got == pytest.approx(want, rel=1e-12)


# --- ccf and phases ---------------------------------------------------------------

def _proto_ce(clf, lP):
    return sum(cross_entropy(logits(clf, p), k) for k, p in lP.items())


def test_ccf_examples(world):
    w = world
    assert ccf_loss(w["clf"], w["lP"], w["gP"], w["D_pr"], w["D_cl"], 10, 10) == pytest.approx(_proto_ce(w["clf"], w["lP"]), rel=1e-12)
    adv = generator_adv_loss(w["D_pr"], w["D_cl"], w["clf"], w["lP"], w["gP"])
    want = _proto_ce(w["clf"], w["lP"]) + 0.7 * adv
    assert ccf_loss(w["clf"], w["lP"], w["gP"], w["D_pr"], w["D_cl"], 3, 10) == pytest.approx(want, rel=1e-12)


def test_ccf_joint_limit():
    C, K = 3, 3
    clf = (50.0 * np.eye(C), np.zeros(C))
    P = {k: np.eye(K)[k] for k in range(C)}
    fooled = constant_disc(C, 1 - 1e-15)
    assert ccf_loss(clf, P, P, fooled, fooled, 0, 10) < 1e-12


def test_ccf_depends_on_round_only_through_kappa(world):
    w = world
    adv = generator_adv_loss(w["D_pr"], w["D_cl"], w["clf"], w["lP"], w["gP"])
    for t, t2 in [(0, 5), (2, 9), (1, 10)]:
        a = ccf_loss(w["clf"], w["lP"], w["gP"], w["D_pr"], w["D_cl"], t, 10)
        b = ccf_loss(w["clf"], w["lP"], w["gP"], w["D_pr"], w["D_cl"], t2, 10)
        assert a - b == pytest.approx((kappa(t, 10) - kappa(t2, 10)) * adv, rel=1e-10, abs=1e-12)


def _phase_world(world):
    rng = world["rng"]
    model = init_model(5, (6,), world["K"], world["C"], rng)
    X = rng.normal(size=(7, 5))
    y = rng.integers(0, world["C"], size=7)
    return model, X, y


def _ctx(world, lam):
    return LossSpec(lam=lam, t=2, t_max=10, global_classifier=world["gclf"],
                    global_prototypes=world["gP"], local_prototypes=world["lP"],
                    disc_pr=world["D_pr"], disc_cl=world["D_cl"])


def test_classifier_phase_examples(world):
    model, X, y = _phase_world(world)
    ce = plain_ce_loss(model, (X, y))
    assert classifier_phase_loss(model, (X, y), _ctx(world, 0.0)) == pytest.approx(ce, rel=1e-14)
    boot = LossSpec(lam=0.6, t=0, t_max=10, global_classifier=world["gclf"], disc_pr=world["D_pr"], disc_cl=world["D_cl"])
    assert classifier_phase_loss(model, (X, y), boot) == pytest.approx(ce, rel=1e-14)
    ccf = ccf_loss(model.classifier, world["lP"], world["gP"], world["D_pr"], world["D_cl"], 2, 10)
    assert classifier_phase_loss(model, (X, y), _ctx(world, 0.6)) == pytest.approx(ce + 0.6 * ccf, rel=1e-12)


def test_extractor_phase_examples(world):
    model, X, y = _phase_world(world)
    ce = plain_ce_loss(model, (X, y))
    assert extractor_phase_loss(model, (X, y), _ctx(world, 0.0)) == pytest.approx(ce, rel=1e-14)
    H = forward_features(model.extractor, X)
    at_protos = {k: H[y == k].mean(axis=0) for k in range(world["C"]) if (y == k).any()}
    # features sitting exactly on their prototypes: only one sample per class
    X1, y1 = X[:1], y[:1]
    ctx = LossSpec(lam=0.8, global_prototypes={int(y1[0]): forward_features(model.extractor, X1[0])})
    assert extractor_phase_loss(model, (X1, y1), ctx) == pytest.approx(plain_ce_loss(model, (X1, y1)), rel=1e-14)
    cent = sum(float(np.sum((H[i] - at_protos[int(y[i])]) ** 2)) for i in range(len(y))) / len(y)
    ctx = LossSpec(lam=0.8, global_prototypes=at_protos)
    assert extractor_phase_loss(model, (X, y), ctx) == pytest.approx(ce + 0.8 * cent, rel=1e-12)


def test_phase_masks_zero_the_frozen_block(world):
    model, X, y = _phase_world(world)
    _, g = compute_gradients(model, (X, y), LossSpec(kind="classifier_phase", **_kw(world)))
    assert all(not W.any() and not b.any() for W, b in g.extractor)
    assert g.classifier[0].any()
    _, g = compute_gradients(model, (X, y), LossSpec(kind="extractor_phase", **_kw(world)))
    assert not g.classifier[0].any() and not g.classifier[1].any()
    assert g.extractor[0][0].any()


def _kw(world):
    c = _ctx(world, 0.6)
    return dict(lam=c.lam, t=c.t, t_max=c.t_max, global_classifier=c.global_classifier,
                global_prototypes=c.global_prototypes, local_prototypes=c.local_prototypes,
                disc_pr=c.disc_pr, disc_cl=c.disc_cl)


def test_loss_spec_validation():
    with pytest.raises(ConfigurationError):
        LossSpec(kind="hinge")
    with pytest.raises(ConfigurationError):
        LossSpec(lam=-1.0)
    assert LossSpec(kind="classifier_phase").mask is Mask.CLASSIFIER


def test_precomputed_terms_match_one_shot_functions(world):
    w = world
    terms = AdversarialTerms(w["gP"], w["lP"], w["gclf"])
    assert terms.disc_pr(w["D_pr"], w["clf"])[0] == disc_pr_loss(w["D_pr"], w["clf"], w["gP"], w["lP"])
    assert terms.disc_cl(w["D_cl"], w["clf"])[0] == disc_cl_loss(w["D_cl"], w["clf"], w["gclf"], w["gP"])


# --- properties --------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_losses_nonnegative_and_finite(seed):
    rng = np.random.default_rng(seed)
    C, K = int(rng.integers(2, 6)), 3
    scale = float(rng.choice([0.1, 1.0, 30.0]))
    clf = (rng.normal(scale=scale, size=(C, K)), rng.normal(size=C))
    gclf = (rng.normal(scale=scale, size=(C, K)), rng.normal(size=C))
    gP = {k: np.abs(rng.normal(scale=scale, size=K)) for k in range(C)}
    lP = {k: np.abs(rng.normal(size=K)) for k in range(int(rng.integers(1, C + 1)))}
    D1, D2 = init_discriminator(C, rng), init_discriminator(C, rng)
    vals = [
        cross_entropy(logits(clf, gP[0]), 0),
        center_loss([(p, k) for k, p in lP.items()], gP),
        disc_pr_loss(D1, clf, gP, lP),
        disc_cl_loss(D2, clf, gclf, gP),
        generator_adv_loss(D1, D2, clf, lP, gP),
        ccf_loss(clf, lP, gP, D1, D2, int(rng.integers(0, 10)), 10),
    ]
    assert all(math.isfinite(v) and v >= 0 for v in vals)


@given(st.floats(-1e6, 1e6))
def test_sigmoid_in_unit_interval(x):
    assert 0.0 <= float(sigmoid(x)) <= 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cross_entropy_gradient_rows_sum_to_zero(seed):
    rng = np.random.default_rng(seed)
    Z = rng.normal(scale=5, size=(4, 6))
    _, dZ = cross_entropy_grad(Z, rng.integers(0, 6, size=4))
    np.testing.assert_allclose(dZ.sum(axis=1), 0.0, atol=1e-15)


@pytest.mark.parametrize("kind", COMPOSITIONS)
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(COMPOSITIONS.index(kind))
    for _ in range(15):
        assert composition_error(kind, rng) < 1e-4
