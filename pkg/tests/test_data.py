import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmate.errors import ConfigurationError, PartitionError
from fedmate.data import (
    LabeledDataset,
    MixtureSpec,
    PartitionSpec,
    generate_from_spec,
    generate_gaussian_mixture,
    load_csv,
    make_test_sets,
    mixture_means,
    partition,
    partition_pathological,
    partition_skew,
    save_csv,
)


def _balanced(C=10, per=40, d=3, seed=0):
    return generate_gaussian_mixture(C, d, per, 1.0, seed)


def _count_matrix(parts, C):
    return np.stack([p.class_counts for p in parts]) if parts else np.zeros((0, C), int)


def _row_ids(data):
    return {x.tobytes() for x in data.X}


# -- generation -------------------------------------------------------------

def test_zero_spread_returns_means():
    spec = MixtureSpec(num_classes=4, dim=5, n_per_class=7, spread=0.0, seed=3)
    data = generate_from_spec(spec)
    means = mixture_means(4, 5, spec.sphere_radius, np.random.default_rng(np.random.SeedSequence(3).spawn(3)[0]))
    for k in range(4):
        assert (data.X[data.y == k] == means[k]).all()
    np.testing.assert_allclose(np.linalg.norm(means, axis=1), spec.sphere_radius, rtol=1e-12)


def test_generation_is_deterministic():
    a = generate_gaussian_mixture(5, 4, 20, 1.0, seed=11)
    b = generate_gaussian_mixture(5, 4, 20, 1.0, seed=11)
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()
    c = generate_gaussian_mixture(5, 4, 20, 1.0, seed=12)
    assert a.X.tobytes() != c.X.tobytes()


def test_empirical_means_match_centers():
    # the centers only depend on seed and radius, so a zero-spread draw exposes them
    spec = MixtureSpec(num_classes=3, dim=4, n_per_class=10000, spread=1.0, radius=4.0, seed=5)
    data = generate_from_spec(spec)
    zero = generate_from_spec(MixtureSpec(3, 4, 1, 0.0, 4.0, 5))
    for k in range(3):
        mu = zero.X[zero.y == k][0]
        assert np.abs(data.X[data.y == k].mean(axis=0) - mu).max() < 0.05


def test_generation_rejects_degenerate_sizes():
    with pytest.raises(ConfigurationError):
        generate_gaussian_mixture(1, 4, 10)
    with pytest.raises(ConfigurationError):
        generate_gaussian_mixture(3, 1, 10)


def test_dataset_invariants():
    data = _balanced(C=4, per=6)
    assert data.class_counts.tolist() == [6, 6, 6, 6]
    assert len(data.samples) == 24
    with pytest.raises(ConfigurationError):
        LabeledDataset(np.zeros((2, 3)), np.array([0, 5]), 3)
    with pytest.raises(ConfigurationError):
        LabeledDataset(np.zeros((2, 3)), np.array([0]), 3)


# -- skew partition -----------------------------------------------------------

def test_skew_100_is_uniform():
    data = _balanced(C=10, per=40)
    parts = partition_skew(data, 7, 100, seed=1)
    for p in parts:
        c = p.class_counts
        assert c.max() - c.min() <= 1


def test_skew_0_keeps_only_dominant_classes():
    data = _balanced(C=10, per=40)
    parts = partition_skew(data, 5, 0, seed=2)  # 5 x 2 covers all 10 classes
    for p in parts:
        assert len(p.classes) == 2


def test_skew_50_counting_oracle():
    C, per, N, s = 10, 40, 4, 50
    data = _balanced(C=C, per=per)
    parts = partition_skew(data, N, s, seed=3)
    M = _count_matrix(parts, C)
    assert M.sum() == 400
    uniform = per * s // 100 // N  # 5 per client per class from the uniform half
    # a class nobody holds as dominant is dealt fully uniformly (per / N each);
    # a client's dominant classes are the ones above that
    dominant = [set(np.flatnonzero(M[i] > per // N).tolist()) for i in range(N)]
    assert all(len(d) == 2 for d in dominant)
    for k in range(C):
        holders = [i for i in range(N) if k in dominant[i]]
        for i in range(N):
            if not holders:
                want = per // N
            else:
                want = uniform + (per - uniform * N) // len(holders) * (i in holders)
            assert M[i, k] == want
    assert all(M[i, k] >= per * C // N // C for i in range(N) for k in dominant[i])


def test_skew_errors():
    data = _balanced(C=10, per=4)
    with pytest.raises(ConfigurationError):
        partition_skew(data, 3, 101)
    # with 2 clients x 2 dominant classes, six classes have no holder and s=0 strands them
    with pytest.raises(PartitionError, match="class"):
        partition_skew(data, 2, 0)


# -- pathological partition ---------------------------------------------------

def test_pathological_single_client_gets_everything():
    data = _balanced(C=5, per=8)
    (only,) = partition_pathological(data, 1, 5, seed=0)
    assert only.X.tobytes() == data.X.tobytes()


def test_pathological_one_class_each():
    data = _balanced(C=10, per=8)
    parts = partition_pathological(data, 10, 1, seed=4)
    held = sorted(p.classes[0] for p in parts)
    assert held == list(range(10))
    assert all(len(p.classes) == 1 and len(p) == 8 for p in parts)


def test_pathological_three_of_ten_counting_oracle():
    data = _balanced(C=10, per=60)
    parts = partition_pathological(data, 20, 3, seed=5)
    M = _count_matrix(parts, 10)
    assert all((row > 0).sum() == 3 for row in M)
    assert (M.sum(axis=0) == 60).all()
    for k in range(10):
        held = M[:, k][M[:, k] > 0]
        assert held.max() - held.min() <= 1


def test_pathological_errors():
    data = _balanced(C=10, per=8)
    with pytest.raises(PartitionError):
        partition_pathological(data, 3, 3)
    with pytest.raises(PartitionError):
        partition_pathological(data, 3, 11)
    tiny = _balanced(C=2, per=1)
    with pytest.raises(PartitionError, match="class"):
        partition_pathological(tiny, 4, 1)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(2, 8), st.integers(1, 12), st.integers(1, 30),
    st.integers(0, 100), st.integers(0, 2**31 - 1), st.booleans(),
)
def test_partitions_conserve_samples(C, N, per, s, seed, patho):
    data = _balanced(C=C, per=per, seed=seed % 1000)
    if patho:
        cpc = min(C, -(-C // N))
        if per < N:
            return
        parts = partition(data, PartitionSpec("pathological", N, classes_per_client=cpc, seed=seed))
    else:
        if s == 0 and N * 2 < C:
            s = 1
        parts = partition(data, PartitionSpec("skew", N, skew=s, seed=seed))
    assert len(parts) == N
    assert (_count_matrix(parts, C).sum(axis=0) == data.class_counts).all()
    rows = [x.tobytes() + bytes([int(y)]) for p in parts for x, y in zip(p.X, p.y)]
    assert sorted(rows) == sorted(x.tobytes() + bytes([int(y)]) for x, y in zip(data.X, data.y))
    again = partition(data, PartitionSpec("pathological" if patho else "skew", N, skew=s,
                                          classes_per_client=cpc if patho else 3, seed=seed))
    assert all(a.X.tobytes() == b.X.tobytes() for a, b in zip(parts, again))


def test_partition_spec_validation():
    with pytest.raises(ConfigurationError):
        PartitionSpec(mode="dirichlet")
    with pytest.raises(ConfigurationError):
        PartitionSpec(skew=-1)


# -- test sets ---------------------------------------------------------------

def test_test_sets_histograms():
    spec = MixtureSpec(num_classes=10, dim=4, n_per_class=60, seed=2)
    data = generate_from_spec(spec)
    clients = partition_skew(data, 6, 30, seed=2)
    balanced, matched = make_test_sets(spec, clients)
    assert len(set(balanced.class_counts.tolist())) == 1
    for tr, te in zip(clients, matched):
        a = tr.class_counts / tr.class_counts.sum()
        b = te.class_counts / te.class_counts.sum()
        assert np.abs(a - b).sum() < 0.05
    train_rows = _row_ids(data)
    for t in [balanced, *matched]:
        assert not (_row_ids(t) & train_rows)


def test_matched_set_for_one_class_client():
    spec = MixtureSpec(num_classes=5, dim=3, n_per_class=10, seed=1)
    clients = partition_pathological(generate_from_spec(spec), 5, 1, seed=1)
    _, matched = make_test_sets(spec, clients)
    for tr, te in zip(clients, matched):
        assert te.classes == tr.classes


def test_csv_round_trip(tmp_path):
    data = _balanced(C=3, per=5, d=4)
    path = tmp_path / "d.csv"
    save_csv(data, path)
    header = path.read_text().splitlines()[0]
    assert header == "label,f0,f1,f2,f3"
    back = load_csv(path, 3)
    assert back.X.tobytes() == data.X.tobytes() and back.y.tobytes() == data.y.tobytes()
    (tmp_path / "bad.csv").write_text("y,f0\n0,1.0\n")
    with pytest.raises(ConfigurationError):
        load_csv(tmp_path / "bad.csv")
