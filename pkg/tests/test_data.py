import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal
from scipy import stats
from sklearn.linear_model import LogisticRegression
from sklearn.neighbors import KNeighborsClassifier

from fedmlac.data import (
    Dataset,
    DataError,
    PartitionPlan,
    class_means,
    dirichlet_partition,
    group_partition,
    iid_partition,
    inject_gaussian_noise,
    inject_label_errors,
    label_entropy,
    largest_remainder,
    load_feature_csv,
    noise_variance,
    split_indices,
    synth_gaussian_mixture,
    write_feature_csv,
)


def measured_snr_db(clean, noisy):
    return 10 * math.log10(np.mean(clean**2) / np.mean((noisy - clean) ** 2))


def mean_entropy(ds, plan):
    return np.mean([label_entropy(ds.y[idx], ds.num_classes) for idx in plan.client_indices])


def assert_partition(plan, n):
    flat = np.concatenate([np.asarray(c, dtype=int) for c in plan.client_indices])
    assert len(flat) == n
    assert_array_equal(np.sort(flat), np.arange(n))
    assert all(len(c) > 0 for c in plan.client_indices)


# --- synthetic data ----------------------------------------------------------


def test_class_means_are_equidistant():
    m = class_means(4, 8)
    d = [np.linalg.norm(m[i] - m[j]) for i in range(4) for j in range(i + 1, 4)]
    assert np.allclose(d, 2 * math.sqrt(2))
    assert np.allclose(m.mean(axis=0), 0)


def test_zero_spread_collapses_classes():
    ds = synth_gaussian_mixture(3, 4, 10, 0.0, seed=1)
    for c in range(3):
        assert np.unique(ds.X[ds.y == c], axis=0).shape[0] == 1
    knn = KNeighborsClassifier(1).fit(ds.X, ds.y)
    assert knn.score(ds.X, ds.y) == 1.0


def test_synth_deterministic():
    a = synth_gaussian_mixture(4, 8, 20, 0.5, seed=3, n_groups=3)
    b = synth_gaussian_mixture(4, 8, 20, 0.5, seed=3, n_groups=3)
    assert a.equals(b)


def test_logistic_oracle_on_tight_clusters():
    train = synth_gaussian_mixture(4, 8, 200, 0.3, seed=0)
    test = synth_gaussian_mixture(4, 8, 200, 0.3, seed=1)
    clf = LogisticRegression(max_iter=1000).fit(train.X, train.y)
    assert clf.score(test.X, test.y) >= 0.95


def test_linear_separability_at_half_spread():
    train = synth_gaussian_mixture(4, 8, 500, 0.5, seed=0)
    test = synth_gaussian_mixture(4, 8, 500, 0.5, seed=1)
    assert LogisticRegression(max_iter=1000).fit(train.X, train.y).score(test.X, test.y) > 0.9


def test_synth_validation():
    with pytest.raises(ValueError):
        synth_gaussian_mixture(1, 4, 10, 0.5, 0)


def test_dataset_rejects_out_of_range_label():
    with pytest.raises(DataError, match="row 2"):
        Dataset(np.zeros((2, 1)), [0, 5], 3)


# --- partitioning ------------------------------------------------------------


def test_largest_remainder_exact_total():
    counts = largest_remainder(np.array([0.333, 0.333, 0.334]), 10)
    assert counts.sum() == 10
    assert_array_equal(counts, [3, 3, 4])


@given(st.integers(2, 12), st.floats(0.05, 5.0), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_dirichlet_plan_is_partition(n_clients, alpha, seed):
    ds = synth_gaussian_mixture(4, 2, 15, 1.0, seed=0)
    plan = dirichlet_partition(ds, n_clients, alpha, seed)
    assert plan.num_clients == n_clients
    assert_partition(plan, len(ds))


def test_dirichlet_concentration_limit():
    ds = synth_gaussian_mixture(4, 2, 500, 1.0, seed=0)
    plan = dirichlet_partition(ds, 5, 1e6, seed=3)
    for idx in plan.client_indices:
        counts = np.bincount(ds.y[idx], minlength=4)
        assert np.all(np.abs(counts - 100) <= 5)


def test_dirichlet_entropy_monotone_in_alpha():
    ds = synth_gaussian_mixture(10, 2, 100, 1.0, seed=0)
    alphas = [0.1, 0.3, 0.5, 1.0]
    means = [np.mean([mean_entropy(ds, dirichlet_partition(ds, 10, a, s)) for s in range(20)]) for a in alphas]
    assert means[0] < means[-1]
    assert all(x <= y for x, y in zip(means, means[1:]))


def test_dirichlet_repairs_empty_clients():
    ds = synth_gaussian_mixture(2, 2, 6, 1.0, seed=0)
    for seed in range(30):
        plan = dirichlet_partition(ds, 10, 0.05, seed)
        assert_partition(plan, 12)


def test_dirichlet_rejects_too_many_clients():
    ds = synth_gaussian_mixture(2, 2, 2, 1.0, seed=0)
    with pytest.raises(ValueError):
        dirichlet_partition(ds, 5, 0.5, 0)


def test_iid_partition_balanced():
    ds = synth_gaussian_mixture(4, 2, 25, 1.0, seed=0)
    plan = iid_partition(ds, 7, seed=1)
    assert_partition(plan, 100)
    sizes = [len(c) for c in plan.client_indices]
    assert max(sizes) - min(sizes) <= 1


def test_group_partition_sizes():
    ds = Dataset(np.zeros((6, 1)), [0, 1, 0, 1, 0, 1], 2, groups=[5, 2, 5, 9, 2, 5])
    plan = group_partition(ds)
    assert [len(c) for c in plan.client_indices] == [2, 3, 1]
    for idx in plan.client_indices:
        assert len(set(ds.groups[idx])) == 1


def test_group_partition_single_group():
    ds = Dataset(np.zeros((4, 1)), [0, 1, 0, 1], 2, groups=[3, 3, 3, 3])
    assert group_partition(ds).client_indices == [[0, 1, 2, 3]]


def test_group_partition_order_independent():
    ds = synth_gaussian_mixture(3, 2, 20, 1.0, seed=0, n_groups=4)
    perm = np.random.default_rng(0).permutation(len(ds))
    shuffled = ds.subset(perm)
    a = group_partition(ds)
    b = group_partition(shuffled)
    for ia, ib in zip(a.client_indices, b.client_indices):
        assert sorted(ia) == sorted(perm[ib].tolist())


def test_group_partition_requires_tags():
    with pytest.raises(ValueError):
        group_partition(synth_gaussian_mixture(2, 2, 3, 1.0, 0))


def test_plan_json_round_trip():
    ds = synth_gaussian_mixture(3, 2, 10, 1.0, seed=0)
    plan = dirichlet_partition(ds, 4, 0.3, seed=9)
    doc = json.loads(plan.to_json())
    assert doc["strategy"] == "dirichlet" and doc["alpha"] == 0.3 and doc["seed"] == 9
    back = PartitionPlan.from_json(plan.to_json())
    assert back.client_indices == plan.client_indices
    assert back.to_json() == plan.to_json()


def test_split_indices_floor_and_disjoint():
    tr, te = split_indices(23, 0.2, np.random.default_rng(0))
    assert len(te) == 4 and len(tr) == 19
    assert not set(tr) & set(te)
    tr, te = split_indices(1, 0.5, np.random.default_rng(0))
    assert len(tr) == 1 and len(te) == 0


# --- corruption --------------------------------------------------------------


def test_clean_snr_is_passthrough():
    ds = synth_gaussian_mixture(3, 4, 10, 0.5, seed=0)
    assert inject_gaussian_noise(ds, 100.0, seed=1).equals(ds)


def test_noise_variance_definition():
    X = np.ones((10, 3))
    assert noise_variance(X, 20.0) == pytest.approx(0.01)


@pytest.mark.parametrize("snr", [10.0, 20.0, 30.0])
def test_measured_snr_matches_target(snr):
    ds = synth_gaussian_mixture(4, 16, 2500, 0.5, seed=0)
    noisy = inject_gaussian_noise(ds, snr, seed=1)
    assert abs(measured_snr_db(ds.X, noisy.X) - snr) < 0.5
    assert_array_equal(noisy.y, ds.y)


def test_noise_deterministic():
    ds = synth_gaussian_mixture(2, 3, 10, 0.5, seed=0)
    assert inject_gaussian_noise(ds, 10.0, 5).equals(inject_gaussian_noise(ds, 10.0, 5))


def test_label_errors_rate_zero():
    ds = synth_gaussian_mixture(3, 2, 10, 0.5, seed=0)
    assert inject_label_errors(ds, 0.0, 1).equals(ds)


@given(st.floats(0.0, 1.0), st.integers(2, 6), st.integers(1, 200))
@settings(max_examples=50, deadline=None)
def test_label_errors_exact_count(rate, num_classes, n):
    rng = np.random.default_rng(n)
    ds = Dataset(rng.standard_normal((n, 2)), rng.integers(0, num_classes, n), num_classes)
    out = inject_label_errors(ds, rate, seed=3)
    assert np.sum(out.y != ds.y) == math.floor(rate * n + 1e-9)
    assert_array_equal(out.X, ds.X)


def test_label_errors_half_of_hundred():
    ds = Dataset(np.zeros((100, 1)), np.arange(100) % 4, 4)
    assert np.sum(inject_label_errors(ds, 0.5, 0).y != ds.y) == 50


def test_label_errors_uniform_over_other_classes():
    c = 4
    ds = Dataset(np.zeros((10_000, 1)), np.arange(10_000) % c, c)
    out = inject_label_errors(ds, 1.0, seed=2)
    for old in range(c):
        new = out.y[ds.y == old]
        assert not np.any(new == old)
        counts = np.bincount(new, minlength=c)[[k for k in range(c) if k != old]]
        assert stats.chisquare(counts).pvalue > 0.001


def test_label_errors_rate_validation():
    with pytest.raises(ValueError):
        inject_label_errors(synth_gaussian_mixture(2, 2, 3, 1.0, 0), 1.5, 0)


# --- CSV ---------------------------------------------------------------------


def test_csv_two_rows(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n0.5,1.5,0\n-1,2,1\n")
    ds = load_feature_csv(p)
    assert len(ds) == 2 and ds.feature_dim == 2 and ds.num_classes == 2


def test_csv_group_column(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x0,label,group\n1,0,7\n2,1,7\n3,1,8\n")
    ds = load_feature_csv(p)
    assert_array_equal(ds.groups, [7, 7, 8])
    assert group_partition(ds).num_clients == 2


def test_csv_round_trip(tmp_path):
    ds = synth_gaussian_mixture(3, 5, 7, 0.5, seed=4, n_groups=2)
    p = tmp_path / "d.csv"
    write_feature_csv(ds, p)
    assert load_feature_csv(p, num_classes=3).equals(ds)


@pytest.mark.parametrize(
    "body, row",
    [
        ("x,label\n1,0\n2\n", 2),
        ("x,label\n1,0\nabc,1\n", 2),
        ("x,label\n1,0\n1,1\n2,3\n", 3),
        ("x,label\n1,0.5\n", 1),
    ],
)
def test_csv_errors_name_row(tmp_path, body, row):
    p = tmp_path / "d.csv"
    p.write_text(body)
    with pytest.raises(DataError, match=f"row {row}") as info:
        load_feature_csv(p, num_classes=3)
    assert info.value.row == row


def test_csv_label_equal_to_class_count(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x,label\n1,0\n2,2\n")
    with pytest.raises(DataError, match="row 2"):
        load_feature_csv(p, num_classes=2)


def test_csv_empty_file(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("")
    with pytest.raises(DataError):
        load_feature_csv(p)
