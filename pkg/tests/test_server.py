import io
import json

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from fedmlac.client import ClientUpload
from fedmlac.nn import LayerParams, ModelParams, ModelSpec, init_model
from fedmlac.server import (
    AggregationConfig,
    AggregationError,
    LayerDeviation,
    fedavg_aggregate,
    layer_deviations,
    layer_mean,
    lpa_aggregate,
    trusted_set,
    write_audit_lines,
)

SCALAR = ModelSpec(((1, 1),))


def scalar_upload(cid, value, n=1):
    m = ModelParams(SCALAR, [LayerParams(np.array([[float(value)]]), np.zeros(1))])
    return ClientUpload(cid, m, n, 0.0, 0.0)


def random_cohort(rng, n_clients, n_layers):
    widths = rng.integers(1, 4, size=n_layers + 1)
    spec = ModelSpec(tuple((int(widths[i]), int(widths[i + 1])) for i in range(n_layers)))
    return [
        ClientUpload(k, init_model(spec, rng), int(rng.integers(1, 50)), 0.0, 0.0)
        for k in rng.permutation(n_clients).tolist()
    ]


def honest_fixture(n_honest=10, factor=100.0, seed=0):
    spec = ModelSpec.mlp(4, (5,), 3)
    honest = init_model(spec, np.random.default_rng(seed))
    for layer in honest.layers:
        layer.bias += 0.3
    uploads = [ClientUpload(k, honest.copy(), 20, 0.0, 0.0) for k in range(n_honest)]
    bad = honest.copy()
    for layer in bad.layers:
        layer.weights *= factor
        layer.bias *= factor
    uploads.append(ClientUpload(n_honest, bad, 20, 0.0, 0.0))
    return honest, uploads


cohorts = st.builds(
    lambda seed, n, l: random_cohort(np.random.default_rng(seed), n, l),
    st.integers(0, 2**32 - 1),
    st.integers(3, 20),
    st.integers(1, 4),
)


# --- config ------------------------------------------------------------------


def test_config_bounds():
    with pytest.raises(ValueError):
        AggregationConfig(v_l=-0.1)
    with pytest.raises(ValueError):
        AggregationConfig(v_h=1.0)


def test_pruned_counts_floor():
    assert AggregationConfig(0.1, 0.1).pruned_counts(10) == (1, 1)
    assert AggregationConfig(0.0, 0.3).pruned_counts(10) == (0, 3)
    assert AggregationConfig(0.1, 0.1).pruned_counts(9) == (0, 0)


def test_cohort_that_prunes_everyone_is_rejected():
    with pytest.raises(AggregationError, match=r"floor\(v_l\*\|S\|\) \+ floor\(v_h\*\|S\|\) < \|S\|"):
        AggregationConfig(0.5, 0.5).validate_cohort(2)


# --- layer mean / deviations -------------------------------------------------


def test_mean_of_identical_uploads_is_exact():
    _, ups = honest_fixture()
    m = layer_mean(ups[:10])
    assert m.same_values(ups[0].model)


def test_mean_two_scalars():
    assert layer_mean([scalar_upload(0, 0), scalar_upload(1, 4)]).layers[0].weights[0, 0] == 2.0


def test_deviation_examples():
    ups = [scalar_upload(0, 1), scalar_upload(1, 1), scalar_upload(2, 100)]
    mean = layer_mean(ups)
    assert mean.layers[0].weights[0, 0] == 34.0
    assert [d.deviation for d in layer_deviations(ups, mean)[0]] == [33.0, 33.0, 66.0]


def test_deviation_zero_at_mean():
    _, ups = honest_fixture()
    devs = layer_deviations(ups[:5], layer_mean(ups[:5]))
    assert all(d.deviation == 0.0 for layer in devs for d in layer)


def test_deviation_includes_bias():
    a = ModelParams(SCALAR, [LayerParams(np.zeros((1, 1)), np.array([3.0]))])
    b = ModelParams(SCALAR, [LayerParams(np.zeros((1, 1)), np.array([-3.0]))])
    ups = [ClientUpload(0, a, 1, 0, 0), ClientUpload(1, b, 1, 0, 0)]
    assert [d.deviation for d in layer_deviations(ups, layer_mean(ups))[0]] == [3.0, 3.0]


@given(cohorts, st.floats(0.1, 10.0))
@settings(max_examples=30, deadline=None)
def test_deviation_homogeneous(ups, c):
    base = layer_deviations(ups, layer_mean(ups))
    scaled = [
        ClientUpload(u.client_id, ModelParams(u.model.spec, [LayerParams(c * l.weights, c * l.bias) for l in u.model.layers]), u.n_k, 0, 0)
        for u in ups
    ]
    again = layer_deviations(scaled, layer_mean(scaled))
    for la, lb in zip(base, again):
        for da, db in zip(la, lb):
            assert db.deviation == pytest.approx(c * da.deviation, rel=1e-9, abs=1e-12)


# --- trusted set -------------------------------------------------------------


def test_trusted_size_ten_client_example():
    devs = [LayerDeviation(k, 0, float(k * 7 % 10)) for k in range(10)]
    assert len(trusted_set(devs, AggregationConfig(0.1, 0.1)).members) == 8


def test_no_pruning_keeps_everyone():
    devs = [LayerDeviation(k, 0, float(k)) for k in range(6)]
    assert trusted_set(devs, AggregationConfig(0.0, 0.0)).members == tuple(range(6))


def test_trusted_hand_enumeration():
    devs = [LayerDeviation(0, 0, 33.0), LayerDeviation(1, 0, 33.0), LayerDeviation(2, 0, 66.0)]
    assert trusted_set(devs, AggregationConfig(0.0, 1 / 3)).members == (0, 1)


def test_ties_break_by_client_id():
    devs = [LayerDeviation(k, 0, 1.0) for k in (4, 2, 9, 7)]
    # one low and one high are dropped: lowest id first, highest id last
    assert trusted_set(devs, AggregationConfig(0.25, 0.25)).members == (4, 7)


def test_trusted_weight_uses_sample_counts():
    devs = [LayerDeviation(k, 0, float(k)) for k in range(3)]
    ts = trusted_set(devs, AggregationConfig(0.0, 0.34), {0: 5, 1: 7, 2: 100})
    assert ts.total_weight == 12


# --- aggregation -------------------------------------------------------------


def test_fedavg_weighted_example():
    out = fedavg_aggregate([scalar_upload(0, 0, n=1), scalar_upload(1, 4, n=3)])
    assert out.layers[0].weights[0, 0] == 3.0


def test_fedavg_single_upload_identity():
    _, ups = honest_fixture()
    assert fedavg_aggregate(ups[:1]).same_values(ups[0].model)


def test_lpa_scalar_example():
    ups = [scalar_upload(0, 1), scalar_upload(1, 1), scalar_upload(2, 100)]
    assert lpa_aggregate(ups, AggregationConfig(0.0, 1 / 3)).layers[0].weights[0, 0] == 1.0


def test_lpa_drops_scaled_adversary_exactly():
    honest, ups = honest_fixture()
    out = lpa_aggregate(ups, AggregationConfig(0.0, 0.1))
    assert out.same_values(honest)
    assert np.abs(fedavg_aggregate(ups).flat() - honest.flat()).max() >= 1.0


def test_lpa_rejects_degenerate_cohort():
    with pytest.raises(AggregationError):
        lpa_aggregate([scalar_upload(0, 1), scalar_upload(1, 2)], AggregationConfig(0.5, 0.5))


def test_duplicate_ids_rejected():
    with pytest.raises(AggregationError, match="duplicate"):
        fedavg_aggregate([scalar_upload(0, 1), scalar_upload(0, 2)])


def test_empty_cohort_rejected():
    with pytest.raises(AggregationError):
        fedavg_aggregate([])


def test_audit_records():
    honest, ups = honest_fixture()
    _, audit = lpa_aggregate(ups, AggregationConfig(0.0, 0.1), return_audit=True)
    buf = io.StringIO()
    write_audit_lines(buf, audit, 12)
    lines = [json.loads(l) for l in buf.getvalue().splitlines()]
    assert [r["layer"] for r in lines] == [0, 1]
    for rec in lines:
        assert rec["round"] == 12
        assert rec["trusted"] == list(range(10))
        assert rec["deviations"][-1][0] == 10
        devs = [d for _, d in rec["deviations"]]
        assert devs == sorted(devs)


# --- properties --------------------------------------------------------------


@given(cohorts)
@settings(max_examples=50, deadline=None)
def test_reduction_to_fedavg(ups):
    a = lpa_aggregate(ups, AggregationConfig(0.0, 0.0))
    b = fedavg_aggregate(ups)
    assert np.abs(a.flat() - b.flat()).max() < 1e-12


@given(cohorts, st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_permutation_invariance(ups, seed):
    cfg = AggregationConfig(0.1, 0.2)
    shuffled = [ups[i] for i in np.random.default_rng(seed).permutation(len(ups))]
    assert_array_equal(lpa_aggregate(ups, cfg).flat(), lpa_aggregate(shuffled, cfg).flat())
    assert_array_equal(fedavg_aggregate(ups).flat(), fedavg_aggregate(shuffled).flat())
    assert_array_equal(layer_mean(ups).flat(), layer_mean(shuffled).flat())


@given(cohorts, st.data())
@settings(max_examples=40, deadline=None)
def test_per_layer_independence(ups, data):
    cfg = AggregationConfig(0.1, 0.1)
    before = lpa_aggregate(ups, cfg)
    n_layers = ups[0].model.spec.num_layers
    j = data.draw(st.integers(0, n_layers - 1))
    victim = data.draw(st.integers(0, len(ups) - 1))
    changed = [ClientUpload(u.client_id, u.model.copy(), u.n_k, 0, 0) for u in ups]
    changed[victim].model.layers[j].weights += data.draw(st.floats(-50, 50))
    after = lpa_aggregate(changed, cfg)
    for l in range(n_layers):
        if l != j:
            assert_array_equal(before.layers[l].weights, after.layers[l].weights)
            assert_array_equal(before.layers[l].bias, after.layers[l].bias)


@given(cohorts)
@settings(max_examples=40, deadline=None)
def test_convexity_over_trusted_members(ups):
    out, audit = lpa_aggregate(ups, AggregationConfig(0.1, 0.2), return_audit=True)
    by_id = {u.client_id: u for u in ups}
    for l, ts in enumerate(audit.trusted):
        stack = np.stack([by_id[k].model.layers[l].flat() for k in ts.members])
        agg = out.layers[l].flat()
        assert np.all(agg >= stack.min(axis=0) - 1e-12)
        assert np.all(agg <= stack.max(axis=0) + 1e-12)


@given(st.integers(3, 12), st.integers(1, 3), st.floats(2.0, 1e3), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_breakdown_with_few_adversaries(m, a, factor, seed):
    cohort = m + a
    v_h = a / cohort
    spec = ModelSpec.mlp(3, (2,), 2)
    honest = init_model(spec, np.random.default_rng(seed))
    for layer in honest.layers:
        layer.bias += 1.0
    ups = [ClientUpload(k, honest.copy(), 3, 0, 0) for k in range(m)]
    for k in range(a):
        bad = honest.copy()
        for layer in bad.layers:
            layer.weights *= factor + k
            layer.bias *= factor + k
        ups.append(ClientUpload(m + k, bad, 3, 0, 0))
    for layer in layer_deviations(ups, layer_mean(ups)):
        assume(min(d.deviation for d in layer[m:]) > max(d.deviation for d in layer[:m]))
    out = lpa_aggregate(ups, AggregationConfig(0.0, v_h))
    assert out.same_values(honest)
