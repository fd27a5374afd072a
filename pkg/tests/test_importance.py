import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgprune import tensor as T
from dgprune.domains import DomainBatch, SyntheticSpec, generate
from dgprune.exceptions import GradientError, PruneError, ShapeError
from dgprune.importance import (
    DomainRisks,
    ImportanceTable,
    IoRConfig,
    exact_importance,
    first_order_terms,
    gate_gradients,
    ior_importance,
    mean_source_risk,
    ood_risk_variance,
    per_domain_risks,
    taylor_importance,
    taylor_term,
)
from dgprune.nn import ArchConfig, FilterId, build_model, forward, mask_filter

SMALL = ArchConfig(channels=(4, 6), kernel_sizes=(3, 3), image_size=(8, 8), n_classes=3)


def make_batch(n_domains=3, per=6, seed=0, replicate=False, size=(8, 8), n_classes=3):
    rng = np.random.default_rng(seed)
    if replicate:
        imgs = np.tile(rng.normal(size=(per, 3, *size)), (n_domains, 1, 1, 1))
        labels = np.tile(rng.integers(0, n_classes, per), n_domains)
    else:
        imgs = rng.normal(size=(n_domains * per, 3, *size))
        labels = rng.integers(0, n_classes, n_domains * per)
    return DomainBatch(imgs, labels, np.repeat(np.arange(n_domains), per))


def np_cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


def brute_force_mean_risk(model, batch):
    """Per-domain mean CE averaged over domains, one domain at a time."""
    risks = []
    for d in np.unique(batch.domain_ids):
        m = batch.domain_ids == d
        risks.append(np_cross_entropy(forward(model, batch.images[m]).data, batch.labels[m]))
    return float(np.mean(risks))


@pytest.fixture
def small_model():
    model = build_model(SMALL, seed=1)
    rng = np.random.default_rng(2)
    for b in model.blocks:
        b.bias.data = rng.normal(scale=0.1, size=b.bias.shape)
        b.gates.tensor.data = rng.uniform(0.5, 1.5, size=len(b.gates))
    return model


# ---------------------------------------------------------------- per-domain risks

def test_replicated_sub_batches_give_identical_risks(small_model):
    risks = per_domain_risks(small_model, make_batch(replicate=True))
    vals = risks.values
    assert vals[0] == vals[1] == vals[2]


def test_perfectly_classified_risks_near_zero(small_model):
    batch = make_batch()
    small_model.head_weight.data[:] = 0.0
    small_model.head_bias.data = np.array([50.0, 0.0, 0.0])
    batch.labels[:] = 0
    assert np.all(per_domain_risks(small_model, batch).values < 1e-20)


def test_risks_match_isolated_recomputation(small_model):
    batch = make_batch(n_domains=2, per=7, seed=3)
    risks = per_domain_risks(small_model, batch)
    for d, r in zip(risks.domain_ids, risks.values):
        m = batch.domain_ids == d
        iso = np_cross_entropy(forward(small_model, batch.images[m]).data, batch.labels[m])
        assert abs(r - iso) < 1e-12


def test_unbalanced_batch_rejected(small_model):
    batch = make_batch()
    batch = DomainBatch(batch.images[:-1], batch.labels[:-1], batch.domain_ids[:-1])
    with pytest.raises(ShapeError):
        per_domain_risks(small_model, batch)


# ---------------------------------------------------------------- exact importance

def test_filter_with_dead_head_weights_has_zero_importance(small_model):
    batch = make_batch()
    small_model.head_weight.data[:, 2] = 0.0
    assert exact_importance(small_model, batch, FilterId(1, 2)) == 0.0


def test_duplicate_filter_matches_brute_force(small_model):
    batch = make_batch(seed=4)
    b = small_model.blocks[1]
    b.kernel.data[1] = b.kernel.data[0]
    b.bias.data[1] = b.bias.data[0]
    b.gates.tensor.data[1] = b.gates.values[0]
    w = small_model.head_weight.data
    w[:, 0] = w[:, 1] = 0.5 * (w[:, 0] + w[:, 1])
    score = exact_importance(small_model, batch, FilterId(1, 1))
    base = mean_source_risk(small_model, batch)
    twin = small_model.copy()
    twin.blocks[1].gates.tensor.data[1] = 0.0
    assert score == (base - mean_source_risk(twin, batch)) ** 2
    assert score > 0


@pytest.mark.parametrize("fid", [FilterId(0, 0), FilterId(0, 3), FilterId(1, 5)])
def test_exact_importance_matches_independent_oracle(small_model, fid):
    batch = make_batch(seed=5)
    twin = small_model.copy()
    twin.blocks[fid.layer_index].gates.tensor.data[fid.channel_index] = 0.0
    oracle = (brute_force_mean_risk(small_model, batch) - brute_force_mean_risk(twin, batch)) ** 2
    assert exact_importance(small_model, batch, fid) == pytest.approx(oracle, rel=1e-9, abs=1e-15)


def test_exact_importance_restores_model(small_model):
    before = small_model.parameter_bytes()
    for fid in small_model.filter_ids():
        exact_importance(small_model, make_batch(), fid)
    assert small_model.parameter_bytes() == before


def test_exact_importance_rejects_pruned(small_model):
    mask_filter(small_model, FilterId(0, 1))
    with pytest.raises(PruneError):
        exact_importance(small_model, make_batch(), FilterId(0, 1))


# ---------------------------------------------------------------- Taylor / variance / IoR

def test_taylor_term_arithmetic():
    assert taylor_term(2.0, 0.5) == 1.0
    assert taylor_term(1.3, 0.0) == 0.0


def test_zero_gradient_gives_zero_taylor_score(small_model):
    grads = [np.zeros(n) for n in small_model.layer_sizes]
    grads[1][3] = 0.5
    small_model.blocks[1].gates.tensor.data[3] = 2.0
    scores = taylor_importance(None, small_model, mean_grads=grads)
    assert scores[FilterId(1, 3)] == 1.0
    assert all(v == 0.0 for k, v in scores.items() if k != FilterId(1, 3))


def test_missing_gradients_raise(small_model):
    with pytest.raises(GradientError):
        first_order_terms(small_model, None)
    with pytest.raises(GradientError):
        first_order_terms(small_model, [np.zeros(4)])


def test_taylor_skips_pruned_filters(small_model):
    mask_filter(small_model, FilterId(1, 0))
    scores = taylor_importance(per_domain_risks(small_model, make_batch()), small_model)
    assert FilterId(1, 0) not in scores and len(scores) == small_model.total_filters - 1


def test_risk_variance_values():
    def risks(vals):
        return DomainRisks([T.Tensor(v, requires_grad=True) for v in vals], list(range(len(vals))))
    assert ood_risk_variance(risks([0.2, 0.4])).item() == pytest.approx(0.01, abs=1e-16)
    with pytest.raises(ShapeError):
        ood_risk_variance(risks([0.2]))


def test_equal_risks_give_zero_variance_and_gradient(small_model):
    risks = per_domain_risks(small_model, make_batch(replicate=True))
    var = ood_risk_variance(risks)
    assert var.item() == 0.0
    assert all(np.all(g == 0) for g in gate_gradients(var, small_model))


def test_two_domain_variance_gradient_closed_form_and_numeric(small_model):
    batch = make_batch(n_domains=2, per=5, seed=6)
    risks = per_domain_risks(small_model, batch)
    r1, r2 = risks.values
    g_var = gate_gradients(ood_risk_variance(risks), small_model)
    g1 = gate_gradients(risks.risks[0], small_model)
    g2 = gate_gradients(risks.risks[1], small_model)
    for li in range(2):
        closed = (r1 - r2) / 2 * (g1[li] - g2[li])
        np.testing.assert_allclose(g_var[li], closed, rtol=1e-10, atol=1e-15)
    # finite differences on a few gates
    step = 1e-4
    for li, ci in [(0, 1), (1, 4)]:
        gates = small_model.blocks[li].gates.values
        orig = gates[ci]
        vals = []
        for s in (step, -step):
            gates[ci] = orig + s
            vals.append(ood_risk_variance(per_domain_risks(small_model, batch)).item())
        gates[ci] = orig
        num = (vals[0] - vals[1]) / (2 * step)
        assert abs(g_var[li][ci] - num) <= 1e-6 * max(1.0, abs(num))


def test_ior_equals_taylor_when_domains_identical(small_model):
    risks = per_domain_risks(small_model, make_batch(replicate=True))
    taylor = taylor_importance(risks, small_model)
    ior = ior_importance(risks, small_model, IoRConfig(alpha=1.0))
    assert max(abs(ior[k] - taylor[k]) for k in taylor) < 1e-12


def test_ior_arithmetic(small_model):
    grads_mean = [np.zeros(n) for n in small_model.layer_sizes]
    grads_var = [np.zeros(n) for n in small_model.layer_sizes]
    small_model.blocks[0].gates.tensor.data[0] = 1.0
    grads_mean[0][0] = 1.0
    grads_var[0][0] = 0.3
    scores = ior_importance(None, small_model, IoRConfig(alpha=1.0), grads_mean, grads_var)
    assert scores[FilterId(0, 0)] == pytest.approx(1.09, abs=1e-15)


def test_ior_alpha_zero_is_taylor(small_model):
    risks = per_domain_risks(small_model, make_batch(seed=8))
    taylor = taylor_importance(risks, small_model)
    assert ior_importance(risks, small_model, IoRConfig(alpha=0.0)) == taylor


def test_ior_config_validation():
    with pytest.raises(Exception):
        IoRConfig(alpha=float("nan"))
    with pytest.raises(Exception):
        IoRConfig(variance_kind="robust")


@pytest.mark.parametrize("fid", [FilterId(0, 2), FilterId(1, 1), FilterId(1, 4)])
def test_first_order_remainder_is_second_order(small_model, fid):
    batch = make_batch(seed=9)
    rbar = per_domain_risks(small_model, batch).mean()
    base = rbar.item()
    grad = gate_gradients(rbar, small_model)[fid.layer_index][fid.channel_index]
    gates = small_model.blocks[fid.layer_index].gates.values
    g = gates[fid.channel_index]

    def remainder(eps):
        gates[fid.channel_index] = g * (1 - eps)
        try:
            delta = base - brute_force_mean_risk(small_model, batch)
        finally:
            gates[fid.channel_index] = g
        return abs(delta - eps * g * grad)

    r = {eps: remainder(eps) for eps in (1e-2, 1e-3, 1e-4)}
    C = max(r[1e-2] / 1e-4, r[1e-3] / 1e-6)
    for eps, val in r.items():
        assert val <= C * eps ** 2 * (1 + 1e-6) + 1e-13


# ---------------------------------------------------------------- EMA table

def table_for(sizes=(2, 3)):
    return ImportanceTable(sizes)


def all_ids(table):
    return list(table.filter_ids())


def test_untouched_table_is_zero():
    t = table_for()
    assert all(t.ema_score(f) == 0.0 for f in all_ids(t))


def test_single_ema_step():
    t = table_for()
    t.ema_update({f: 1.0 for f in all_ids(t)})
    assert all(t.ema_score(f) == pytest.approx(0.1, abs=1e-16) for f in all_ids(t))
    assert t.updates_seen == 1


def test_ema_converges_to_constant_stream():
    t = table_for()
    r = 3.7
    for _ in range(100):
        t.ema_update({f: r for f in all_ids(t)})
    assert all(abs(t.ema_score(f) - r) < r * 1e-4 for f in all_ids(t))


def test_zero_stream_stays_zero():
    t = table_for()
    for _ in range(20):
        t.ema_update({f: 0.0 for f in all_ids(t)})
    assert all(t.ema_score(f) == 0.0 for f in all_ids(t))


def test_ema_rejects_pruned_and_missing_scores():
    t = table_for()
    t.mark_pruned(FilterId(0, 1))
    scores = {f: 1.0 for f in all_ids(t)}
    with pytest.raises(PruneError):
        t.ema_update({**scores, FilterId(0, 1): 1.0})
    scores.pop(FilterId(1, 0))
    with pytest.raises(PruneError):
        t.ema_update(scores)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.floats(0, 10), min_size=5, max_size=5), min_size=1, max_size=15),
       st.floats(0.01, 100))
def test_ema_scale_behaviour_and_nonnegativity(stream, c):
    a, b = ImportanceTable((5,)), ImportanceTable((5,))
    ids = all_ids(a)
    for raw in stream:
        a.ema_update(dict(zip(ids, raw)))
        b.ema_update({f: c * v for f, v in zip(ids, raw)})
    ea, eb = np.array(a.ema[0]), np.array(b.ema[0])
    assert np.all(ea >= 0) and np.all(eb >= 0)
    np.testing.assert_allclose(eb, c * ea, rtol=1e-12, atol=1e-300)
    # rank order of distinct scores survives scaling
    distinct = np.abs(ea[:, None] - ea[None, :]) > 1e-9 * (1 + ea.max())
    assert np.all((ea[:, None] < ea[None, :])[distinct] == (eb[:, None] < eb[None, :])[distinct])


def test_scores_on_real_batch_are_nonnegative(small_model):
    risks = per_domain_risks(small_model, make_batch(seed=10))
    for scores in (taylor_importance(risks, small_model), ior_importance(risks, small_model)):
        assert all(v >= 0 for v in scores.values())


def test_importance_csv_round_trip(tmp_path):
    t = table_for()
    t.ema_update({f: float(i) / 3 for i, f in enumerate(all_ids(t))})
    t.mark_pruned(FilterId(1, 2))
    path = tmp_path / "imp.csv"
    t.to_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == "layer_index,channel_index,raw_score,ema_score,pruned"
    back = ImportanceTable.from_csv(path)
    assert back.rows() == t.rows()


def test_per_domain_risks_on_generated_data():
    ds = generate(SyntheticSpec(rhos=(0.9, 0.9, 0.9), samples_per_domain=8, image_size=(8, 8), n_classes=3))
    batch = DomainBatch(ds.images, ds.labels, ds.domains)
    risks = per_domain_risks(build_model(SMALL, seed=0), batch)
    assert risks.n == 3 and np.all(np.isfinite(risks.values)) and np.all(risks.values >= 0)
