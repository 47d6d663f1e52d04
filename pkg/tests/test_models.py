import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ecad.attribution import WindowConfig, attribute, attribute_log, end_of_day
from ecad.errors import ConfigError, UnsupportedTaskError
from ecad.models import (
    VARIANTS,
    LossTerm,
    NetConfig,
    TrainConfig,
    build,
    combine_ecvr,
    combine_lite_cross,
    compose_im,
    ecad_de_terms,
    ecad_terms,
    esmm_terms,
    joints,
    loss_and_grad,
    loss_defer,
    loss_ecad,
    loss_ecad_de,
    loss_esmm,
    masked_loss_terms,
    net_specs,
    predict,
    tower_count,
    train,
)
from ecad.nn import Network
from ecad.simulator import ClickEvent, SimConfig, simulate

from .gradcheck import check_network, randomize
from .oracles import reference_loss, written_out_formula

TINY = NetConfig(emb_dim=3, bottom_dims=(6, 4), tower_dims=(4,))
probs = st.floats(0.01, 0.99)


def _wc(n, m):
    return WindowConfig.from_days(W=n + 2, V=m + 2, W_list=range(1, n + 1), V_list=range(1, m + 1))


def _random_heads(rng, roles, size):
    return {r: rng.uniform(0.02, 0.98, size) for r in roles}


def _random_labels(rng, keys, size):
    labels = {k: rng.integers(0, 2, size).astype(float) for k in keys}
    masks = {k: rng.random(size) < 0.7 for k in keys}
    return labels, masks


# --- layout -------------------------------------------------------------------


def test_tower_count_examples():
    assert tower_count("ECAD", 1, 1) == 6
    assert tower_count("ECAD_LITE", 2, 2) == 8
    assert tower_count("ESMM", 2, 2) == 2


@pytest.mark.parametrize("n", range(4))
@pytest.mark.parametrize("m", range(4))
def test_tower_count_formulas(n, m):
    assert tower_count("ECAD_DE", n, m) == n + m + 2
    assert tower_count("ECAD", n, m) == n * m + 2 * n + m + 2
    assert tower_count("ECAD_LITE", n, m) == 2 * n + m + 2
    assert tower_count("ESMM_ORACLE", n, m) == 2


def test_shared_bottom_except_independent_models():
    wc = _wc(2, 2)
    for v in VARIANTS:
        bundle = build(v, wc, [5, 5], TINY)
        expected = 2 if v in ("IM", "IM_DEFER") else 1
        assert len(bundle.nets) == expected, v
        assert bundle.tower_total == sum(len(net.roles) for net in bundle.nets)
    im = build("IM_DEFER", wc, [5, 5], TINY)
    names = [{p.name for p in net.params} for net in im.nets]
    assert not names[0] & names[1]


def test_unknown_variant_rejected():
    with pytest.raises(ConfigError):
        net_specs("ECAD_PLUS", _wc(1, 1))


# --- head combination -----------------------------------------------------------


def test_combine_examples():
    assert combine_ecvr(0.1, 0.2) == pytest.approx(0.08)
    assert combine_ecvr(0.37, 0.0) == 0.37
    assert combine_ecvr(0.0, 0.6) == 0.0
    assert combine_lite_cross(0.5, 0.5) == 0.25
    assert combine_lite_cross(1 - 1e-12, 0.3) == pytest.approx(0.3)


@given(probs, probs, probs, probs, probs)
def test_joint_ordering(q, r, a, s, t):
    heads = {k: np.array([v]) for k, v in dict(q=q, r=r, a1=a, s1=s, u1=a, t1_1=t).items()}
    j = joints(heads, _wc(1, 1))
    assert j["p_cvrfr"] <= j["p_cvr"]
    for k in ("y1&z", "y&z1", "y1&z1"):
        assert j[k] <= j["p_cvrfr"]
    assert j["y1"] <= j["p_cvr"]
    assert j["p_ecvr"] == pytest.approx(j["p_cvr"] - j["p_cvrfr"], rel=1e-12, abs=1e-15)


@given(probs, probs, probs)
def test_ecvr_monotone_in_each_head(q, r, d):
    assert combine_ecvr(min(q + d, 1.0), r) > combine_ecvr(q, r) or q + d >= 1.0
    assert combine_ecvr(q, max(r - d, 0.0)) > combine_ecvr(q, r) or r - d <= 0.0


@given(probs, probs, probs)
def test_lite_cross_is_exact_product(u, s, q):
    heads = {k: np.array([v]) for k, v in dict(q=q, r=0.5, a1=0.5, s1=s, u1=u).items()}
    j = joints(heads, _wc(1, 1), lite=True)
    assert j["y1&z1"][0] == q * 0.5 * (u * s)


def test_simulated_delays_are_independent_given_cascade():
    cfg = SimConfig(num_fields=2, cardinality_per_field=10, horizon_days=4, clicks_per_day=50_000, target_cvr=0.5, target_rfr=0.5)
    log = simulate(cfg)
    both = np.isfinite(log.v)
    w, v = log.w[both], log.v[both]
    n = len(w)
    for wi in (0.5, 1.0, 2.0):
        for vj in (0.5, 1.5):
            pa, pb = np.mean(w < wi), np.mean(v < vj)
            joint = np.mean((w < wi) & (v < vj))
            se = math.sqrt(pa * pb * (1 - pa * pb) / n)
            assert abs(joint - pa * pb) <= 3 * se, (wi, vj)


# --- losses against worked examples -----------------------------------------------


def _arr(**kw):
    return {k: np.array([float(v)]) for k, v in kw.items()}


def _mask(**kw):
    return {k: np.array([bool(v)]) for k, v in kw.items()}


def test_loss_defer_examples():
    heads = _arr(q=0.5, a1=0.5)
    labels = _arr(y1=1, y=0)
    assert loss_defer(heads, labels, _mask(y1=1, y=0), 1) == pytest.approx(-math.log(0.25))
    assert loss_defer(heads, labels, _mask(y1=0, y=0), 1) == 0.0
    assert loss_defer(_arr(q=0.3), _arr(y=1), _mask(y=1), 0) == pytest.approx(-math.log(0.3))


def test_loss_esmm_examples():
    heads = _arr(q=0.8, r=0.5)
    on = _mask(y=1, **{"y&z": 1})
    assert loss_esmm(heads, _arr(y=1, **{"y&z": 1}), on) == pytest.approx(-math.log(0.8) - math.log(0.4))
    assert loss_esmm(heads, _arr(y=0, **{"y&z": 0}), on) == pytest.approx(-math.log(0.2) - math.log(0.6))
    perfect = _arr(q=1 - 1e-9, r=1 - 1e-9)
    floor = -math.log(1 - 1e-7)
    assert loss_esmm(perfect, _arr(y=1, **{"y&z": 1}), on) <= 2 * floor + 1e-15


def test_loss_ecad_de_examples():
    heads = _arr(q=0.6, r=0.3, a1=0.7, s1=0.4)
    labels = _arr(y1=1, y=1, **{"y&z1": 0, "y&z": 1})
    on = _mask(y1=1, y=1, **{"y&z1": 1, "y&z": 1})
    by_hand = (
        -math.log(0.6 * 0.7)
        - math.log(0.6)
        - math.log(1 - 0.6 * 0.3 * 0.4)
        - math.log(0.6 * 0.3)
    )
    assert loss_ecad_de(heads, labels, on, 1, 1) == pytest.approx(by_hand, rel=1e-12)
    cvr_only = _mask(y1=1, y=1, **{"y&z1": 0, "y&z": 0})
    assert loss_ecad_de(heads, labels, cvr_only, 1, 1) == loss_defer(heads, labels, cvr_only, 1)
    delay_terms = -math.log(0.6 * 0.7) - math.log(1 - 0.6 * 0.3 * 0.4)
    assert loss_ecad_de(heads, labels, on, 1, 1) == pytest.approx(loss_esmm(heads, labels, on) + delay_terms, rel=1e-12)


def test_loss_ecad_recent_click_only_y1_determined():
    wc = _wc(2, 2)
    sample = attribute(ClickEvent((0,), 8.4, math.inf, math.inf), end_of_day(9), wc)
    active = [t.label for t in ecad_terms(2, 2) if sample.masks[t.label]]
    assert sorted(active) == sorted(["y1", "y1&z1", "y1&z2", "y1&z"])
    assert all(sample.labels[k] == 0 for k in active)


def test_loss_ecad_without_windows_is_esmm():
    rng = np.random.default_rng(3)
    heads = _random_heads(rng, ["q", "r"], 50)
    labels, masks = _random_labels(rng, ["y", "y&z"], 50)
    assert loss_ecad(heads, labels, masks, 0, 0) == loss_esmm(heads, labels, masks)
    assert [t.label for t in ecad_terms(0, 0)] == [t.label for t in esmm_terms()]


@pytest.mark.parametrize("n,m", [(1, 1), (2, 2), (3, 1)])
def test_full_positive_cascade_term_count(n, m):
    terms = ecad_terms(n, m)
    assert len(terms) == 2 + n + m + n + n * m
    s = attribute(ClickEvent((0,), 0.1, 0.05, 0.05), math.inf, _wc(n, m))
    assert all(s.masks[t.label] and s.labels[t.label] == 1 for t in terms)


@pytest.mark.parametrize("variant", ["esmm", "ecad_de", "ecad", "ecad_lite"])
def test_losses_match_written_out_formula(variant):
    rng = np.random.default_rng(11)
    n, m = 2, 2
    roles = ["q", "r"] + [f"a{i}" for i in (1, 2)] + [f"s{j}" for j in (1, 2)] + [f"u{i}" for i in (1, 2)]
    roles += [f"t{i}_{j}" for i in (1, 2) for j in (1, 2)]
    heads = _random_heads(rng, roles, 40)
    keys = _wc(n, m).label_keys()
    labels, masks = _random_labels(rng, keys, 40)
    fn = {
        "esmm": lambda: loss_esmm(heads, labels, masks),
        "ecad_de": lambda: loss_ecad_de(heads, labels, masks, n, m),
        "ecad": lambda: loss_ecad(heads, labels, masks, n, m),
        "ecad_lite": lambda: loss_ecad(heads, labels, masks, n, m, lite=True),
    }[variant]
    expected = reference_loss(heads, labels, masks, written_out_formula(variant, n, m))
    assert fn() == pytest.approx(expected, rel=1e-12)


def test_term_weights_scale_terms():
    heads = _arr(q=0.4, r=0.5)
    labels = _arr(y=1, **{"y&z": 0})
    masks = _mask(y=1, **{"y&z": 1})
    base = masked_loss_terms(heads, labels, masks, esmm_terms())
    weighted = masked_loss_terms(heads, labels, masks, esmm_terms(), {"y&z": 3.0})
    assert weighted["y"] == base["y"] and weighted["y&z"] == pytest.approx(3 * base["y&z"])


# --- gradients ------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["IM_DEFER", "ESMM", "ECAD_DE", "ECAD_LITE", "ECAD"])
def test_variant_gradients(variant, rng):
    wc = _wc(1, 2)
    for spec in net_specs(variant, wc):
        for _ in range(2):
            net = Network([4, 3], spec.roles, emb_dim=3, bottom_dims=(5, 4), tower_dims=(3,), seed=int(rng.integers(1 << 30)))
            randomize(net, rng)
            feats = np.stack([rng.integers(0, 4, 6), rng.integers(0, 3, 6)], axis=1)
            keys = {t.label for t in spec.terms}
            labels, masks = _random_labels(rng, keys, 6)
            rep = check_network(net, feats, spec.terms, labels, masks)
            assert rep.worst < 1e-4, (variant, rep)
            assert rep.skipped < 0.05 * (rep.checked + rep.skipped)


def test_fresh_sample_updates_cvr_tower():
    wc = _wc(2, 2)
    bundle = build("ECAD", wc, [5], TINY)
    net = bundle.nets[0]
    sample = attribute(ClickEvent((3,), 8.4, math.inf, math.inf), end_of_day(9), wc)
    labels = {k: np.array([float(v)]) for k, v in sample.labels.items()}
    masks = {k: np.array([v]) for k, v in sample.masks.items()}
    net.zero_grad()
    _, d = loss_and_grad(net.forward(np.array([[3]])), net.roles, bundle.specs[0].terms, labels, masks)
    net.backward(d)
    q = net.roles.index("q")
    tower_params = [p for p in net.params if p.name.startswith("towers.")]
    assert tower_params and any(np.any(p.grad[q] != 0) for p in tower_params)


@pytest.mark.parametrize("variant", VARIANTS)
def test_masked_label_flip_changes_nothing(variant, rng):
    wc = _wc(2, 2)
    bundle = build(variant, wc, [6, 6], TINY)
    feats = rng.integers(0, 6, (30, 2))
    labels, masks = _random_labels(rng, wc.label_keys(), 30)
    flipped = {k: np.where(masks[k], v, 1.0 - v) for k, v in labels.items()}
    for spec, net in zip(bundle.specs, bundle.nets):
        out = []
        for lab in (labels, flipped):
            net.zero_grad()
            loss, d = loss_and_grad(net.forward(feats), net.roles, spec.terms, lab, masks)
            net.backward(d)
            out.append((loss, d.tobytes(), b"".join(p.grad.tobytes() for p in net.params)))
        assert out[0] == out[1]


# --- predict, train -------------------------------------------------------------


@pytest.fixture(scope="module")
def small_batch():
    cfg = SimConfig(num_fields=2, cardinality_per_field=8, horizon_days=6, clicks_per_day=400, target_cvr=0.2, target_rfr=0.3)
    return attribute_log(simulate(cfg), end_of_day(6), WindowConfig.from_days(), "window")


def test_predict_tasks(small_batch):
    feats = small_batch.log.features[:20]
    for v in VARIANTS:
        bundle = build(v, small_batch.windows, [8, 8], TINY)
        if v == "CVR_BASE":
            with pytest.raises(UnsupportedTaskError):
                predict(bundle, feats, "RFR")
            continue
        if v in ("RFR_BASE", "ECVR_BASE"):
            with pytest.raises(UnsupportedTaskError):
                predict(bundle, feats, "CVR")
            continue
        q, r, e = (predict(bundle, feats, t) for t in ("CVR", "RFR", "ECVR"))
        assert np.array_equal(e, q - q * r) or np.allclose(e, q - q * r, rtol=0, atol=1e-16)


def test_train_empty_and_fully_masked_leave_parameters(small_batch):
    for data in (small_batch.subset(np.array([], dtype=int)), small_batch.without_masks().subset(np.arange(50))):
        bundle = build("ECAD", small_batch.windows, [8, 8], TINY)
        before = [p.values.copy() for p in bundle.params]
        if len(data):
            for k in data.masks:
                data.masks[k][...] = False
        train(bundle, data)
        assert all(np.array_equal(a, p.values) for a, p in zip(before, bundle.params))


def test_training_is_deterministic_and_moves_parameters(small_batch):
    runs = []
    for _ in range(2):
        bundle = build("ECAD", small_batch.windows, [8, 8], TINY)
        before = [p.values.copy() for p in bundle.params]
        train(bundle, small_batch, TrainConfig(batch_size=64))
        runs.append(b"".join(p.values.tobytes() for p in bundle.params))
    assert runs[0] == runs[1]
    assert any(not np.array_equal(a, p.values) for a, p in zip(before, bundle.params))


def test_train_rejects_other_window_config(small_batch):
    bundle = build("ESMM", _wc(1, 1), [8, 8], TINY)
    with pytest.raises(ConfigError):
        train(bundle, small_batch)


def test_compose_im_copies_base_models(small_batch):
    cvr = train(build("CVR_BASE", small_batch.windows, [8, 8], TINY), small_batch)
    rfr = train(build("RFR_BASE", small_batch.windows, [8, 8], replace(TINY, seed=1)), small_batch)
    im = compose_im(cvr, rfr)
    feats = small_batch.log.features[:30]
    assert np.array_equal(predict(im, feats, "CVR"), predict(cvr, feats, "CVR"))
    assert np.array_equal(predict(im, feats, "RFR"), predict(rfr, feats, "RFR"))
    assert np.array_equal(predict(im, feats, "ECVR"), combine_ecvr(predict(cvr, feats, "CVR"), predict(rfr, feats, "RFR")))
    with pytest.raises(ConfigError):
        compose_im(rfr, cvr)


def test_specs_use_documented_terms():
    assert [t.label for t in ecad_de_terms(1, 1)] == ["y1", "y", "y&z1", "y&z"]
    lite = {t.label: t.factors for t in ecad_terms(1, 1, lite=True)}
    assert lite["y1&z1"] == ("q", "r", "u1", "s1")
    assert {t.label: t.factors for t in ecad_terms(1, 1)}["y1&z1"] == ("q", "r", "t1_1")
    assert LossTerm("y", ("q",)) in esmm_terms()
