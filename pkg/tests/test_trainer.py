import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmoge import tensor as tn
from vmoge.data import featurize_recordings
from vmoge.synthgen import SynthConfig, generate_dataset
from vmoge.trainer import (
    DivergenceError, TrainConfig, accuracy, adam_step, auc, cross_validate, gating_report,
    pearson_r, subject_kfold, train_model,
)

SMALL = dict(granularity="single-coarse", d_token=4, heads=1, layers=1, d_h=4, d_g=4, d_z=2,
             batch_size=8, folds=2, eval_samples=2)


@pytest.fixture(scope="module")
def small_features():
    recs, _ = generate_dataset(SynthConfig(subjects_per_class=3, channels=4, duration=4.0,
                                           target_channels=(0, 1), seed=3))
    return featurize_recordings(recs, epoch_sec=2.0)


@settings(max_examples=100)
@given(n0=st.integers(2, 12), n1=st.integers(2, 12), folds=st.integers(2, 5), seed=st.integers(0, 10**6))
def test_kfold_partitions_and_stratifies(n0, n1, folds, seed):
    if min(n0, n1) < folds:
        with pytest.raises(ValueError):
            subject_kfold({i: int(i >= n0) for i in range(n0 + n1)}, folds, seed)
        return
    labels = {i: int(i >= n0) for i in range(n0 + n1)}
    a = subject_kfold(labels, folds, seed)
    assert set(a) == set(labels) and set(a.values()) == set(range(folds))
    for c, n in ((0, n0), (1, n1)):
        counts = np.bincount([a[s] for s, y in labels.items() if y == c], minlength=folds)
        assert counts.max() - counts.min() <= 1 and counts.sum() == n
    assert a == subject_kfold(labels, folds, seed)


def test_auc_values():
    assert auc([0.1, 0.9], [0, 1]) == 1.0
    assert auc([0.9, 0.1], [0, 1]) == 0.0
    assert auc([0.5, 0.5, 0.5], [0, 1, 1]) == 0.5
    assert auc([0.2, 0.3], [1, 1]) is None


@settings(max_examples=100)
@given(seed=st.integers(0, 10**6))
def test_auc_invariant_to_monotone_maps(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=20)
    y = np.r_[np.zeros(10), np.ones(10)]
    a = auc(s, y)
    assert auc(np.exp(3 * s) + 1, y) == pytest.approx(a)
    assert auc(-s, y) == pytest.approx(1 - a)
    # brute force pair count
    pairs = [(p > n) + 0.5 * (p == n) for p in s[y == 1] for n in s[y == 0]]
    assert a == pytest.approx(np.mean(pairs))


def test_accuracy_and_pearson():
    assert accuracy([0.2, 0.7, 0.5], [0, 1, 0]) == pytest.approx(2 / 3)
    r, p = pearson_r([1, 2, 3, 4, 5.5], [2, 4, 6, 8, 10])
    assert r > 0.99 and p < 0.01
    assert pearson_r([1, 1, 1], [1, 2, 3]) is None
    assert pearson_r([1, 2], [1, 2]) is None


def test_adam_first_step_by_hand():
    store = tn.ParameterStore()
    w = store.add("w", np.array([1.0, -2.0]))
    g = np.array([0.5, -0.1])
    adam_step(store, {"w": g}, lr=0.1)
    # bias-corrected moments equal g and g**2 after one step
    assert np.allclose(w.data, [1.0, -2.0] - 0.1 * g / (np.abs(g) + 1e-8))
    adam_step(store, {"w": g}, lr=0.1)
    m = (0.9 * 0.1 * g + 0.1 * g) / (1 - 0.81)
    v = (0.999 * 0.001 * g * g + 0.001 * g * g) / (1 - 0.999**2)
    assert np.allclose(w.data, [1.0, -2.0] - 0.1 * g / (np.abs(g) + 1e-8) - 0.1 * m / (np.sqrt(v) + 1e-8))
    assert store.t == 2


def test_adam_skips_nonfinite(caplog):
    store = tn.ParameterStore()
    w = store.add("w", np.array([1.0]))
    adam_step(store, {"w": np.array([np.nan])})
    assert w.data[0] == 1.0 and store.t == 0 and store.skipped == 1


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(folds=1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(lambda_kl=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(prior="bogus")
    assert TrainConfig(prior="pure").prior == "pure-normalized"


def test_zero_epochs_leaves_parameters(small_features):
    from vmoge.model import VMoGE
    cfg = TrainConfig(epochs=0, **SMALL)
    model, trace = train_model(small_features, cfg)
    ref = VMoGE(cfg.model_config(), small_features.fs, seed=cfg.seed)
    assert trace == []
    assert all(np.array_equal(model.store[k].data, ref.store[k].data) for k in ref.store)


def test_single_class_rejected(small_features):
    one = small_features.subset(np.flatnonzero(small_features.labels == 0))
    with pytest.raises(ValueError):
        train_model(one, TrainConfig(epochs=1, **SMALL))


def test_divergence_raises(small_features):
    cfg = TrainConfig(epochs=1, **SMALL)
    feats = small_features.subset(np.arange(len(small_features)))
    feats.filtered = feats.filtered.copy()
    feats.filtered[0, 0, 0, 0] = np.inf
    with pytest.raises(DivergenceError) as exc:
        train_model(feats, cfg)
    assert isinstance(exc.value, ArithmeticError)


def test_training_reduces_loss_and_is_deterministic(small_features):
    cfg = TrainConfig(epochs=6, lr=5e-3, **SMALL)
    _, t1 = train_model(small_features, cfg)
    _, t2 = train_model(small_features, cfg)
    assert t1 == t2
    per_epoch = len(t1) // 6
    first = np.mean([r["total"] for r in t1[:per_epoch]])
    last = np.mean([r["total"] for r in t1[-per_epoch:]])
    assert last < first


def test_pure_prior_kl_finite(small_features):
    _, trace = train_model(small_features, TrainConfig(epochs=1, prior="pure", **SMALL))
    assert all(np.all(np.isfinite(r["kl"])) for r in trace)


def test_cross_validate_aggregates(small_features):
    res = cross_validate(small_features, TrainConfig(epochs=1, **SMALL), workers=1)
    agg = res.aggregate()
    assert len(res.folds) == 2
    assert agg["auc"]["mean"] == pytest.approx(np.mean([f.auc for f in res.folds]))
    assert sum(f.n_test for f in res.folds) == len(small_features)
    assert np.allclose(res.mean_gating().sum(), 1)
    att = res.attribution()
    assert att.shape == (4, 4) and np.allclose(att.max(axis=1), 1)
    m = res.metrics()
    assert set(m["gating_mean"]) == {"delta", "theta", "alpha", "beta"}
    rep = gating_report(res.records, att)
    assert len(rep["quartiles"]) == 8 and len(rep["attribution"]) == 16
    assert {c["covariate"] for c in rep["correlations"]} <= {"age", "score"}


def test_no_subject_in_two_folds(small_features):
    res = cross_validate(small_features, TrainConfig(epochs=0, **SMALL), workers=1)
    seen = {}
    for f in res.folds:
        for r in f.records:
            assert seen.setdefault(r.subject, f.fold) == f.fold


def test_gating_report_empty():
    with pytest.raises(ValueError):
        gating_report([])


def test_gate_warmup_freezes_gate(small_features):
    from vmoge.model import VMoGE
    cfg = TrainConfig(epochs=1, gate_warmup=1, **SMALL)
    model, _ = train_model(small_features, cfg)
    ref = VMoGE(cfg.model_config(), small_features.fs, seed=cfg.seed)
    for k in ref.store:
        same = np.array_equal(model.store[k].data, ref.store[k].data)
        assert same == (".gate." in k or ".phi." in k), k


def test_adam_lr_scale():
    store = tn.ParameterStore()
    a = store.add("a", np.array([0.0]))
    b = store.add("b", np.array([0.0]))
    adam_step(store, {"a": np.array([1.0]), "b": np.array([1.0])}, lr=0.1, lr_scale={"b": 0.5})
    assert a.data[0] == pytest.approx(-0.1) and b.data[0] == pytest.approx(-0.05)
