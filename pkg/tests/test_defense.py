import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vidbackdoor.attack import TriggerMask, TriggerPattern, init_trigger
from vidbackdoor.defense import (AugmentReport, ReversedTrigger, anomaly_index, augmentation_resistance,
                                 flagged_classes, probe_set, reverse_engineer_trigger, run_cleanse, run_spectral,
                                 signature_scores, spectral_filter)
from vidbackdoor.models import ModelSpec, TrainConfig, build_model
from vidbackdoor.videodata import ShapeClassSpec, default_class_specs, generate_dataset

DIMS = (4, 8, 8, 3)


@pytest.fixture(scope="module")
def ds():
    specs = [ShapeClassSpec(s.kind, s.motion, s.intensity, 3) for s in default_class_specs()]
    return generate_dataset(specs, per_class_train=6, per_class_test=3, dims=DIMS, seed=4)


@pytest.fixture(scope="module")
def model():
    return build_model(ModelSpec("conv3d_small", DIMS, 5, seed=1))


def _eig2(c):
    """Top eigenvector of a symmetric 2x2 matrix in closed form."""
    a, b, d = c[0, 0], c[0, 1], c[1, 1]
    lam = (a + d) / 2 + np.sqrt(((a - d) / 2) ** 2 + b * b)
    v = np.array([b, lam - a]) if abs(b) > 1e-300 else (np.array([1.0, 0.0]) if a >= d else np.array([0.0, 1.0]))
    return v / np.linalg.norm(v)


def test_two_cluster_fixture_matches_closed_form_eigen():
    rng = np.random.default_rng(0)
    clean = rng.normal(0, 0.5, (70, 2))
    poison = rng.normal(0, 0.5, (30, 2)) + [10, 0]
    f = np.vstack([clean, poison])
    scores = signature_scores(f)
    c = f - f.mean(0)
    v = _eig2(c.T @ c)
    np.testing.assert_allclose(scores, (c @ v) ** 2, rtol=1e-10)
    assert abs(v[0]) > 0.99
    assert scores[70:].min() > scores[:70].max()


def test_identical_features_score_zero():
    assert not signature_scores(np.ones((5, 3))).any()


def test_too_few_rows_rejected():
    with pytest.raises(ValueError):
        signature_scores(np.ones((1, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_scores_invariant_to_translation_and_rotation(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(20, 4)) * [3, 1, 0.5, 0.2]
    base = signature_scores(f)
    np.testing.assert_allclose(signature_scores(f + rng.normal(size=4) * 100), base, rtol=1e-6, atol=1e-8)
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    np.testing.assert_allclose(signature_scores(f @ q), base, rtol=1e-6, atol=1e-8)


def test_filter_budget_and_ties():
    ids = np.array([40, 10, 30, 20])
    scores = np.array([1.0, 1.0, 5.0, 1.0])
    assert spectral_filter(scores, ids, 2).tolist() == [10, 30]
    assert spectral_filter(scores, ids, 0).tolist() == []
    assert spectral_filter(scores, ids, 2, multiplier=1.5).tolist() == [10, 20, 30]


def test_filter_clamps_with_warning():
    with pytest.warns(UserWarning):
        out = spectral_filter(np.arange(4.0), np.arange(4), 10)
    assert out.tolist() == [0, 1, 2, 3]


def test_filter_whole_class_without_warning():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert len(spectral_filter(np.arange(4.0), np.arange(4), 4)) == 4


def test_planted_separation_fixture():
    rng = np.random.default_rng(5)
    f = np.vstack([rng.normal(0, 1, (71, 16)), rng.normal(0, 1, (30, 16)) + 4])
    ids = np.arange(101)
    removed = spectral_filter(signature_scores(f), ids, 30)
    assert len(removed) == 30
    assert np.count_nonzero(removed >= 71) >= 28


def test_run_spectral_report(ds, model):
    target_ids = ds.train.ids[ds.train.labels == 0]
    rep = run_spectral(model, ds, 0, target_ids[:2])
    assert rep.budget == len(rep.removed_ids) == 2
    assert set(rep.removed_ids) <= set(target_ids.tolist())
    assert rep.counts["poisoned_total"] == 2 and rep.counts["clean_total"] == len(target_ids) - 2
    assert rep.counts["clean_removed"] + rep.counts["poisoned_removed"] == 2
    assert sorted(rep.to_json()) == ["budget", "counts", "removed_ids", "scores"]


def test_mad_hand_computed_value():
    idx = anomaly_index([1, 2, 3, 4, 100])
    assert idx[4] == pytest.approx(97 / 1.4826, abs=1e-6)
    assert idx[4] == pytest.approx(65.43, abs=5e-3)
    np.testing.assert_allclose(idx[:4], np.array([2, 1, 0, 1]) / 1.4826)


def test_mad_degenerate_all_equal():
    assert not anomaly_index([3.0, 3.0, 3.0, 3.0]).any()


def test_mad_needs_three_classes():
    with pytest.raises(ValueError):
        anomaly_index([1.0, 2.0])


def test_flagging_threshold_is_exclusive():
    # med 10, devs [2*1.4826, 1, 0, 1, 1] -> MAD 1, index of class 0 is exactly 2
    l1 = [10 - 2 * 1.4826, 9, 10, 11, 11]
    idx = anomaly_index(l1)
    assert idx[0] == pytest.approx(2.0, abs=1e-12)
    assert flagged_classes(l1, threshold=idx[0]) == []
    assert flagged_classes([1, 9, 10, 11, 11]) == [0]
    # large outliers above the median are not flagged
    assert flagged_classes([10, 9, 10, 11, 100]) == []


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.1, 100), min_size=3, max_size=8), st.floats(1e-3, 1e3))
def test_mad_scale_invariance(l1, c):
    np.testing.assert_allclose(anomaly_index(np.array(l1) * c), anomaly_index(l1), rtol=1e-9, atol=1e-9)


def test_zero_steps_gives_seeded_init(ds, model):
    probes = probe_set(ds, 0, 2)
    r = reverse_engineer_trigger(model, probes, 0, steps=0, seed=3)
    m0 = np.random.default_rng(3).uniform(-2.0, 0.0, (8, 8)).astype(np.float32)
    assert r.l1 == pytest.approx(float((1 / (1 + np.exp(-m0))).sum()), rel=1e-6)
    assert len(r.objective) == 1


def test_large_lambda_drives_mask_to_zero(ds, model):
    probes = probe_set(ds, 0, 2)
    start = reverse_engineer_trigger(model, probes, 0, lam=100.0, steps=0).l1
    r = reverse_engineer_trigger(model, probes, 0, lam=100.0, steps=30)
    assert r.l1 < 0.01 * start


def test_objective_non_increasing(ds, model):
    r = reverse_engineer_trigger(model, probe_set(ds, 2, 3), 2, lam=1e-3, steps=25, lr=1.0)
    assert len(r.objective) == 26
    assert np.all(np.diff(r.objective) <= 1e-6)
    assert 0 <= r.mask.min() and r.mask.max() <= 1 and r.pattern.shape == (3,)


def test_probe_set_excludes_class(ds):
    p = probe_set(ds, 1, 2)
    assert len(p) == 8
    other = ds.test.frames[ds.test.labels != 1]
    assert all(any(np.array_equal(x, o) for o in other) for x in p)


def test_run_cleanse_report(ds, model):
    rep, rev = run_cleanse(model, ds, steps=3, probes_per_class=1)
    assert len(rep.l1_norms) == len(rev) == 5
    assert min(rep.anomaly_index) >= 0
    assert sorted(rep.to_json()) == ["anomaly_index", "flagged_classes", "l1_norms"]


def test_reversed_trigger_packs_into_trigger_file_shape():
    r = ReversedTrigger(1, np.full((8, 8), 0.25, np.float32), np.array([0.1, 0.2, 0.3], np.float32), 16.0, [1.0, 0.5])
    t = r.as_trigger(DIMS)
    assert t.values.shape == (2, 8, 8, 3) and t.kind == "reversed"
    assert np.all(t.values[0] == 0.25)
    np.testing.assert_array_equal(t.values[1, 3, 4], r.pattern)


def test_augmentation_arms_identical_without_augment(ds):
    spec = ModelSpec("conv3d_small", DIMS, 5, seed=2)
    trig = TriggerPattern(init_trigger(3, DIMS, 0))
    mask = TriggerMask.bottom_right(3, DIMS)
    cfg = TrainConfig(epochs=1, batch_size=8)
    calls = []

    def no_aug_train(data, c):
        from vidbackdoor.models import train
        calls.append(c.augment)
        m = build_model(spec)
        train(m, data, TrainConfig(c.epochs, c.batch_size, c.learning_rate, c.momentum, c.seed, False))
        return m

    rep = augmentation_resistance(ds, spec, cfg, trig, mask, 0, train_fn=no_aug_train)
    assert calls == [False, True]
    assert rep.asr_no_augment == rep.asr_augment and rep.asr_difference == 0.0
    assert rep.clean_acc_no_augment == rep.clean_acc_augment
    assert isinstance(rep, AugmentReport)
    assert rep.to_json()["augment_applied_to"] == "all_training_samples"
