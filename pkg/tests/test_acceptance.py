"""Acceptance gate: every criterion at its stated tolerance, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py``; the summary block at the end of the
session lists the verdicts. The full set trains roughly a dozen models on
MovingShapes-5 and takes about 40 minutes on one CPU core.
"""
import json
import time

import numpy as np
import pytest

from vidbackdoor.attack import PerturbConfig, pgd_perturb_frames
from vidbackdoor.defense import anomaly_index, signature_scores
from vidbackdoor.harness import StageCache, _make_dataset, compute_asr, run_pipeline, train_model
from vidbackdoor.models import ModelSpec, evaluate_accuracy, load_checkpoint

import gradcases
from conftest import record
from test_harness import NO_MASK, NO_TRIGGER, PixelModel, _split, brute_force_asr


def test_gradient_suite():
    t0 = time.perf_counter()
    try:
        worst, failure = max(gradcases.run_trials(op, trials=100) for op in gradcases.OPS), None
    except AssertionError as exc:
        worst, failure = float("nan"), str(exc)
    secs = time.perf_counter() - t0
    ok = failure is None and secs < 120
    record(1, "gradient suite", ok, failure or f"{len(gradcases.OPS)} ops x 100 trials at tolerance 1e-6, "
                                               f"worst rel err {worst:.2e}, {secs:.1f}s (< 120s)")
    assert ok


@pytest.mark.slow
def test_clean_baseline(base, cache):
    data = _make_dataset(base)
    spec = ModelSpec(base.model.arch, data.dims, data.class_count, base.sub_seed("model"))
    t0 = time.perf_counter()
    model = train_model(spec, data, base.train_config(), cache)
    secs = time.perf_counter() - t0
    acc = evaluate_accuracy(model, data.test)
    ok = acc >= 0.90 and secs < 600
    record(2, "clean baseline", ok, f"test accuracy {acc:.4f} (>= 0.90), trained in {secs:.0f}s")
    assert ok


@pytest.mark.slow
def test_attack_efficacy_gap(runs):
    _, uni = runs()
    _, static = runs(**{"trigger.kind": "fixed_static"})
    gap = uni.asr - static.asr
    drop = uni.clean_accuracy_clean_model - uni.clean_accuracy_infected_model
    ok = uni.asr >= 0.70 and static.asr <= 0.20 and gap >= 0.40 and abs(drop) <= 0.03
    record(3, "attack efficacy gap", ok,
           f"ASR universal {uni.asr:.4f} (>= 0.70), static {static.asr:.4f} (<= 0.20), gap {gap:.4f} (>= 0.40), "
           f"clean acc {uni.clean_accuracy_clean_model:.4f} -> {uni.clean_accuracy_infected_model:.4f} (<= 3 pts)")
    assert ok


@pytest.mark.slow
def test_perturbation_ablation_ordering(runs):
    _, targeted = runs()
    _, uniform = runs(**{"perturb.kind": "uniform"})
    _, none = runs(**{"perturb.kind": "none"})
    ok = targeted.asr >= none.asr and uniform.asr >= none.asr
    record(4, "perturbation ablation ordering", ok,
           f"ASR targeted {targeted.asr:.4f}, uniform {uniform.asr:.4f}, none {none.asr:.4f}")
    assert ok


@pytest.mark.slow
def test_rise_then_drop(runs):
    asr = {p: runs(**{"poison.fraction": p})[1].asr if p != 0.3 else runs()[1].asr for p in (0.1, 0.3, 0.7, 1.0)}
    ok = asr[1.0] < asr[0.3]
    record(5, "rise then drop", ok, "ASR by poison fraction " + ", ".join(f"{p:g}: {a:.4f}" for p, a in asr.items()))
    assert ok


@pytest.mark.slow
def test_pgd_contract(runs):
    cfg, _ = runs()
    out = cfg.out_dir
    data = _make_dataset(cfg)
    clean = load_checkpoint(f"{out}/clean_model.vbm")
    ids = json.loads(open(f"{out}/poison_ids.json").read())
    pos = np.flatnonzero(np.isin(data.train.ids, ids))
    x = data.train.frames[pos]
    worst, in_box = [0.0], [True]

    def check(it, xh):
        worst[0] = max(worst[0], float(np.abs(xh.astype(np.float64) - x).max()))
        in_box[0] &= bool(xh.min() >= 0 and xh.max() <= 1)

    pc = cfg.perturb_config()
    pgd_perturb_frames(clean, x, data.train.labels[pos], pc, check)
    zero = pgd_perturb_frames(clean, x, data.train.labels[pos], PerturbConfig(pc.kind, pc.epsilon, 0))
    identity = zero.tobytes() == x.tobytes()
    ok = worst[0] <= pc.epsilon + 1e-7 and in_box[0] and identity
    record(6, "PGD contract", ok, f"{len(pos)} samples x {pc.steps} iterations, max |dx| {worst[0]:.6f} "
                                  f"(eps {pc.epsilon:.6f}), in [0,1]: {in_box[0]}, zero-step identity: {identity}")
    assert ok


@pytest.mark.slow
def test_spectral_signatures(runs):
    _, res = runs(defenses=["spectral"])
    c = res.defense_reports["spectral"]["counts"]
    budget = res.defense_reports["spectral"]["budget"]
    # closed-form 2x2 oracle: clean near (0,0), poison near (10,0)
    rng = np.random.default_rng(0)
    f = np.vstack([rng.normal(0, 0.5, (70, 2)), rng.normal(0, 0.5, (30, 2)) + [10, 0]])
    cen = f - f.mean(0)
    cov = cen.T @ cen
    a, b, d = cov[0, 0], cov[0, 1], cov[1, 1]
    lam = (a + d) / 2 + np.sqrt(((a - d) / 2) ** 2 + b * b)
    v = np.array([b, lam - a]) / np.hypot(b, lam - a)
    oracle = bool(np.allclose(signature_scores(f), (cen @ v) ** 2, rtol=1e-10))
    ok = budget == 30 and c["poisoned_removed"] >= 28 and oracle
    record(7, "spectral signatures", ok, f"removed {c['poisoned_removed']}/{c['poisoned_total']} poisons and "
                                         f"{c['clean_removed']} clean with budget {budget}; 2x2 oracle match: {oracle}")
    assert ok


def test_mad_oracle():
    idx = anomaly_index([1, 2, 3, 4, 100])
    rng = np.random.default_rng(1)
    inv = True
    for _ in range(50):
        l1 = rng.uniform(0.1, 50, int(rng.integers(3, 10)))
        inv &= bool(np.allclose(anomaly_index(l1 * rng.uniform(1e-3, 1e3)), anomaly_index(l1), rtol=1e-9, atol=1e-12))
    ok = abs(idx[4] - 97 / 1.4826) <= 1e-6 and abs(idx[4] - 65.43) < 5e-3 and inv
    record(8, "MAD oracle", ok, f"index(100) = {idx[4]:.6f} (97/1.4826 = 65.43); 50 scalings invariant: {inv}")
    assert ok


def test_asr_oracle_equivalence():
    rng = np.random.default_rng(2)
    mismatches = checked = 0
    while checked < 1000:
        n = int(rng.integers(1, 40))
        labels, preds, target = rng.integers(0, 4, n), rng.integers(0, 4, n), int(rng.integers(0, 4))
        if np.all(labels == target):
            continue
        checked += 1
        got = compute_asr(PixelModel(), _split(labels, preds), NO_TRIGGER, NO_MASK, target)
        mismatches += got != brute_force_asr(labels, preds, target)
    ok = mismatches == 0
    record(9, "ASR oracle equivalence", ok, f"{checked} random fixtures, {mismatches} mismatches")
    assert ok


@pytest.mark.slow
def test_determinism(runs, base):
    _, first = runs()
    fresh = run_pipeline(base.replace(out_dir=f"{base.out_dir}/../default"), StageCache())
    ok = fresh.payload() == first.payload()
    record(10, "determinism", ok, "two full default runs with seed "
                                  f"{base.seed}: result.json payloads {'identical' if ok else 'DIFFER'}")
    assert ok


@pytest.mark.slow
def test_augmentation_residual(runs):
    _, res = runs(defenses=["augment"])
    a = res.defense_reports["augment"]
    ok = a["asr_augment"] >= 0.35
    record(11, "augmentation residual", ok, f"ASR with augmentation {a['asr_augment']:.4f} (>= 0.35), "
                                            f"without {a['asr_no_augment']:.4f}")
    assert ok
