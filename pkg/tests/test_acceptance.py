"""Acceptance gate: ten product-level criteria, one test (and one verbose
pass/fail line) per criterion.

The heavy pipeline runs behind criteria 6-8 execute inside a session fixture,
twice with identical seeds; criteria 6-8 read the first run and criterion 10
byte-compares the two. Tolerances are pinned here and nowhere else.
"""

import json
import logging
import math
import time
import warnings
from types import SimpleNamespace

import numpy as np
import pytest

from akmnet import tensor as T
from akmnet.backbone import BackboneConfig
from akmnet.data import SynthSpec, synth_generate
from akmnet.evaluate import (
    ClipRecord,
    apex_distance,
    apex_overlap,
    evaluate_fold,
    loso_run,
    signal_recovery,
)
from akmnet.gradcheck import grad_check
from akmnet.model import ModelBuilder, ModelConfig, build_model
from akmnet.rng import RngStream
from akmnet.selection import (
    RoutingAudit,
    init_akm_params,
    mine,
    selection_backward,
)
from akmnet.train import TrainConfig, train
from akmnet.variants import make_variant
from akmnet.weights import save_weights

GRAD_TOL = 1e-4           # criterion 1: max relative error per parameter group
GRAD_SKIP_CAP = 0.10      # criterion 1: boundary-skip budget per instance
GRAD_BUDGET_S = 120.0
ORACLE_TOL = 1e-6         # criterion 3: absolute agreement with the oracle
ORACLE_BUDGET_S = 60.0
OVERFIT_EPOCH_CAP = 200   # criterion 6
OVERFIT_BUDGET_S = 600.0
RECOVERY_FACTOR = 2.0     # criterion 7: recall vs analytic random baseline
VARIANT_NAMES_RUN = ("s123", "s12", "s13", "s23", "va-all",
                     "va-norm16", "va-norm32", "va-random", "va-last10")


def micro_backbone(channels):
    return BackboneConfig(input_side=8, input_channels=1,
                          stage_widths=(2, channels), blocks_per_stage=1,
                          output_grid=(2, 2))


# criteria 6-8 pipeline, executed twice ------------------------------------

def _run_overfit(out_dir):
    """8-clip, 4-class planted-signal set at desk scale; full default model."""
    t0 = time.monotonic()
    dataset = synth_generate(SynthSpec(seed=21), n_clips=8, n_subjects=4)
    model = build_model(seed=11)
    accuracies = []

    def stop_at_perfect(stats):
        accuracies.append(evaluate_fold(model, dataset.clips, 4).accuracy)
        return accuracies[-1] == 1.0

    history = train(model, dataset.clips,
                    TrainConfig(epochs=OVERFIT_EPOCH_CAP, batch_size=8, seed=11),
                    on_epoch=stop_at_perfect)
    path = out_dir / "overfit.akmw"
    save_weights(path, model.parameters())
    return dict(final_accuracy=accuracies[-1], epochs_used=len(history.epochs),
                elapsed=time.monotonic() - t0, weights=path.read_bytes(),
                history=json.dumps(history.to_dicts(), sort_keys=True))


def _run_recovery():
    """60 clips, 4 classes, T in [12,24], 3-frame signal at 5x noise, LOSO
    over 6 subjects. Compact 16x16 stack; two cosine cycles (the margin loss
    amplifies whichever split exists, so the schedule must hold the
    signal-selecting basin long enough for the gate to tighten)."""
    dataset = synth_generate(SynthSpec(t_min=12, t_max=24, side=16, seed=33),
                             n_clips=60, n_subjects=6)
    backbone = BackboneConfig(input_side=16, input_channels=1,
                              stage_widths=(4, 8, 16), blocks_per_stage=1,
                              output_grid=(2, 2))
    builder = ModelBuilder(config=ModelConfig(backbone=backbone, gru_hidden=8))
    report = loso_run(dataset.clips, builder,
                      TrainConfig(epochs=48, cycles=2, batch_size=4,
                                  init_lr=2e-3, seed=5),
                      n_classes=4)
    recovery = signal_recovery(report.records, dataset.truth)
    return dict(report=json.dumps(report.to_dict(), sort_keys=True),
                recall=recovery.mean_recall, baseline=recovery.mean_baseline,
                pooled_accuracy=report.pooled_accuracy)


def _run_variants(out_dir, clips):
    """Short training of every selection policy on the overfit clip set."""
    results = {}
    weights = {}
    for name in VARIANT_NAMES_RUN:
        model = build_model(policy=make_variant(name), seed=17)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")   # va-random clamps on short clips
            history = train(model, clips,
                            TrainConfig(epochs=3, batch_size=8, seed=17))
            fold = evaluate_fold(model, clips, 4,
                                 rng=RngStream(17).child(f"eval-{name}"))
        path = out_dir / f"{name}.akmw"
        save_weights(path, model.parameters())
        results[name] = dict(report=fold.to_dict(), n_epochs=len(history.epochs))
        weights[name] = path.read_bytes()
    return dict(results=results, weights=weights,
                serialized=json.dumps(results, sort_keys=True))


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    logging.getLogger("akmnet.selection").setLevel(logging.ERROR)

    def run_once(tag):
        out = tmp_path_factory.mktemp(f"acceptance-{tag}")
        overfit = _run_overfit(out)
        recovery = _run_recovery()
        dataset = synth_generate(SynthSpec(seed=21), n_clips=8, n_subjects=4)
        variants = _run_variants(out, dataset.clips)
        return SimpleNamespace(overfit=overfit, recovery=recovery,
                               variants=variants)

    return run_once("a"), run_once("b")


# the ten criteria ---------------------------------------------------------

def test_criterion_01_gradient_fidelity():
    t0 = time.monotonic()
    root = RngStream(100)
    group_worst = {}
    for i in range(20):
        inst = root.child(f"instance-{i}")
        t_len = int(inst.integers(3, 9))
        channels = int(inst.integers(4, 9))
        n_classes = int(inst.integers(2, 5))
        config = ModelConfig(backbone=micro_backbone(channels),
                             n_classes=n_classes, gru_hidden=2, gru_layers=2,
                             dropout_p=0.0)
        model = build_model(config, seed=int(inst.integers(0, 2 ** 31)),
                            dtype=np.float64)
        clip = inst.normal((t_len, 8, 8), dtype=np.float64)
        label = int(inst.integers(0, n_classes))
        names = [n for n, _ in model.parameters()]
        params = [p for _, p in model.parameters()]

        def objective():
            return model.forward(clip, label=label, gate_grad="local").omega

        report = grad_check(objective, params, epsilon=1e-5, names=names,
                            max_coords=3, rng=inst.child("coords"))
        assert not report.failures, report.failures
        assert report.skip_fraction <= GRAD_SKIP_CAP, (
            f"instance {i}: {report.skip_fraction:.1%} of coordinates sat on "
            f"the selection boundary")
        for name, worst in zip(names, report.per_param):
            group = name.split(".", 1)[0]
            group_worst[group] = max(group_worst.get(group, 0.0), worst)
    elapsed = time.monotonic() - t0
    assert set(group_worst) == {"backbone", "akm", "gru", "head"}
    for group in sorted(group_worst):
        assert group_worst[group] < GRAD_TOL, (
            f"parameter group {group}: max rel err {group_worst[group]:.3e}")
    assert elapsed < GRAD_BUDGET_S, f"took {elapsed:.1f}s"


def test_criterion_02_straight_through_routing():
    rng = RngStream(202)

    # raw adjoint: unselected frames and non-surrogate scores are exactly 0
    for i in range(200):
        t_len = int(rng.integers(2, 9))
        c = int(rng.integers(2, 7))
        frames = rng.normal((t_len, c, 2, 2))
        n_keep = int(rng.integers(1, t_len + 1))
        kept = np.sort(rng.permutation(t_len)[:n_keep])
        surrogate = kept if i % 2 == 0 else None
        g_key = rng.normal((n_keep, c, 2, 2))
        d_frames, d_scores = selection_backward(g_key, frames, kept, surrogate)
        dropped = np.setdiff1d(np.arange(t_len), kept)
        assert not d_frames[dropped].any()            # bit-level zero
        np.testing.assert_array_equal(d_frames[kept], g_key)
        if surrogate is None:
            assert not d_scores.any()
        else:
            assert not d_scores[dropped].any()

    # end-to-end: the gather's backward audits itself on every pass
    passes_before, violations_before = RoutingAudit.snapshot()
    n_backward = 0
    for i in range(50):
        t_len = int(rng.integers(2, 9))
        c = int(rng.integers(2, 7))
        feats = T.Tensor(rng.normal((t_len, c, 2, 2)), requires_grad=True)
        akm = init_akm_params(c, rng.child(f"akm-{i}"))
        for mode in ("surrogate", "local"):
            key, sel, losses = mine(feats, akm, gate_grad=mode)
            loss = T.add(T.sum_(key.features), losses.combined)
            feats.grad = None
            akm.attention.grad = None
            loss.backward()            # raises if any routing leaks
            n_backward += 1
    passes_after, violations_after = RoutingAudit.snapshot()
    assert passes_after - passes_before >= n_backward
    assert violations_after == violations_before == 0


def test_criterion_03_forward_oracle_equivalence():
    def oracle(feats, w, margin_constant, sparsity_weight, margin_weight):
        pooled = feats.mean(axis=(2, 3))
        alpha = 1.0 / (1.0 + np.exp(-(pooled @ w)))
        prods = pooled * alpha[:, None]
        agg = np.array([math.fsum(prods[:, c]) for c in range(pooled.shape[1])])
        dots = pooled @ agg
        denom = (np.sqrt((pooled ** 2).sum(axis=1))
                 * math.sqrt(float((agg ** 2).sum())) + 1e-8)
        beta = np.clip(dots / denom, -1.0, 1.0)
        mean = math.fsum(beta) / len(beta)
        gate = beta > mean
        fallback = not gate.any()
        if fallback:
            gate = np.zeros(len(beta), dtype=bool)
            gate[int(np.argmax(beta))] = True
        kept = np.flatnonzero(gate)
        dropped = np.flatnonzero(~gate)
        relaxed = np.where(gate, beta, 0.0)
        l_sparse = max(0.0, float(relaxed.sum()) - 1.0)
        margin = float(beta[kept].mean())
        if dropped.size:
            margin -= float(beta[dropped].mean())
        l_margin = margin_constant - margin
        combined = sparsity_weight * l_sparse + margin_weight * l_margin
        return (alpha, beta, gate.astype(np.int8),
                tuple(int(i) + 1 for i in kept), fallback,
                l_sparse, l_margin, combined)

    t0 = time.monotonic()
    rng = RngStream(303)
    for i in range(1000):
        t_len = int(rng.integers(1, 11))
        c = int(rng.integers(2, 7))
        side = int(rng.integers(1, 3))
        feats = rng.normal((t_len, c, side, side), dtype=np.float64)
        akm = init_akm_params(c, rng.child(f"akm-{i}"), dtype=np.float64)
        key, sel, losses = mine(T.Tensor(feats, dtype=np.float64), akm,
                                gate_grad="local")
        (alpha, beta, gate, indices, fallback,
         l_sparse, l_margin, combined) = oracle(
            feats, akm.attention.data, akm.margin_constant,
            akm.sparsity_weight, akm.margin_weight)
        np.testing.assert_allclose(sel.alpha.data, alpha, atol=ORACLE_TOL, rtol=0)
        np.testing.assert_allclose(sel.beta.data, beta, atol=ORACLE_TOL, rtol=0)
        np.testing.assert_array_equal(sel.binary, gate)
        assert sel.indices == indices
        assert sel.fallback == fallback
        assert abs(float(losses.sparsity.data) - l_sparse) <= ORACLE_TOL
        assert abs(float(losses.margin.data) - l_margin) <= ORACLE_TOL
        assert abs(float(losses.combined.data) - combined) <= ORACLE_TOL
    elapsed = time.monotonic() - t0
    assert elapsed < ORACLE_BUDGET_S, f"took {elapsed:.1f}s"


def test_criterion_04_selection_invariants():
    rng = RngStream(404)
    n_fallback = 0
    for i in range(1000):
        t_len = int(rng.integers(1, 11))
        c = int(rng.integers(2, 7))
        feats = rng.normal((t_len, c, 2, 2), dtype=np.float64)
        akm = init_akm_params(c, rng.child(f"akm-{i}"), dtype=np.float64)
        key, sel, losses = mine(T.Tensor(feats, dtype=np.float64), akm,
                                gate_grad="local")

        assert len(sel.indices) >= 1
        idx = np.asarray(sel.indices)
        assert idx[0] >= 1 and idx[-1] <= t_len
        assert (np.diff(idx) > 0).all()

        beta = sel.beta.data
        mean = math.fsum(beta) / t_len
        if sel.fallback:
            n_fallback += 1
            assert not (beta > mean).any()
            assert len(sel.indices) == 1
            assert idx[0] == int(np.argmax(beta)) + 1
        else:
            np.testing.assert_array_equal(sel.binary.astype(bool), beta > mean)

        l_sparse = float(losses.sparsity.data)
        l_margin = float(losses.margin.data)
        assert l_sparse >= 0.0
        assert 0.0 <= l_margin <= 2.0
        if l_margin == 2.0:
            assert sel.fallback

        # exact equivariance: permuting frames permutes the decision
        perm = rng.permutation(t_len)
        key2, sel2, _ = mine(T.Tensor(feats[perm], dtype=np.float64), akm,
                             gate_grad="local")
        np.testing.assert_array_equal(sel2.alpha.data, sel.alpha.data[perm])
        np.testing.assert_array_equal(sel2.beta.data, sel.beta.data[perm])
        new_pos = {int(old): int(new) for new, old in enumerate(perm)}
        expected = {new_pos[i - 1] + 1 for i in sel.indices}
        assert set(sel2.indices) == expected
    assert 0 < n_fallback < 1000   # both regimes were exercised (T=1 falls back)


def test_criterion_05_variable_length_tolerance():
    model = build_model(ModelConfig(backbone=micro_backbone(4), n_classes=3,
                                    gru_hidden=2), seed=505)
    rng = RngStream(506)
    for t_len in (1, 9, 141):
        result = model.forward(rng.normal((t_len, 8, 8)))
        probs = result.probs.data
        assert probs.shape == (3,)
        np.testing.assert_allclose(probs.sum(), 1.0, rtol=1e-5)
        assert 1 <= len(result.selection.indices) <= t_len


def test_criterion_06_synthetic_overfit(pipeline_runs):
    run, _ = pipeline_runs
    overfit = run.overfit
    assert overfit["final_accuracy"] == 1.0, (
        f"training accuracy plateaued at {overfit['final_accuracy']:.3f}")
    assert overfit["epochs_used"] <= OVERFIT_EPOCH_CAP
    assert overfit["elapsed"] < OVERFIT_BUDGET_S, f"took {overfit['elapsed']:.0f}s"


def test_criterion_07_key_frame_recovery(pipeline_runs):
    run, _ = pipeline_runs
    rec = run.recovery
    assert rec["recall"] >= RECOVERY_FACTOR * rec["baseline"], (
        f"mean recall {rec['recall']:.3f} vs matched random baseline "
        f"{rec['baseline']:.3f}")


def test_criterion_08_variant_harness(pipeline_runs):
    run, _ = pipeline_runs
    results = run.variants["results"]
    assert set(results) == set(VARIANT_NAMES_RUN)
    record_keys = {"clip_id", "subject_id", "label", "prediction", "probs",
                   "frame_count", "n_selected", "indices", "beta", "fallback",
                   "apex", "framerate"}
    for name, entry in results.items():
        assert entry["n_epochs"] == 3, f"{name} stopped early"
        report = entry["report"]
        assert set(report) == {"subject_id", "records", "confusion",
                               "accuracy", "n_rounds"}
        assert len(report["records"]) == 8
        for record in report["records"]:
            assert set(record) == record_keys
            assert 1 <= record["n_selected"] <= record["frame_count"]
        expected_rounds = 5 if name == "va-random" else 1
        assert report["n_rounds"] == expected_rounds
    for record in results["va-all"]["report"]["records"]:
        assert record["indices"] == list(range(1, record["frame_count"] + 1))
    for record in results["va-last10"]["report"]["records"]:
        t_len = record["frame_count"]
        keep = min(10, t_len)
        assert record["indices"] == list(range(t_len - keep + 1, t_len + 1))


def test_criterion_09_metric_formulas():
    def record(clip_id, apex, framerate, indices, beta, t_len=10):
        return ClipRecord(clip_id=clip_id, subject_id="s", label=0,
                          prediction=0, probs=[1.0], frame_count=t_len,
                          n_selected=len(indices), indices=tuple(indices),
                          beta=list(beta), fallback=False, apex=apex,
                          framerate=framerate)

    beta_for = lambda peaks: [peaks.get(i, 0.1) for i in range(1, 11)]
    fixture = [
        # apex 5 selected AND carries the top selected score: hits both
        record("a", 5, 200.0, (3, 5, 8), beta_for({5: 0.9, 3: 0.4, 8: 0.2})),
        # apex 4 unselected; top selected frame is 6: distance 2 in ms
        record("b", 4, 200.0, (2, 6), beta_for({6: 0.8, 2: 0.3})),
        # no apex annotation: excluded from both metrics
        record("c", None, 200.0, (1, 2), beta_for({1: 0.7})),
        # apex 7 selected but top selected frame is 9: ratio only, frames
        record("d", 7, None, (7, 9), beta_for({9: 0.9, 7: 0.5})),
    ]

    overlap = apex_overlap(fixture)
    assert overlap.n_evaluated == 3
    assert overlap.n_excluded == 1
    assert overlap.ratio == 2.0 / 3.0          # clips a and d
    assert overlap.ratio_high == 1.0 / 3.0     # clip a only

    distance = apex_distance(fixture)
    assert distance.n_excluded == 1
    assert distance.per_clip == {"a": 0.0, "b": 2.0 / 3.33, "d": 2.0}
    assert distance.mean == (0.0 + 2.0 / 3.33 + 2.0) / 3.0


def test_criterion_10_determinism(pipeline_runs):
    first, second = pipeline_runs
    assert first.overfit["weights"] == second.overfit["weights"]
    assert first.overfit["history"] == second.overfit["history"]
    assert first.overfit["epochs_used"] == second.overfit["epochs_used"]
    assert first.recovery["report"] == second.recovery["report"]
    assert first.variants["serialized"] == second.variants["serialized"]
    assert set(first.variants["weights"]) == set(second.variants["weights"])
    for name, blob in first.variants["weights"].items():
        assert blob == second.variants["weights"][name], name
