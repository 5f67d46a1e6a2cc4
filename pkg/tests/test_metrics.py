import numpy as np
import pytest

from akmnet import RngStream, build_model, make_variant
from akmnet.evaluate import (
    ClipRecord,
    apex_distance,
    apex_overlap,
    accuracy_of,
    confusion_matrix,
    evaluate_fold,
    loso_run,
    max_key_index,
    record_clip,
    signal_recovery,
)
from akmnet.train import TrainConfig

from test_model import tiny_model_config
from test_training import tiny_synth


def make_record(clip_id="c", label=0, prediction=0, frame_count=8,
                indices=(1,), beta=None, apex=None, framerate=None,
                subject="s0"):
    if beta is None:
        beta = [0.0] * frame_count
    return ClipRecord(clip_id=clip_id, subject_id=subject, label=label,
                      prediction=prediction, probs=[1.0],
                      frame_count=frame_count, n_selected=len(indices),
                      indices=tuple(indices), beta=list(beta),
                      fallback=False, apex=apex, framerate=framerate)


class TestConfusion:
    def test_counts_and_accuracy(self):
        records = [make_record(label=0, prediction=0),
                   make_record(label=0, prediction=1),
                   make_record(label=1, prediction=1),
                   make_record(label=1, prediction=1)]
        conf = confusion_matrix(records, 2)
        np.testing.assert_array_equal(conf, [[1, 1], [0, 2]])
        assert accuracy_of(conf) == 0.75

    def test_empty_is_zero(self):
        assert accuracy_of(np.zeros((3, 3), dtype=np.int64)) == 0.0


class TestRecords:
    def test_record_matches_forward(self):
        ds = tiny_synth(n_clips=2)
        model = build_model(tiny_model_config(n_classes=2), seed=0)
        clip = ds.clips[0]
        rec = record_clip(model, clip)
        out = model.forward(clip.frames)
        assert rec.prediction == out.prediction
        assert rec.frame_count == clip.frame_count
        assert rec.indices == out.selection.indices
        assert rec.apex == clip.apex and rec.framerate == clip.framerate
        np.testing.assert_allclose(rec.probs, out.probs.data, rtol=1e-6)

    def test_fold_report_deterministic_policy_single_round(self):
        ds = tiny_synth(n_clips=4)
        model = build_model(tiny_model_config(n_classes=2), seed=0)
        report = evaluate_fold(model, ds.clips, n_classes=2)
        assert report.n_rounds == 1
        assert len(report.records) == 4
        assert report.accuracy == accuracy_of(report.confusion)

    def test_fold_report_stochastic_policy_averages_rounds(self):
        ds = tiny_synth(n_clips=4)
        model = build_model(tiny_model_config(n_classes=2),
                            policy=make_variant("va-random:2"), seed=0)
        report = evaluate_fold(model, ds.clips, n_classes=2,
                               rng=RngStream(1))
        assert report.n_rounds == 5
        assert 0.0 <= report.accuracy <= 1.0

    def test_report_serializes(self):
        ds = tiny_synth(n_clips=2)
        model = build_model(tiny_model_config(n_classes=2), seed=0)
        report = evaluate_fold(model, ds.clips, n_classes=2)
        d = report.to_dict()
        assert set(d) == {"subject_id", "records", "confusion", "accuracy",
                          "n_rounds"}
        assert isinstance(d["records"][0]["indices"], list)


class TestLoso:
    def run(self, clips, n_classes=2, **kw):
        seeds = []

        def factory(seed):
            seeds.append(seed)
            return build_model(tiny_model_config(n_classes=n_classes), seed=seed)

        config = TrainConfig(epochs=1, batch_size=4, seed=0, **kw)
        report = loso_run(clips, factory, config, n_classes=n_classes)
        return report, seeds

    def test_every_clip_tested_once(self):
        ds = tiny_synth(n_clips=8)
        report, seeds = self.run(ds.clips)
        tested = [r.clip_id for r in report.records]
        assert sorted(tested) == sorted(c.clip_id for c in ds.clips)
        assert len(report.folds) == 2

    def test_fresh_model_per_fold(self):
        ds = tiny_synth(n_clips=8)
        _, seeds = self.run(ds.clips)
        assert len(seeds) == 2 and len(set(seeds)) == 2

    def test_pooled_accuracy_from_summed_confusion(self):
        ds = tiny_synth(n_clips=8)
        report, _ = self.run(ds.clips)
        total = sum(f.confusion for f in report.folds)
        np.testing.assert_array_equal(report.confusion, total)
        assert report.pooled_accuracy == accuracy_of(report.confusion)

    def test_single_subject_rejected(self):
        ds = tiny_synth(n_clips=4)
        for clip in ds.clips:
            clip.subject_id = "only"
        with pytest.raises(ValueError, match="at least 2 subjects"):
            self.run(ds.clips)

    def test_missing_class_in_fold_warns(self):
        ds = tiny_synth(n_clips=8)
        # push every class-1 clip onto one subject: the fold holding that
        # subject out trains with class 1 absent
        for clip in ds.clips:
            clip.subject_id = "s-one" if clip.label == 1 else "s-zero"
        with pytest.warns(UserWarning, match="no clips of class"):
            self.run(ds.clips)


class TestApexMetrics:
    def fixture(self):
        return [
            # apex selected and top-scored
            make_record("a", indices=(2, 5), beta=[0, .2, 0, 0, .9, 0, 0, 0],
                        apex=5),
            # apex selected but another frame scores higher
            make_record("b", indices=(1, 2), beta=[.8, .3, 0, 0, 0, 0, 0, 0],
                        apex=2),
            # apex not selected at all
            make_record("c", indices=(3,), beta=[0, 0, .5, 0, 0, 0, 0, 0],
                        apex=7),
            # no apex annotation
            make_record("d", indices=(4,)),
        ]

    def test_overlap_hand_counted(self):
        report = apex_overlap(self.fixture())
        assert report.n_evaluated == 3 and report.n_excluded == 1
        np.testing.assert_allclose(report.ratio, 2 / 3)
        np.testing.assert_allclose(report.ratio_high, 1 / 3)

    def test_max_key_earliest_tie(self):
        rec = make_record(indices=(2, 4, 6), beta=[0, .5, 0, .5, 0, .3, 0, 0])
        assert max_key_index(rec) == 2

    def test_all_excluded(self):
        report = apex_overlap([make_record("x"), make_record("y")])
        assert report.n_evaluated == 0 and report.n_excluded == 2
        assert report.ratio == 0.0

    def test_distance_frame_units(self):
        recs = [make_record("a", indices=(3,), beta=[0, 0, .5, 0, 0, 0, 0, 0],
                            apex=5, framerate=60.0)]
        report = apex_distance(recs)
        assert report.per_clip["a"] == 2.0
        assert report.mean == 2.0

    def test_distance_milliseconds_at_200fps(self):
        recs = [make_record("a", indices=(3,), beta=[0, 0, .5, 0, 0, 0, 0, 0],
                            apex=5, framerate=200.0)]
        report = apex_distance(recs)
        np.testing.assert_allclose(report.per_clip["a"], 2.0 / 3.33, rtol=1e-12)

    def test_distance_other_framerates_not_scaled(self):
        recs = [make_record("a", indices=(3,), beta=[0, 0, .5, 0, 0, 0, 0, 0],
                            apex=5, framerate=100.0),
                make_record("b", indices=(1,), apex=1, framerate=None)]
        report = apex_distance(recs)
        assert report.per_clip["a"] == 2.0
        assert report.per_clip["b"] == 0.0
        assert report.n_excluded == 0

    def test_distance_excludes_unannotated(self):
        report = apex_distance([make_record("a")])
        assert report.n_excluded == 1 and report.per_clip == {}


class TestRecovery:
    def test_hand_counted_recall(self):
        truth = {"a": (3, 2), "b": (1, 2)}
        recs = [make_record("a", frame_count=8, indices=(3, 4, 7)),
                make_record("b", frame_count=4, indices=(2,))]
        report = signal_recovery(recs, truth)
        # a: hits {3,4} of {3,4} -> 1.0; b: hits {2} of {1,2} -> 0.5
        np.testing.assert_allclose(report.mean_recall, 0.75)
        np.testing.assert_allclose(report.mean_baseline,
                                   (3 / 8 + 1 / 4) / 2)

    def test_unknown_clips_skipped(self):
        truth = {"a": (1, 1)}
        recs = [make_record("a", indices=(1,)), make_record("zz", indices=(2,))]
        report = signal_recovery(recs, truth)
        assert list(report.per_clip) == ["a"]

    def test_no_truth_rejected(self):
        with pytest.raises(ValueError, match="no evaluated clip"):
            signal_recovery([make_record("a")], {})
