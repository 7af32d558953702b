import numpy as np
import pytest
from scipy.special import expit

from hlvc.metrics import (
    EvalReport,
    PredictionSet,
    evaluate,
    global_average_precision,
    hit_at_1,
    mean_average_precision,
    perr,
)
from reference_metrics import (
    ref_global_average_precision,
    ref_hit_at_1,
    ref_mean_average_precision,
    ref_perr,
)


def random_instance(rng, max_videos=30, max_classes=12, quantize=False):
    v = int(rng.integers(2, max_videos + 1))
    c = int(rng.integers(2, max_classes + 1))
    scores = rng.random((v, c))
    if quantize:  # heavy ties stress the index tie-break rules
        scores = np.round(scores * 3) / 3.0
    positives = []
    for _ in range(v):
        g = int(rng.integers(1, c + 1))
        positives.append(rng.choice(c, size=g, replace=False).tolist())
    return PredictionSet(scores, positives)


class TestOracleEquivalence:
    @pytest.mark.parametrize("quantize", [False, True])
    def test_all_metrics_match_bruteforce(self, quantize):
        rng = np.random.default_rng(0 if quantize else 1)
        for _ in range(40):
            pred = random_instance(rng, quantize=quantize)
            rows = pred.scores.tolist()
            pos = [p.tolist() for p in pred.positives]
            assert hit_at_1(pred) == pytest.approx(ref_hit_at_1(rows, pos), abs=1e-12)
            assert perr(pred) == pytest.approx(ref_perr(rows, pos), abs=1e-12)
            got_map, got_pc = mean_average_precision(pred)
            want_map, want_pc = ref_mean_average_precision(rows, pos)
            assert got_map == pytest.approx(want_map, abs=1e-12)
            for g, w in zip(got_pc, want_pc):
                if w is None:
                    assert np.isnan(g)
                else:
                    assert g == pytest.approx(w, abs=1e-12)
            for k in (1, 3, 20):
                assert global_average_precision(pred, top_k=k) == pytest.approx(
                    ref_global_average_precision(rows, pos, k), abs=1e-12
                )


class TestHitAt1:
    def test_perfect_and_zero(self):
        scores = np.array([[0.9, 0.1], [0.2, 0.7]])
        assert hit_at_1(PredictionSet(scores, [[0], [1]])) == 1.0
        assert hit_at_1(PredictionSet(scores, [[1], [0]])) == 0.0

    def test_tie_goes_to_lower_index(self):
        pred = PredictionSet(np.array([[0.5, 0.5]]), [[1]])
        assert hit_at_1(pred) == 0.0
        pred = PredictionSet(np.array([[0.5, 0.5]]), [[0]])
        assert hit_at_1(pred) == 1.0


class TestPerr:
    def test_hand_case(self):
        # G=2, top-2 of [.9,.8,.7] is {0,1}, one of two positives hit
        pred = PredictionSet(np.array([[0.9, 0.8, 0.7]]), [[0, 2]])
        assert perr(pred) == 0.5

    def test_equal_recall_uses_per_video_g(self):
        scores = np.array([[0.9, 0.8, 0.1], [0.9, 0.8, 0.1]])
        pred = PredictionSet(scores, [[0], [0, 1, 2]])
        # video 0: top-1 hit; video 1: top-3 covers all three positives
        assert perr(pred) == 1.0

    def test_tie_break_by_label_index(self):
        pred = PredictionSet(np.array([[0.5, 0.5, 0.5]]), [[2]])
        assert perr(pred) == 0.0  # rank order 0,1,2 so top-1 is label 0

    def test_video_without_positives_rejected(self):
        with pytest.raises(ValueError):
            perr(PredictionSet(np.array([[0.5, 0.5]]), [[]]))


class TestMeanAveragePrecision:
    def test_hand_case(self):
        # class ranking: v1 (.9), v0 (.3), v2 (.3 ties, higher index)
        scores = np.array([[0.3], [0.9], [0.3]])
        mean_ap, per_class = mean_average_precision(PredictionSet(scores, [[0], [], []]))
        assert mean_ap == 0.5
        np.testing.assert_array_equal(per_class, [0.5])

    def test_multiple_positives_hand_case(self):
        scores = np.array([[0.9], [0.8], [0.7], [0.6]])
        pred = PredictionSet(scores, [[0], [], [0], []])
        mean_ap, _ = mean_average_precision(pred)
        assert mean_ap == pytest.approx((1.0 / 1.0 + 2.0 / 3.0) / 2.0, abs=1e-15)

    def test_classes_without_positives_get_nan(self):
        scores = np.random.default_rng(2).random((4, 3))
        _, per_class = mean_average_precision(PredictionSet(scores, [[0], [0], [0], [0]]))
        assert not np.isnan(per_class[0])
        assert np.isnan(per_class[1]) and np.isnan(per_class[2])

    def test_all_empty_rejected(self):
        with pytest.raises(ValueError):
            mean_average_precision(PredictionSet(np.ones((2, 2)), [[], []]))

    def test_perfect_ranking_is_one(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 4, size=30)
        scores = np.eye(4)[labels] + rng.random((30, 4)) * 0.01
        mean_ap, _ = mean_average_precision(PredictionSet(scores, [[l] for l in labels]))
        assert mean_ap == 1.0


class TestGlobalAveragePrecision:
    def test_hand_case_with_cap(self):
        # k=1 keeps only label 0 of video 0 and label 1 of video 1;
        # video 0's second positive (label 1, score .2) is pushed out but
        # still counts in the denominator
        scores = np.array([[0.9, 0.2], [0.1, 0.8]])
        pred = PredictionSet(scores, [[0, 1], [1]])
        got = global_average_precision(pred, top_k=1)
        assert got == pytest.approx((1.0 / 1.0 + 2.0 / 2.0) / 3.0, abs=1e-15)

    def test_pooled_tie_break_video_then_label(self):
        scores = np.array([[0.5, 0.5], [0.5, 0.1]])
        pred = PredictionSet(scores, [[1], [0]])
        # pooled order at score .5: (v0,l0) (v0,l1) (v1,l0), hits at ranks 2,3
        got = global_average_precision(pred, top_k=2)
        assert got == pytest.approx((1.0 / 2.0 + 2.0 / 3.0) / 2.0, abs=1e-15)

    def test_k_larger_than_classes(self):
        pred = PredictionSet(np.array([[0.9, 0.1]]), [[0]])
        assert global_average_precision(pred, top_k=50) == 1.0

    def test_invalid_k_rejected(self):
        pred = PredictionSet(np.ones((1, 2)), [[0]])
        with pytest.raises(ValueError):
            global_average_precision(pred, top_k=0)

    def test_no_positives_rejected(self):
        with pytest.raises(ValueError):
            global_average_precision(PredictionSet(np.ones((2, 2)), [[], []]))


class TestInvariances:
    def test_shift_and_monotone_transform(self):
        rng = np.random.default_rng(4)
        pred = random_instance(rng)
        base = (
            hit_at_1(pred),
            perr(pred),
            mean_average_precision(pred)[0],
            global_average_precision(pred, top_k=5),
        )
        for transform in (lambda s: s + 3.7, lambda s: expit(4.0 * s - 2.0)):
            other = PredictionSet(transform(pred.scores), [p.tolist() for p in pred.positives])
            got = (
                hit_at_1(other),
                perr(other),
                mean_average_precision(other)[0],
                global_average_precision(other, top_k=5),
            )
            np.testing.assert_allclose(got, base, rtol=1e-12)

    def test_video_permutation(self):
        rng = np.random.default_rng(5)
        pred = random_instance(rng)  # continuous scores: ties a.s. absent
        order = rng.permutation(pred.num_videos)
        shuffled = PredictionSet(
            pred.scores[order], [pred.positives[v].tolist() for v in order]
        )
        assert hit_at_1(shuffled) == pytest.approx(hit_at_1(pred), abs=1e-12)
        assert perr(shuffled) == pytest.approx(perr(pred), abs=1e-12)
        assert mean_average_precision(shuffled)[0] == pytest.approx(
            mean_average_precision(pred)[0], abs=1e-12
        )
        assert global_average_precision(shuffled) == pytest.approx(
            global_average_precision(pred), abs=1e-12
        )


class TestPredictionSet:
    def test_positives_deduped_and_sorted(self):
        pred = PredictionSet(np.ones((1, 4)), [[3, 1, 3, 1]])
        np.testing.assert_array_equal(pred.positives[0], [1, 3])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            PredictionSet(np.ones((1, 3)), [[3]])
        with pytest.raises(ValueError):
            PredictionSet(np.ones((1, 3)), [[-1]])

    def test_nonfinite_scores_rejected(self):
        with pytest.raises(ValueError):
            PredictionSet(np.array([[np.nan, 1.0]]), [[0]])

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            PredictionSet(np.ones((2, 2)), [[0]])

    def test_pos_mask(self):
        pred = PredictionSet(np.ones((2, 3)), [[0, 2], [1]])
        want = np.array([[True, False, True], [False, True, False]])
        np.testing.assert_array_equal(pred.pos_mask, want)


class TestEvalReport:
    def test_evaluate_collects_all_metrics(self):
        rng = np.random.default_rng(6)
        pred = random_instance(rng)
        report = evaluate(pred, layer="entities", top_k=7)
        assert report.layer == "entities"
        assert report.num_videos == pred.num_videos
        assert report.hit_at_1 == hit_at_1(pred)
        assert report.perr == perr(pred)
        assert report.gap == global_average_precision(pred, top_k=7)

    def test_json_round_trip_with_nan(self):
        report = EvalReport(
            layer="verticals",
            num_videos=5,
            mean_ap=0.75,
            gap=0.5,
            perr=0.8,
            hit_at_1=1.0,
            per_class_ap=np.array([0.75, np.nan]),
        )
        back = EvalReport.from_json(report.to_json())
        assert back.layer == report.layer
        assert back.mean_ap == report.mean_ap
        assert np.isnan(back.per_class_ap[1]) and back.per_class_ap[0] == 0.75

    def test_text_format(self):
        report = EvalReport("e", 3, 0.5, 0.25, 1.0, 0.125, np.array([0.5]))
        text = report.to_text()
        assert "mean_ap = 0.500000" in text
        assert "hit_at_1 = 0.125000" in text
        assert text.endswith("\n")
