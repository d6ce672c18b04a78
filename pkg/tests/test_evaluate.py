import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kdetect import evaluate as ev
from kdetect.detector import DetectorModel
from oracles import random_ap_instance

GT = [np.array([[0.0, 0, 10, 10]])]
GL = [np.array([1])]


def P(img, score, box=(0.0, 0, 10, 10), label=1):
    return ev.Pred(img, label, score, box)


class TestMatching:
    def test_exact_hit(self):
        flags, _, g = ev.match_detections([[P(0, 0.9)]], GT, GL, 1, 0.5)
        assert flags.tolist() == [True] and g == 1

    def test_duplicate_is_fp(self):
        flags, scores, _ = ev.match_detections([[P(0, 0.8, (0, 0, 10, 9)), P(0, 0.9)]], GT, GL, 1, 0.5)
        assert flags.tolist() == [True, False] and scores.tolist() == [0.9, 0.8]

    def test_image_without_gt(self):
        flags, _, g = ev.match_detections([[], [P(1, 0.9)]], GT + [np.zeros((0, 4))],
                                          GL + [np.zeros(0, int)], 1, 0.5)
        assert flags.tolist() == [False] and g == 1

    def test_other_class_ignored(self):
        flags, _, g = ev.match_detections([[P(0, 0.9, label=2)]], GT, GL, 1, 0.5)
        assert len(flags) == 0 and g == 1

    def test_highest_iou_unmatched(self):
        gt = [np.array([[0.0, 0, 10, 10], [2.0, 0, 12, 10]])]
        dets = [[P(0, 0.9, (2, 0, 12, 10)), P(0, 0.8, (1, 0, 11, 10))]]
        flags, _, _ = ev.match_detections(dets, gt, [np.array([1, 1])], 1, 0.5)
        assert flags.tolist() == [True, True]

    def test_tie_order(self):
        dets = [[P(0, 0.5, (20, 20, 30, 30))], [P(1, 0.5)]]
        flags, _, _ = ev.match_detections(dets, GT * 2, GL * 2, 1, 0.5)
        assert flags.tolist() == [False, True]

    @pytest.mark.parametrize("t", [0.0, 1.5])
    def test_threshold_domain(self, t):
        with pytest.raises(ValueError):
            ev.match_detections([[P(0, 0.9)]], GT, GL, 1, t)


class TestAveragePrecision:
    def test_single_tp(self):
        assert ev.average_precision([True], 1) == 1.0

    def test_tp_fp_two_gt(self):
        assert ev.average_precision([True, False], 2) == pytest.approx(0.5, abs=1e-15)

    def test_fp_tp(self):
        assert ev.average_precision([False, True], 1) == pytest.approx(0.5, abs=1e-15)

    def test_envelope_by_hand(self):
        # recall steps at 1/3, 2/3, 3/3 with precisions 1, 2/3, 3/5 -> envelope 1, 2/3, 3/5
        flags = [True, False, True, False, True]
        expected = (1 + 2 / 3 + 3 / 5) / 3
        assert ev.average_precision(flags, 3) == pytest.approx(expected, abs=1e-15)

    def test_no_gt_and_no_dets(self):
        assert ev.average_precision([True], 0) == 0.0
        assert ev.average_precision([], 4) == 0.0

    @given(st.lists(st.booleans(), max_size=30), st.integers(0, 10))
    def test_range(self, flags, extra):
        g = sum(flags) + extra
        ap = ev.average_precision(flags, g)
        assert 0.0 <= ap <= 1.0

    @given(st.lists(st.booleans(), max_size=30), st.integers(0, 10))
    def test_monotone_edits(self, flags, extra):
        g = sum(flags) + extra + 1
        ap = ev.average_precision(flags, g)
        assert ev.average_precision(flags + [False], g) <= ap + 1e-15
        assert ev.average_precision([True] + flags, g) >= ap - 1e-15

    @given(st.integers(0, 10_000))
    def test_monotone_score_transform(self, seed):
        dets, gb, gl = random_ap_instance(np.random.default_rng(seed))
        warped = [[ev.Pred(d.image, d.label, np.exp(3 * d.score) - 7, d.box) for d in im] for im in dets]
        for c in (1, 2):
            a = ev.average_precision(*ev.match_detections(dets, gb, gl, c, 0.5)[::2])
            b = ev.average_precision(*ev.match_detections(warped, gb, gl, c, 0.5)[::2])
            assert a == b


class TestOracle:
    @pytest.mark.parametrize("flags,dets,gt_boxes,gt_labels,expected", [
        ([True], [[P(0, 0.9)]], GT, GL, 1.0),
        ([True, False], [[P(0, 0.9), P(0, 0.8, (1, 0, 11, 10))]],
         [np.array([[0.0, 0, 10, 10], [50.0, 50, 60, 60]])], [np.array([1, 1])], 0.5),
        ([False, True], [[P(0, 0.9, (40, 40, 50, 50)), P(0, 0.8)]], GT, GL, 0.5),
    ])
    def test_hand_examples(self, flags, dets, gt_boxes, gt_labels, expected):
        got = ev.match_detections(dets, gt_boxes, gt_labels, 1, 0.5)[0]
        assert got.tolist() == flags
        assert ev.reference_ap_oracle(dets, gt_boxes, gt_labels, 1, 0.5) == pytest.approx(expected, abs=1e-15)
        assert ev.average_precision(got, sum(len(g) for g in gt_boxes)) == pytest.approx(expected, abs=1e-15)

    def test_random_equivalence(self):
        rng = np.random.default_rng(2024)
        for _ in range(300):
            dets, gb, gl = random_ap_instance(rng)
            for c in (1, 2):
                for t in (0.25, 0.5, 0.75):
                    flags, _, g = ev.match_detections(dets, gb, gl, c, t)
                    assert abs(ev.average_precision(flags, g) - ev.reference_ap_oracle(dets, gb, gl, c, t)) <= 1e-12

    def test_single_detection_binary(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            # with one ground truth as well, recall is all or nothing
            dets, gb, gl = random_ap_instance(rng, max_dets=1, max_gt=1)
            assert ev.reference_ap_oracle(dets, gb, gl, 1, 0.5) in (0.0, 1.0)


class TestReport:
    def _report(self, aps):
        # one GT per class in its own image; class c detected once with precision profile giving AP aps[c]
        dets, gb, gl = [], [], []
        for i, ap in enumerate(aps):
            gb.append(np.array([[0.0, 0, 10, 10]]))
            gl.append(np.array([i + 1]))
            im = []
            if ap == 1.0:
                im = [ev.Pred(i, i + 1, 0.9, (0.0, 0, 10, 10))]
            elif ap == 0.5:
                im = [ev.Pred(i, i + 1, 0.9, (50.0, 50, 60, 60)), ev.Pred(i, i + 1, 0.8, (0.0, 0, 10, 10))]
            dets.append(im)
        return ev.build_report(dets, gb, gl, ("a", "b", "c"))

    def test_map_is_class_mean(self):
        r = self._report([1.0, 0.5, 0.0])
        assert [r.ap(c, 0.5) for c in "abc"] == [1.0, 0.5, 0.0]
        assert r.map(0.5) == pytest.approx(0.5, abs=1e-15)

    def test_sweep_invariants(self):
        r = self._report([1.0, 0.5, 0.0])
        assert r.thresholds == ev.IOU_SWEEP and len(ev.IOU_SWEEP) == 11
        for k, v in r.map_at.items():
            assert v == pytest.approx(np.mean([r.per_class_ap[c][k] for c in r.classes_in_mean]), abs=1e-15)
        assert r.map_25_75 == pytest.approx(np.mean(list(r.map_at.values())), abs=1e-15)

    def test_absent_class_excluded(self):
        r = ev.build_report([[ev.Pred(0, 1, 0.9, (0.0, 0, 10, 10))]], GT, GL, ("a", "b"), (0.5,))
        assert r.classes_in_mean == ("a",) and r.map(0.5) == 1.0 and r.map_25_75 is None

    def test_empty_detections(self, edd_corpus):
        ds = edd_corpus[2]
        r = ev.evaluate_detections([[] for _ in ds.samples], ds, ("ndbe", "neoplasia", "polyp"))
        assert all(v == 0.0 for c in r.per_class_ap.values() for v in c.values())

    def test_csv_columns(self):
        r = self._report([1.0, 0.5, 0.0])
        header, values = r.to_csv().splitlines()
        assert header.split(",") == ["mAP25", "mAP50", "mAP75", "mAP25:75", "AP50_a", "AP50_b", "AP50_c"]
        assert values.split(",")[1] == "50.0"

    def test_json_round_trip(self):
        r = self._report([1.0, 0.5, 0.0])
        back = ev.EvalReport.from_dict(json.loads(r.to_json()))
        assert back.to_json() == r.to_json()

    def test_bad_thresholds(self):
        with pytest.raises(ValueError):
            ev.build_report([[]], GT, GL, ("a",), (0.0,))

    def test_model_class_mismatch(self, edd_corpus):
        m = DetectorModel(("tumour",), np.zeros((2, 38)), np.zeros(2), np.zeros((4, 38)), np.zeros(4))
        with pytest.raises(ValueError, match="tumour"):
            ev.evaluate_model(m, edd_corpus[2].subset([0]))

    def test_model_twice_identical(self, edd_corpus):
        rng = np.random.default_rng(0)
        m = DetectorModel(("ndbe", "neoplasia", "polyp"), rng.normal(size=(4, 38)), np.zeros(4),
                          rng.normal(size=(12, 38)) * 0.01, np.zeros(12))
        ds = edd_corpus[2].subset(range(3))
        assert ev.evaluate_model(m, ds).to_json() == ev.evaluate_model(m, ds).to_json()


class TestPredictionFiles:
    def test_round_trip(self, tmp_path):
        dets = [[ev.Pred(0, 2, 0.7, (1.0, 2.0, 3.5, 4.0))], [ev.Pred(1, 1, 0.25, (0.0, 0, 9, 9))]]
        p = tmp_path / "pred.jsonl"
        ev.write_predictions(p, dets, ["x", "y"], ("a", "b"))
        assert ev.read_predictions(p, ["x", "y"], ("a", "b")) == dets
        rec = json.loads(p.read_text().splitlines()[0])
        assert set(rec) == {"image", "class", "score", "x_min", "y_min", "x_max", "y_max"}

    def test_unknown_class_names_record(self, tmp_path):
        p = tmp_path / "pred.jsonl"
        p.write_text(json.dumps({"image": "x", "class": "a", "score": 1, "x_min": 0, "y_min": 0,
                                 "x_max": 1, "y_max": 1}) + "\n" +
                     json.dumps({"image": "x", "class": "zzz", "score": 1, "x_min": 0, "y_min": 0,
                                 "x_max": 1, "y_max": 1}) + "\n")
        with pytest.raises(ValueError, match=r"pred.jsonl:2: unknown class 'zzz'"):
            ev.read_predictions(p, ["x"], ("a",))

    def test_unknown_image(self, tmp_path):
        p = tmp_path / "pred.jsonl"
        p.write_text(json.dumps({"image": "q", "class": "a", "score": 1, "x_min": 0, "y_min": 0,
                                 "x_max": 1, "y_max": 1}) + "\n")
        with pytest.raises(ValueError, match="unknown image"):
            ev.read_predictions(p, ["x"], ("a",))
