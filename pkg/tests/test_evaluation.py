import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aumn.errors import ValidationError
from aumn.evaluation import (
    GroundTruthInstance,
    MapResult,
    attention_auc,
    average_precision,
    format_map_table,
    mean_ap,
)
from aumn.inference import Proposal


# --------------------------------------------------------------------------
# brute-force references


def iou_sets(p, g):
    a, b = set(range(p.start, p.end + 1)), set(range(int(g.start), int(g.end) + 1))
    return len(a & b) / len(a | b)


def brute_force_ap(proposals, gts, class_id, thr):
    """Full PR curve: for every cut-off k rerun the matching on the top-k list."""
    gts = [g for g in gts if g.class_id == class_id]
    dets = [p for p in proposals if p.class_id == class_id]
    dets.sort(key=lambda p: (-p.score, p.start, p.end - p.start, p.video_id))
    curve = []
    for k in range(1, len(dets) + 1):
        taken = set()
        tp = 0
        for p in dets[:k]:
            best, best_iou = None, -1.0
            for j, g in enumerate(gts):
                if j in taken or g.video_id != p.video_id:
                    continue
                v = iou_sets(p, g)
                if v >= thr and v > best_iou:
                    best, best_iou = j, v
            if best is not None:
                taken.add(best)
                tp += 1
        curve.append((tp / len(gts), tp / k))
    ap, prev_recall = 0.0, 0.0
    for i, (recall, _) in enumerate(curve):
        if recall > prev_recall:
            ap += (recall - prev_recall) * max(prec for r, prec in curve[i:])
            prev_recall = recall
    return ap


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def random_instance(rng, max_props=6, max_gt=3, classes=2, videos=("a", "b")):
    gts = []
    for _ in range(int(rng.integers(1, max_gt + 1))):
        s = int(rng.integers(0, 20))
        gts.append(GroundTruthInstance(str(rng.choice(videos)), int(rng.integers(0, classes)), s,
                                       s + int(rng.integers(0, 6))))
    props = []
    for _ in range(int(rng.integers(0, max_props + 1))):
        s = int(rng.integers(0, 20))
        props.append(Proposal(int(rng.integers(0, classes)), s, s + int(rng.integers(0, 6)),
                              float(rng.integers(1, 5)) / 4, str(rng.choice(videos))))
    return props, gts


def as_proposals(gts, score=1.0):
    return [Proposal(g.class_id, int(g.start), int(g.end), score, g.video_id) for g in gts]


GT = [
    GroundTruthInstance("v1", 0, 2, 6),
    GroundTruthInstance("v1", 1, 10, 14),
    GroundTruthInstance("v2", 0, 0, 3),
]


class TestAveragePrecision:
    def test_exact_proposals(self):
        assert average_precision(as_proposals(GT), GT, 0, 0.5) == 1.0

    def test_disjoint(self):
        props = [Proposal(0, 20, 25, 0.9, "v1"), Proposal(0, 10, 12, 0.5, "v2")]
        assert average_precision(props, GT, 0, 0.1) == 0.0

    def test_no_detections(self):
        assert average_precision([], GT, 1, 0.5) == 0.0

    def test_hand_computed(self):
        # ranks: FP, TP, TP -> precision 1/2 at recall 1/2, 2/3 at recall 1
        props = [Proposal(0, 30, 31, 0.9, "v1"), Proposal(0, 2, 6, 0.8, "v1"), Proposal(0, 0, 3, 0.7, "v2")]
        assert average_precision(props, GT, 0, 0.5) == pytest.approx(0.5 * 2 / 3 + 0.5 * 2 / 3)

    def test_duplicate_detection_is_false_positive(self):
        props = [Proposal(1, 10, 14, 0.9, "v1"), Proposal(1, 10, 14, 0.8, "v1")]
        assert average_precision(props, GT, 1, 0.5) == 1.0
        props = [Proposal(1, 10, 14, 0.8, "v1"), Proposal(1, 10, 13, 0.9, "v1")]
        assert average_precision(props, GT, 1, 0.9) == pytest.approx(0.5)

    def test_missing_class_warns(self):
        with pytest.warns(RuntimeWarning):
            assert math.isnan(average_precision([], GT, 5, 0.5))

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            props, gts = random_instance(rng)
            thr = float(rng.choice([0.1, 0.3, 0.5, 0.7]))
            for c in sorted({g.class_id for g in gts}):
                assert abs(average_precision(props, gts, c, thr) - brute_force_ap(props, gts, c, thr)) <= 1e-9

    @settings(max_examples=100)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
    def test_scale_invariance(self, seed, factor):
        props, gts = random_instance(np.random.default_rng(seed))
        scaled = [Proposal(p.class_id, p.start, p.end, p.score * factor, p.video_id) for p in props]
        for c in {g.class_id for g in gts}:
            assert average_precision(scaled, gts, c, 0.3) == average_precision(props, gts, c, 0.3)

    @settings(max_examples=100)
    @given(st.integers(0, 2**32 - 1))
    def test_zero_iou_lowest_score_never_helps(self, seed):
        props, gts = random_instance(np.random.default_rng(seed))
        for c in {g.class_id for g in gts}:
            extra = Proposal(c, 100, 105, 0.0, "a")
            assert average_precision(props + [extra], gts, c, 0.3) <= average_precision(props, gts, c, 0.3)


class TestMeanAP:
    def test_perfect(self):
        result = mean_ap(as_proposals(GT), GT)
        assert all(v == 1.0 for v in result.per_threshold.values())
        assert result.average == 1.0

    def test_empty_proposals(self):
        result = mean_ap([], GT)
        assert all(v == 0.0 for v in result.per_threshold.values())
        assert result.average == 0.0

    def test_no_ground_truth(self):
        with pytest.raises(ValidationError):
            mean_ap([], [])

    def test_composition(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            props, gts = random_instance(rng, max_props=10, max_gt=5, classes=3)
            result = mean_ap(props, gts)
            classes = sorted({g.class_id for g in gts})
            for thr, value in result.per_threshold.items():
                expected = np.mean([average_precision(props, gts, c, thr) for c in classes])
                assert value == pytest.approx(expected, abs=1e-15)
            assert result.average == pytest.approx(np.mean([result.per_threshold[t]
                                                            for t in (0.1, 0.2, 0.3, 0.4, 0.5)]))

    def test_average_without_listed_thresholds(self):
        result = mean_ap(as_proposals(GT), GT, iou_thresholds=(0.5, 0.75, 0.95))
        assert set(result.per_threshold) == {0.5, 0.75, 0.95}
        assert result.average == 1.0

    @settings(max_examples=100)
    @given(st.integers(0, 2**32 - 1))
    def test_threshold_monotone(self, seed):
        props, gts = random_instance(np.random.default_rng(seed), max_props=8, max_gt=4)
        values = mean_ap(props, gts).row()[:-1]
        assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))

    def test_seconds_units(self):
        gts = [GroundTruthInstance("v", 0, 1.0, 3.0)]
        props = [Proposal(0, 0, 0, 0.5, "v")]
        timed = [type("T", (), dict(class_id=0, start=1.5, end=3.0, score=0.5, video_id="v"))()]
        assert mean_ap(timed, gts, inclusive=False).per_threshold[0.7] == 1.0
        assert mean_ap(props, gts, inclusive=True).per_threshold[0.1] == 0.0


class TestFormatTable:
    def test_single(self):
        result = MapResult({t: 0.5 for t in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)}, 0.5)
        lines = format_map_table(result).splitlines()
        assert lines[0].split("\t") == ["mAP@0.1", "mAP@0.2", "mAP@0.3", "mAP@0.4", "mAP@0.5", "mAP@0.6",
                                        "mAP@0.7", "AVG(0.1:0.1:0.5)"]
        assert lines[1] == "\t".join(["0.5000"] * 8)

    def test_labelled_rows(self):
        result = MapResult({t: 1.0 for t in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)}, 1.0)
        text = format_map_table([("full", result), ("cls-only", result)], label_header="config")
        assert text.splitlines()[0].startswith("config\tmAP@0.1")
        assert text.splitlines()[2].startswith("cls-only\t1.0000")


class TestAttentionAUC:
    def test_perfect(self):
        assert attention_auc(np.array([0.1, 0.2, 0.8, 0.9]), np.array([0, 0, 1, 1])) == 1.0

    def test_constant(self):
        assert attention_auc(np.full(6, 0.3), np.array([0, 1, 0, 1, 1, 0])) == 0.5

    def test_pairwise_oracle(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 40))
            scores = rng.integers(0, 6, size=n) / 5
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            assert abs(attention_auc(scores, labels) - pairwise_auc(scores, labels)) <= 1e-12

    def test_single_class(self):
        with pytest.warns(RuntimeWarning):
            assert math.isnan(attention_auc(np.ones(3), np.ones(3)))

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            attention_auc(np.ones(3), np.ones(4))


def test_ground_truth_validation():
    with pytest.raises(ValidationError):
        GroundTruthInstance("v", 0, 5, 4)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        GroundTruthInstance("v", 0, 5, 5)
