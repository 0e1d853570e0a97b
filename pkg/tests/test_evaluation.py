import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oim.evaluation import (
    Detection,
    average_precision,
    corloc,
    detections_from_scores,
    gt_as_detections,
    instance_recall,
    mean_average_precision,
)
from oim.geometry import iou
from oim.types import BoxF, GroundTruth

from .conftest import make_ps

GT_BOX = BoxF(0, 0, 10, 10)


def det(image, box, score, c=1):
    return Detection(image, c, BoxF.from_seq(box) if not isinstance(box, BoxF) else box, score)


def brute_force_ap(dets, gts, c, eleven=True):
    """Recompute precision/recall at every cutoff by rematching the prefix from scratch."""
    gt = {g.image_id: g.of_class(c) for g in gts}
    num_gt = sum(len(v) for v in gt.values())
    if num_gt == 0:
        return None
    ranked = sorted([d for d in dets if d.class_id == c], key=lambda d: -d.score)
    points = []
    for k in range(1, len(ranked) + 1):
        used = set()
        tp = 0
        for d in ranked[:k]:
            cands = [(iou(d.box, b), i) for i, b in enumerate(gt.get(d.image_id, [])) if (d.image_id, i) not in used]
            if cands:
                best = max(cands, key=lambda t: (t[0], -t[1]))
                if best[0] >= 0.5:
                    used.add((d.image_id, best[1]))
                    tp += 1
        points.append((tp / num_gt, tp / k))
    if eleven:
        total = 0.0
        for t in [i / 10 for i in range(11)]:
            ps = [p for r, p in points if r >= t - 1e-12]
            total += max(ps) if ps else 0.0
        return total / 11
    raise NotImplementedError


class TestAveragePrecision:
    def test_single_hit(self):
        gts = [GroundTruth("a", (GT_BOX,), (1,))]
        d = [det("a", (0, 0, 10, 6), 0.9)]
        assert iou(d[0].box, GT_BOX) == pytest.approx(0.6)
        assert average_precision(d, gts, 1) == 1.0

    def test_duplicate_after_hit(self):
        gts = [GroundTruth("a", (GT_BOX,), (1,))]
        d = [det("a", (0, 0, 10, 10), 0.9), det("a", (0, 0, 10, 9), 0.8)]
        assert average_precision(d, gts, 1) == pytest.approx(1.0, abs=1e-12)

    def test_half_recall(self):
        gts = [GroundTruth("a", (GT_BOX, BoxF(50, 50, 60, 60)), (1, 1))]
        d = [det("a", (0, 0, 10, 10), 0.9)]
        assert average_precision(d, gts, 1) == pytest.approx(6 / 11, abs=1e-12)

    def test_absent_class(self):
        assert average_precision([], [GroundTruth("a", (GT_BOX,), (1,))], 2) is None

    def test_no_detections(self):
        assert average_precision([], [GroundTruth("a", (GT_BOX,), (1,))], 1) == 0.0

    def test_modes_agree_on_step_curve(self):
        gts = [GroundTruth("a", (GT_BOX, BoxF(50, 50, 60, 60)), (1, 1))]
        d = [det("a", (0, 0, 10, 10), 0.9), det("a", (50, 50, 60, 60), 0.8), det("a", (80, 80, 90, 90), 0.1)]
        assert average_precision(d, gts, 1, mode="eleven_point") == pytest.approx(1.0, abs=1e-12)
        assert average_precision(d, gts, 1, mode="area") == pytest.approx(1.0, abs=1e-12)

    def test_area_mode_value(self):
        gts = [GroundTruth("a", (GT_BOX, BoxF(50, 50, 60, 60)), (1, 1))]
        d = [det("a", (0, 0, 10, 10), 0.9)]
        assert average_precision(d, gts, 1, mode="area") == pytest.approx(0.5, abs=1e-12)


def random_problem(rng, images=6, classes=3):
    gts, dets = [], []
    for i in range(images):
        boxes, cls = [], []
        for k in range(int(rng.integers(1, 4))):
            x, y = 40.0 * k, float(rng.uniform(0, 50))
            boxes.append(BoxF(x, y, x + 30, y + 30))
            cls.append(int(rng.integers(1, classes + 1)))
        gts.append(GroundTruth(f"im{i}", tuple(boxes), tuple(cls)))
        for _ in range(int(rng.integers(0, 8))):
            b = boxes[int(rng.integers(len(boxes)))]
            jit = rng.uniform(-8, 8, 4)
            box = BoxF(b.x1 + jit[0], b.y1 + jit[1], b.x2 + jit[2] + 8, b.y2 + jit[3] + 8)
            dets.append(Detection(f"im{i}", int(rng.integers(1, classes + 1)), box, float(rng.random())))
    return dets, gts


class TestMeanAP:
    def test_two_classes(self):
        gts = [GroundTruth("a", (GT_BOX, BoxF(50, 50, 60, 60)), (1, 2))]
        d = [det("a", (0, 0, 10, 10), 0.9, 1)]
        m, per = mean_average_precision(d, gts, 2)
        assert per == {1: 1.0, 2: 0.0} and m == 0.5

    def test_single_class(self):
        gts = [GroundTruth("a", (GT_BOX, BoxF(50, 50, 60, 60)), (1, 1))]
        d = [det("a", (0, 0, 10, 10), 0.9)]
        m, per = mean_average_precision(d, gts, 1)
        assert m == per[1]

    def test_absent_classes_excluded(self):
        gts = [GroundTruth("a", (GT_BOX,), (1,))]
        m, per = mean_average_precision([det("a", (0, 0, 10, 10), 0.9)], gts, 3)
        assert per[2] is None and m == 1.0

    def test_against_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(40):
            dets, gts = random_problem(rng)
            m, per = mean_average_precision(dets, gts, 3)
            ref = {c: brute_force_ap(dets, gts, c) for c in (1, 2, 3)}
            for c in (1, 2, 3):
                if ref[c] is None:
                    assert per[c] is None
                else:
                    assert per[c] == pytest.approx(ref[c], abs=1e-12)
            defined = [v for v in ref.values() if v is not None]
            assert m == pytest.approx(sum(defined) / len(defined), abs=1e-12)

    def test_perfect_detector(self):
        rng = np.random.default_rng(1)
        _, gts = random_problem(rng, images=10)
        dets = gt_as_detections(gts)
        m, _ = mean_average_precision(dets, gts, 3)
        cl, _ = corloc(dets, gts, 3)
        assert m == 1.0 and cl == 1.0


class TestAPProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_bounds_and_monotone_invariance(self, seed):
        rng = np.random.default_rng(seed)
        dets, gts = random_problem(rng)
        m, per = mean_average_precision(dets, gts, 3)
        assert 0.0 <= m <= 1.0
        squashed = [Detection(d.image_id, d.class_id, d.box, d.score**3) for d in dets]
        m2, per2 = mean_average_precision(squashed, gts, 3)
        assert per2 == per

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_trailing_false_positive_never_helps(self, seed):
        rng = np.random.default_rng(seed)
        dets, gts = random_problem(rng)
        lowest = min((d.score for d in dets), default=1.0)
        extra = Detection(gts[0].image_id, 1, BoxF(500, 500, 510, 510), lowest / 2)
        before = average_precision(dets, gts, 1)
        after = average_precision(dets + [extra], gts, 1)
        if before is not None:
            assert after <= before + 1e-15


class TestCorLoc:
    def test_hit(self):
        gts = [GroundTruth("a", (GT_BOX,), (1,))]
        assert corloc([det("a", (0, 0, 10, 6), 0.9)], gts, 1)[0] == 1.0

    def test_half(self):
        gts = [GroundTruth("a", (GT_BOX,), (1,)), GroundTruth("b", (GT_BOX,), (1,))]
        d = [det("a", (0, 0, 10, 10), 0.9), det("b", (50, 50, 60, 60), 0.9)]
        assert corloc(d, gts, 1)[0] == 0.5

    def test_either_instance_counts(self):
        gts = [GroundTruth("a", (GT_BOX, BoxF(50, 50, 60, 60)), (1, 1))]
        for box in [(0, 0, 10, 10), (50, 50, 60, 60)]:
            d = [det("a", box, 0.9), det("a", (80, 80, 90, 90), 0.5)]
            assert corloc(d, gts, 1)[0] == 1.0

    def test_only_top_detection_counts(self):
        gts = [GroundTruth("a", (GT_BOX,), (1,))]
        d = [det("a", (50, 50, 60, 60), 0.9), det("a", (0, 0, 10, 10), 0.8)]
        assert corloc(d, gts, 1)[0] == 0.0

    def test_missing_detection_is_miss(self):
        gts = [GroundTruth("a", (GT_BOX,), (1,))]
        assert corloc([], gts, 1)[0] == 0.0


class TestInstanceRecall:
    def test_all_covered(self):
        gts = [GroundTruth("a", (GT_BOX, BoxF(50, 50, 60, 60)), (1, 1))]
        mined = [[(1, np.array([0, 0, 10, 10.0])), (1, np.array([50, 50, 60, 60.0]))]]
        assert instance_recall(mined, gts) == 1.0

    def test_single_mined_box(self):
        gts = [GroundTruth("a", (GT_BOX, BoxF(50, 50, 60, 60)), (1, 1))]
        assert instance_recall([[(1, np.array([0, 0, 10, 10.0]))]], gts) <= 0.5

    def test_two_of_three(self):
        gts = [GroundTruth("a", (GT_BOX, BoxF(50, 50, 60, 60), BoxF(20, 20, 30, 30)), (1, 1, 2))]
        mined = [[(1, np.array([0, 0, 10, 9.0])), (2, np.array([20, 20, 30, 30.0])), (1, np.array([80, 80, 90, 90.0]))]]
        assert instance_recall(mined, gts) == pytest.approx(2 / 3)

    def test_wrong_class_not_counted(self):
        gts = [GroundTruth("a", (GT_BOX,), (1,))]
        assert instance_recall([[(2, np.array([0, 0, 10, 10.0]))]], gts) == 0.0

    def test_one_to_one(self):
        gts = [GroundTruth("a", (GT_BOX,), (1,))]
        mined = [[(1, np.array([0, 0, 10, 10.0])), (1, np.array([0, 0, 10, 9.0]))]]
        assert instance_recall(mined, gts) == 1.0


def test_detections_from_scores_nms_and_topk():
    ps = make_ps([(0, 0, 10, 10), (0, 0, 10, 9), (50, 50, 60, 60)], scores=[0.9, 0.8, 0.3])
    dets = detections_from_scores(ps, ps.scores, top_k=100, nms_threshold=0.3)
    assert [d.box.as_list() for d in dets] == [[0, 0, 10, 10], [50, 50, 60, 60]]
    assert len(detections_from_scores(ps, ps.scores, top_k=1)) == 1


def test_detection_score_range():
    with pytest.raises(ValueError):
        Detection("a", 1, GT_BOX, 1.5)
