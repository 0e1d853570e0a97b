from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oim.geometry import iou, iou_matrix, nms, top_k_by_score
from oim.types import BoxF

from .conftest import make_ps


def rational_iou(a, b):
    """Exact IoU over rationals."""
    a = [Fraction(v) for v in a]
    b = [Fraction(v) for v in b]
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return Fraction(0)
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def reference_nms(boxes, scores, thr):
    """O(N^2) suppressor over an explicit sorted list."""
    items = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    for i in items:
        if all(not iou(boxes[i], boxes[k]) > thr for k in keep):
            keep.append(i)
    return keep


def random_boxes(rng, n, span=100.0):
    xy = rng.uniform(0, span, size=(n, 2))
    wh = rng.uniform(1, span / 3, size=(n, 2))
    return np.hstack([xy, xy + wh])


class TestIoU:
    def test_identity(self):
        assert iou(BoxF(0, 0, 10, 10), BoxF(0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0

    def test_half_overlap_is_one_third(self):
        a, b = (0, 0, 10, 10), (5, 0, 15, 10)
        assert rational_iou(a, b) == Fraction(1, 3)
        assert iou(a, b) == pytest.approx(float(Fraction(1, 3)), rel=1e-15)

    def test_degenerate_is_zero_even_with_itself(self):
        d = (3, 3, 3, 8)
        assert iou(d, d) == 0.0
        assert iou(d, (0, 0, 10, 10)) == 0.0
        assert iou_matrix(np.array([d]), np.array([d]))[0, 0] == 0.0

    def test_touching_edges_do_not_overlap(self):
        assert iou((0, 0, 10, 10), (10, 0, 20, 10)) == 0.0

    def test_matrix_matches_scalar_bitwise(self):
        rng = np.random.default_rng(0)
        a, b = random_boxes(rng, 30), random_boxes(rng, 20)
        m = iou_matrix(a, b)
        for i in range(30):
            for j in range(20):
                assert m[i, j] == iou(a[i], b[j])

    @given(
        st.lists(st.floats(0, 100, allow_nan=False), min_size=4, max_size=4),
        st.lists(st.floats(0, 100, allow_nan=False), min_size=4, max_size=4),
    )
    def test_symmetric_and_bounded(self, p, q):
        a = (min(p[0], p[2]), min(p[1], p[3]), max(p[0], p[2]), max(p[1], p[3]))
        b = (min(q[0], q[2]), min(q[1], q[3]), max(q[0], q[2]), max(q[1], q[3]))
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0

    @given(st.floats(0, 50), st.floats(0, 50), st.floats(1, 50), st.floats(1, 50))
    def test_self_iou_is_one(self, x, y, w, h):
        assert iou((x, y, x + w, y + h), (x, y, x + w, y + h)) == 1.0

    def test_against_rational_oracle_on_integer_boxes(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            a = rng.integers(0, 20, 4)
            b = rng.integers(0, 20, 4)
            a = (min(a[0], a[2]), min(a[1], a[3]), max(a[0], a[2]) + 1, max(a[1], a[3]) + 1)
            b = (min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]) + 1, max(b[1], b[3]) + 1)
            assert iou(a, b) == pytest.approx(float(rational_iou(a, b)), rel=1e-14, abs=0)

    def test_translation_invariance(self):
        rng = np.random.default_rng(2)
        a, b = random_boxes(rng, 40), random_boxes(rng, 40)
        shift = np.array([64.0, -32.0, 64.0, -32.0])  # exact in binary
        np.testing.assert_allclose(iou_matrix(a, b), iou_matrix(a + shift, b + shift), rtol=1e-12, atol=0)


class TestNMS:
    def test_single_box(self):
        assert nms([(0, 0, 1, 1)], [0.3], 0.3) == [0]

    def test_empty(self):
        assert nms([], [], 0.3) == []

    def test_duplicate_suppressed(self):
        boxes = [(0, 0, 10, 10), (0, 0, 10, 10), (100, 100, 110, 110)]
        scores = [0.9, 0.8, 0.5]
        assert nms(boxes, scores, 0.3) == [0, 2] == reference_nms(boxes, scores, 0.3)

    def test_iou_equal_to_threshold_keeps_both(self):
        a, b = (0, 0, 10, 10), (5, 0, 15, 10)  # IoU exactly 1/3 in floating point
        thr = iou(a, b)
        assert nms([a, b], [0.9, 0.8], thr) == [0, 1] == reference_nms([a, b], [0.9, 0.8], thr)

    def test_tie_scores_lower_index_first(self):
        boxes = [(0, 0, 10, 10), (0, 0, 10, 10)]
        assert nms(boxes, [0.5, 0.5], 0.3) == [0]

    def test_kept_sorted_by_descending_score(self):
        boxes = [(0, 0, 1, 1), (5, 5, 6, 6), (10, 10, 11, 11)]
        assert nms(boxes, [0.1, 0.9, 0.5], 0.3) == [1, 2, 0]

    def test_matches_reference_on_random_instances(self):
        rng = np.random.default_rng(3)
        for _ in range(300):
            n = int(rng.integers(1, 51))
            boxes = random_boxes(rng, n)
            scores = np.round(rng.random(n), 2)  # rounding forces score ties
            thr = float(rng.choice([0.0, 0.1, 0.3, 0.5, 0.7, 1.0]))
            assert nms(boxes, scores, thr) == reference_nms(boxes, scores, thr)

    @settings(max_examples=50)
    @given(st.integers(0, 10_000), st.floats(0.0, 1.0))
    def test_output_is_antichain(self, seed, thr):
        rng = np.random.default_rng(seed)
        boxes = random_boxes(rng, 25)
        keep = nms(boxes, rng.random(25), thr)
        for i in keep:
            for j in keep:
                if i != j:
                    assert not iou(boxes[i], boxes[j]) > thr

    def test_translation_invariance(self):
        rng = np.random.default_rng(4)
        boxes = random_boxes(rng, 40)
        scores = rng.random(40)
        assert nms(boxes, scores, 0.3) == nms(boxes + 256.0, scores, 0.3)

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            nms([(0, 0, 1, 1)], [0.5], 1.5)


class TestTopK:
    def test_basic(self):
        ps = make_ps([(0, 0, 1, 1)] * 3, scores=[0.1, 0.9, 0.5])
        assert top_k_by_score(ps, 1, 2) == [1, 2]

    def test_fewer_than_k(self):
        ps = make_ps([(0, 0, 1, 1)] * 2, scores=[0.1, 0.9])
        assert top_k_by_score(ps, 1, 100) == [1, 0]

    def test_ties(self):
        ps = make_ps([(0, 0, 1, 1)] * 2, scores=[0.5, 0.5])
        assert top_k_by_score(ps, 1, 1) == [0]

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            top_k_by_score(make_ps([(0, 0, 1, 1)]), 1, 0)
