import math

import numpy as np
import pytest

from sinet.geometry import (Box, apply_deltas, clip_box, encode_deltas, iou,
                            nms, spatial_relation)

from oracles import iou_oracle, nms_oracle, random_box, spatial_relation_oracle


def test_iou_known_cases():
    a = Box(2, 2, 2, 2)
    assert iou(a, Box(2, 2, 2, 2)) == 1.0
    assert iou(a, Box(10, 10, 2, 2)) == 0.0
    # half-width shift: inter 2, union 6
    assert iou(a, Box(3, 2, 2, 2)) == pytest.approx(1.0 / 3.0)
    # touching edges only
    assert iou(a, Box(4, 2, 2, 2)) == 0.0


def test_iou_matches_oracle_randomized():
    rng = np.random.default_rng(11)
    for _ in range(200):
        a, b = random_box(rng), random_box(rng)
        assert iou(a, b) == pytest.approx(iou_oracle(a, b), abs=1e-12)


def test_box_invariants():
    with pytest.raises(ValueError):
        Box(0, 0, -1.0, 2.0)
    with pytest.raises(ValueError):
        Box(0, 0, 1.0, 0.0)
    b = Box(1, 2, 3, 4)
    assert b.area == 12


def test_spatial_relation_identical_boxes():
    b = Box(4.4, 1.2, 2.0, 3.0)
    got = spatial_relation(b, b)
    assert np.allclose(got, [2, 3, 6, 2, 3, 6, 0, 0, 0, 0, 0, 0])


def test_spatial_relation_unit_shift():
    # receiver shifted right by exactly w_j: elements 6 and 8 become 1
    bj = Box(3.0, 3.0, 2.0, 2.0)
    bi = Box(5.0, 3.0, 2.0, 2.0)
    got = spatial_relation(bi, bj)
    assert got[6] == pytest.approx(1.0)
    assert got[8] == pytest.approx(1.0)
    assert np.allclose(got[[7, 9, 10, 11]], 0.0)


def test_spatial_relation_log_ratio():
    bj = Box(3.0, 3.0, 2.0, 2.0)
    bi = Box(3.0, 3.0, 4.0, 2.0)
    assert spatial_relation(bi, bj)[10] == pytest.approx(math.log(2.0))


def test_spatial_relation_matches_oracle_randomized():
    rng = np.random.default_rng(5)
    for _ in range(100):
        bi, bj = random_box(rng), random_box(rng)
        assert np.allclose(spatial_relation(bi, bj),
                           spatial_relation_oracle(bi, bj), atol=1e-12)


def test_delta_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(100):
        b, g = random_box(rng), random_box(rng)
        d = encode_deltas(b, g)
        out = apply_deltas(b, d)
        assert out.cx == pytest.approx(g.cx, abs=1e-12)
        assert out.w == pytest.approx(g.w, rel=1e-12)


def test_clip_box_stays_inside():
    # a box fully past an edge collapses to a min_side sliver at that edge
    b = clip_box(Box(-1.0, 20.0, 5.0, 8.0), 16, 16)
    eps = 1e-6
    assert b.cx - b.w / 2 >= -eps and b.cx + b.w / 2 <= 16 + eps
    assert b.cy - b.h / 2 >= -eps and b.cy + b.h / 2 <= 16 + eps
    assert b.w > 0 and b.h > 0
    inside = Box(8, 8, 4, 4)
    c = clip_box(inside, 16, 16)
    assert (c.cx, c.cy, c.w, c.h) == (8, 8, 4, 4)


def test_nms_simple_cases():
    boxes = [Box(2, 2, 2, 2), Box(2.1, 2, 2, 2), Box(8, 8, 2, 2)]
    keep = nms(boxes, [0.9, 0.8, 0.7], 0.5, 10)
    assert keep == [0, 2]
    # identical boxes with identical scores: one survives, lower index first
    keep = nms([Box(2, 2, 2, 2), Box(2, 2, 2, 2)], [0.5, 0.5], 0.5, 10)
    assert keep == [0]
    assert nms([], [], 0.5, 4) == []


def test_nms_validation():
    with pytest.raises(ValueError):
        nms([Box(1, 1, 1, 1)], [0.5, 0.6], 0.5, 4)
    with pytest.raises(ValueError):
        nms([Box(1, 1, 1, 1)], [0.5], 1.5, 4)
    with pytest.raises(ValueError):
        nms([Box(1, 1, 1, 1)], [0.5], 0.5, 0)


def test_nms_matches_oracle_randomized():
    rng = np.random.default_rng(17)
    for _ in range(120):
        n = int(rng.integers(1, 12))
        boxes = [random_box(rng, span=8.0) for _ in range(n)]
        scores = rng.normal(size=n)
        if rng.uniform() < 0.3 and n > 1:
            scores[1] = scores[0]  # exercise the tie rule
        thresh = float(rng.uniform(0.2, 0.8))
        max_keep = int(rng.integers(1, n + 2))
        assert nms(boxes, list(scores), thresh, max_keep) == \
            nms_oracle(boxes, list(scores), thresh, max_keep)


def test_nms_postconditions_randomized():
    rng = np.random.default_rng(23)
    for _ in range(60):
        n = int(rng.integers(2, 15))
        boxes = [random_box(rng, span=6.0) for _ in range(n)]
        scores = list(rng.normal(size=n))
        keep = nms(boxes, scores, 0.5, n)
        # survivors never overlap beyond the threshold
        for a in range(len(keep)):
            for b in range(a + 1, len(keep)):
                assert iou(boxes[keep[a]], boxes[keep[b]]) <= 0.5
        # kept list is sorted by descending score
        kept_scores = [scores[i] for i in keep]
        assert kept_scores == sorted(kept_scores, reverse=True)
        # every suppressed box overlaps some kept box with >= its own score
        for i in set(range(n)) - set(keep):
            assert any(iou(boxes[i], boxes[j]) > 0.5 and scores[j] >= scores[i]
                       for j in keep)
