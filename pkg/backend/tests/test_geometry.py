"""
Tests for IoU, NMS, box deltas and the pairwise spatial encoding
"""

import math

import numpy as np
import pytest
from exceptions import GeometryError
from geometry import (
    ENCODING_SIZE,
    clip_boxes,
    decode_deltas,
    encode_deltas,
    encode_pair_array,
    encode_pairs,
    iou,
    iou_matrix,
    nms,
    spatial_encoding,
)
from models import BoundingBox, Detection, Role


def _box(x1, y1, x2, y2):
    return BoundingBox(x1=x1, y1=y1, x2=x2, y2=y2)


def _det(box, score, category=0, role=Role.INSTRUMENT):
    return Detection(role=role, category=category, box=box, score=score)


def test_iou_known_values():
    a = _box(0.0, 0.0, 10.0, 10.0)
    assert iou(a, a) == pytest.approx(1.0)
    assert iou(a, _box(5.0, 0.0, 15.0, 10.0)) == pytest.approx(50.0 / 150.0)
    assert iou(a, _box(10.0, 0.0, 20.0, 10.0)) == 0.0


def test_iou_zero_area_union_is_zero():
    point = _box(3.0, 3.0, 3.0, 3.0)
    assert iou(point, point) == 0.0


def test_iou_matrix_is_symmetric(rng):
    xy = rng.uniform(0, 40, (5, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(1, 20, (5, 2))], axis=1)
    overlaps = iou_matrix(boxes, boxes)
    np.testing.assert_allclose(overlaps, overlaps.T)
    np.testing.assert_allclose(np.diag(overlaps), 1.0)


def test_nms_suppresses_within_category_only():
    """Overlapping boxes of different categories both survive"""
    # Setup
    box = _box(0.0, 0.0, 10.0, 10.0)
    shifted = _box(1.0, 0.0, 11.0, 10.0)
    detections = [
        _det(shifted, 0.6),
        _det(box, 0.9),
        _det(shifted, 0.7, category=1),
        _det(_box(30.0, 30.0, 40.0, 40.0), 0.5),
    ]

    # Execute
    kept = nms(detections, 0.5)

    # Verify
    assert [d.score for d in kept] == [0.9, 0.7, 0.5]


def test_nms_threshold_is_inclusive():
    """IoU equal to the threshold suppresses"""
    a = _box(0.0, 0.0, 10.0, 10.0)
    b = _box(0.0, 0.0, 10.0, 5.0)  # IoU exactly 0.5
    assert len(nms([_det(a, 0.9), _det(b, 0.8)], 0.5)) == 1


def test_deltas_round_trip():
    proposals = np.array([[0.0, 0.0, 10.0, 20.0], [5.0, 5.0, 9.0, 7.0]])
    targets = np.array([[2.0, 1.0, 14.0, 17.0], [4.0, 4.0, 12.0, 8.0]])
    decoded = decode_deltas(proposals, encode_deltas(proposals, targets))
    np.testing.assert_allclose(decoded, targets)


def test_decode_clamps_huge_size_deltas():
    decoded = decode_deltas(np.array([[0.0, 0.0, 1.0, 1.0]]), np.array([[0.0, 0.0, 50.0, 50.0]]))
    assert np.all(np.isfinite(decoded))


def test_clip_boxes_keeps_corner_order():
    clipped = clip_boxes(np.array([[-5.0, -5.0, 100.0, 3.0], [70.0, 2.0, 80.0, 9.0]]), 64, 48)
    np.testing.assert_allclose(clipped[0], [0.0, 0.0, 64.0, 3.0])
    np.testing.assert_allclose(clipped[1], [64.0, 2.0, 64.0, 9.0])


def test_spatial_encoding_layout():
    """16 values: two per-box blocks, IoU, relative offsets and normalized distance"""
    # Setup
    a = _box(0.0, 0.0, 10.0, 20.0)
    b = _box(10.0, 0.0, 30.0, 20.0)

    # Execute
    encoding = spatial_encoding(a, b, 100.0, 50.0)

    # Verify
    assert encoding.shape == (ENCODING_SIZE,)
    np.testing.assert_allclose(encoding[0:6], [0.05, 0.2, 0.1, 0.4, 0.04, 0.5])
    np.testing.assert_allclose(encoding[6:12], [0.2, 0.2, 0.2, 0.4, 0.08, 1.0])
    assert encoding[12] == 0.0
    assert encoding[13] == pytest.approx(15.0 / 10.0)
    assert encoding[14] == 0.0
    assert encoding[15] == pytest.approx(15.0 / math.hypot(100.0, 50.0))


def test_spatial_encoding_is_ordered():
    """Swapping the pair changes the relative-offset entries"""
    a = _box(0.0, 0.0, 10.0, 10.0)
    b = _box(20.0, 0.0, 40.0, 10.0)
    forward = spatial_encoding(a, b, 64, 48)
    backward = spatial_encoding(b, a, 64, 48)
    assert forward[13] == pytest.approx(2.5)
    assert backward[13] == pytest.approx(-1.25)


def test_encode_pair_array_shape_and_degenerate_boxes():
    boxes = np.array([[0.0, 0.0, 4.0, 4.0], [1.0, 1.0, 6.0, 9.0]])
    assert encode_pair_array(boxes, boxes[:1], 64, 48).shape == (2, 1, 16)
    with pytest.raises(GeometryError):
        encode_pair_array(boxes, np.array([[2.0, 2.0, 2.0, 5.0]]), 64, 48)
    with pytest.raises(GeometryError):
        encode_pair_array(boxes, boxes, 0, 48)


def test_encode_pairs_is_a_constant_tensor_of_pair_encodings():
    a = [_box(0.0, 0.0, 10.0, 20.0), _box(5.0, 5.0, 15.0, 25.0), _box(30.0, 10.0, 50.0, 40.0)]
    b = [_box(10.0, 0.0, 30.0, 20.0), _box(0.0, 0.0, 64.0, 48.0)]
    encoding = encode_pairs(a, b, 64, 48)
    assert encoding.shape == (3, 2, ENCODING_SIZE)
    assert not encoding.requires_grad
    np.testing.assert_allclose(encoding.data[2, 1], spatial_encoding(a[2], b[1], 64, 48))
