import math

import numpy as np
import pytest

from modt.encoder import FEATURE_DIM, TokenSet
from modt.heads import (
    BOX_OUTPUTS,
    Box3D,
    Detection,
    HeadConfig,
    decode_yaw,
    init_head_params,
    merge_detections,
    predict_boxes,
    predict_offsets,
    read_detections,
    token_offsets,
    write_detections,
)
from modt.numerics import Tensor
from modt.scans import PointCloud


def tokens(pos, seed=0):
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
    feats = np.random.default_rng(seed).normal(size=(len(pos), FEATURE_DIM))
    return TokenSet(Tensor(feats), pos, np.arange(len(pos)))


def head_params(seed=0):
    return init_head_params(HeadConfig(), np.random.default_rng(seed))


def sharp(m, scale=60.0):
    return Tensor(scale * np.eye(m))


def test_static_scene_offsets_vanish():
    pos = np.random.default_rng(1).uniform(-3, 3, (5, 3))
    off = token_offsets(tokens(pos), tokens(pos), sharp(5), head_params()).value
    np.testing.assert_allclose(off, 0.0, atol=1e-12)


def test_translated_object_offsets_are_minus_v():
    pos = np.random.default_rng(2).uniform(-1, 1, (6, 3)) * [4, 4, 0.5]
    v = np.array([0.4, -0.3, 0.0])
    off = token_offsets(tokens(pos + v), tokens(pos), sharp(6), head_params()).value
    np.testing.assert_allclose(off, np.broadcast_to(-v, off.shape), atol=1e-9)


def test_single_token_offset_reaches_every_foreground_point():
    cloud = PointCloud(np.array([[0.0, 0, 0], [0.5, 0, 0], [0, 0.7, 0], [9.0, 0, 0]]))
    field = predict_offsets(tokens([[0.1, 0.0, 0.0]]), tokens([[-0.4, 0.2, 0.0]]), sharp(1), head_params(), cloud)
    np.testing.assert_allclose(field.displacements[:3], np.tile([-0.5, 0.2, 0.0], (3, 1)))
    np.testing.assert_array_equal(field.displacements[3], 0.0)  # beyond r_bg
    assert field.token_index.tolist() == [0, 0, 0, -1]


def test_empty_previous_scan_is_skipped():
    cloud = PointCloud(np.zeros((2, 3)))
    empty = TokenSet.make_empty()
    field = predict_offsets(tokens([[0, 0, 0]]), empty, sharp(1), head_params(), cloud)
    assert field.skipped and np.all(field.displacements == 0)


def fixed_output_params(out):
    p = head_params()
    p["det.w2"] = np.zeros_like(p["det.w2"])
    p["det.b2"] = np.asarray(out, dtype=np.float64).reshape(1, BOX_OUTPUTS)
    return p


def test_zero_log_size_gives_unit_box_and_zero_yaw():
    dets = predict_boxes(tokens([[1.0, 2.0, 3.0]]), fixed_output_params([0, 0, 0, 0, 0, 0, 0, 1, 3.0]))
    assert len(dets) == 1
    np.testing.assert_array_equal(dets[0].box.size, [1.0, 1.0, 1.0])
    assert dets[0].box.yaw == 0.0
    np.testing.assert_array_equal(dets[0].box.center, [1.0, 2.0, 3.0])


def test_low_confidence_dropped():
    assert predict_boxes(tokens([[0, 0, 0]]), fixed_output_params([0] * 8 + [-3.0])) == []


def test_decode_yaw():
    assert decode_yaw(0.0, 1.0) == 0.0
    assert decode_yaw(1.0, 0.0) == pytest.approx(math.pi / 2)
    assert decode_yaw(0.0, -1.0) == pytest.approx(-math.pi)  # wrapped into [-pi, pi)


def det(x, conf):
    return Detection(Box3D([x, 0, 0], [1, 1, 1], 0.0), np.zeros(2), conf)


def test_merge_keeps_most_confident():
    kept = merge_detections([det(0.0, 0.6), det(0.5, 0.9), det(3.0, 0.7)], 1.0)
    assert [d.confidence for d in kept] == [0.9, 0.7]


def test_box_rejects_nonpositive_size():
    with pytest.raises(ValueError):
        Box3D([0, 0, 0], [1, 0, 1], 0.0)


def test_detection_file_round_trip(tmp_path):
    dets = [det(0.25, 0.75), det(4.0, 0.5)]
    write_detections(tmp_path / "d.txt", [(3, dets)])
    back = read_detections(tmp_path / "d.txt")
    assert [c for c, _ in back[3]] == [0.75, 0.5]
    np.testing.assert_allclose(back[3][0][1].center, [0.25, 0, 0])
